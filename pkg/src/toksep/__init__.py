"""Target-speaker token extraction over discrete speech tokens.

A desk-scale pipeline: a deterministic multi-layer feature frontend,
per-layer k-means tokenizers, and an encoder-only token language model
that re-predicts the clean target token stream from a tokenized
[reference, mixture, reference] concatenation.
"""
from .audio import MixtureSample, Waveform, mix_at_snr, read_wav, write_wav
from .config import PipelineConfig, config_hash, default_config, load_config
from .frontend import FeatureStack, FrontendConfig, extract
from .model import ModelConfig, TokenExtractor, init_params, preset
from .tensor import Tensor
from .tokenizer import Codebook, TokenGrid, fit_codebook, kmeans_fit, tokenize

__version__ = "0.1.0"

__all__ = [
    "Codebook", "FeatureStack", "FrontendConfig", "MixtureSample", "ModelConfig",
    "PipelineConfig", "TokenExtractor", "TokenGrid", "Tensor", "Waveform",
    "config_hash", "default_config", "extract", "fit_codebook", "init_params",
    "kmeans_fit", "load_config", "mix_at_snr", "preset", "read_wav",
    "tokenize", "write_wav", "__version__",
]
