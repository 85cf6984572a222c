"""The token-extraction network and its checkpoint format.

Pipeline: per-layer token embeddings are fused per frame by a learned
softmax over layer scores; the fused mixture stream queries the reference
stream through a stack of cross-attention blocks; the result modulates the
mixture via FiLM; an encoder-only (bidirectional) transformer then predicts
clean tokens for every input layer through independent linear heads.

The reference stream never receives positional encoding, so the model is
invariant to permutations of reference frames by construction.
"""
from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .frontend import FeatureStack
from .nn import (cross_entropy, gelu, layer_norm, linear, multi_head_attention,
                 sinusoidal_positions)
from .optim import AdamW
from .tensor import Tensor, no_grad
from .tokenizer import TokenGrid

CKPT_MAGIC = b"TSLM"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint file violates the declared layout or fails its checksum."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers_in: int = 6
    K: int = 32
    d_model: int = 256
    xattn_blocks: int = 4
    xattn_heads: int = 16
    xattn_mlp_hidden: int = 1024
    lm_blocks: int = 6
    lm_heads: int = 4
    mlp_hidden: int = 2048
    e_feat: int = 32
    size_preset: str | None = None

    def __post_init__(self):
        if self.n_layers_in < 1 or self.K < 2 or self.d_model < 2:
            raise ValueError(f"degenerate model config: n={self.n_layers_in}, K={self.K}, d={self.d_model}")
        if min(self.xattn_blocks, self.lm_blocks, self.xattn_heads, self.lm_heads) < 1:
            raise ValueError("block and head counts must be >= 1")
        if self.d_model % self.xattn_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by xattn_heads {self.xattn_heads}")
        if self.d_model % self.lm_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by lm_heads {self.lm_heads}")
        if min(self.xattn_mlp_hidden, self.mlp_hidden, self.e_feat) < 1:
            raise ValueError("hidden and feature dims must be >= 1")


def preset(name: str, **overrides) -> ModelConfig:
    """Named model sizes; tiny/desk are test scale, S/M/L the full ladder."""
    table = {
        "tiny": dict(n_layers_in=2, K=5, d_model=8, xattn_blocks=1, xattn_heads=2,
                     xattn_mlp_hidden=16, lm_blocks=1, lm_heads=2, mlp_hidden=16, e_feat=8),
        "desk": dict(n_layers_in=3, K=32, d_model=64, xattn_blocks=2, xattn_heads=4,
                     xattn_mlp_hidden=128, lm_blocks=2, lm_heads=4, mlp_hidden=128, e_feat=32),
        "S": dict(n_layers_in=6, K=1000, d_model=256, xattn_blocks=4, xattn_heads=16,
                  xattn_mlp_hidden=1024, lm_blocks=6, lm_heads=4, mlp_hidden=2048, e_feat=1024),
        "M": dict(n_layers_in=6, K=1000, d_model=512, xattn_blocks=4, xattn_heads=16,
                  xattn_mlp_hidden=1024, lm_blocks=8, lm_heads=8, mlp_hidden=2048, e_feat=1024),
        "L": dict(n_layers_in=6, K=1000, d_model=768, xattn_blocks=4, xattn_heads=16,
                  xattn_mlp_hidden=1024, lm_blocks=12, lm_heads=16, mlp_hidden=2048, e_feat=1024),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
    fields = dict(table[name], size_preset=name)
    fields.update(overrides)
    return ModelConfig(**fields)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded scaled-uniform init; FiLM starts at identity (gamma 1, beta 0)."""
    rng = np.random.default_rng(np.random.SeedSequence([0x30DE1, seed]))
    params: dict[str, Tensor] = {}

    def uniform(name, shape, fan_in):
        params[name] = Tensor(rng.uniform(-1.0, 1.0, shape) / np.sqrt(fan_in), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    d, k = cfg.d_model, cfg.K
    for i in range(cfg.n_layers_in):
        uniform(f"embed.{i}", (k, d), d)
    uniform("agg.w", (cfg.n_layers_in, d), d)

    def block(prefix, hidden):
        for w in ("wq", "wk", "wv", "wo"):
            uniform(f"{prefix}.attn.{w}", (d, d), d)
        for b in ("bq", "bv", "bo"):
            zeros(f"{prefix}.attn.{b}", (d,))
        ones(f"{prefix}.ln1.g", (d,))
        zeros(f"{prefix}.ln1.b", (d,))
        uniform(f"{prefix}.mlp.w1", (d, hidden), d)
        zeros(f"{prefix}.mlp.b1", (hidden,))
        uniform(f"{prefix}.mlp.w2", (hidden, d), hidden)
        zeros(f"{prefix}.mlp.b2", (d,))
        ones(f"{prefix}.ln2.g", (d,))
        zeros(f"{prefix}.ln2.b", (d,))

    for b in range(cfg.xattn_blocks):
        block(f"xattn.{b}", cfg.xattn_mlp_hidden)
    ones("film.gamma", (d,))
    zeros("film.beta", (d,))
    ones("film_ln.g", (d,))
    zeros("film_ln.b", (d,))
    for b in range(cfg.lm_blocks):
        block(f"lm.{b}", cfg.mlp_hidden)
    for i in range(cfg.n_layers_in):
        uniform(f"head.{i}.w", (d, k), d)
        zeros(f"head.{i}.b", (k,))
    uniform("hybrid.w", (cfg.e_feat, d), cfg.e_feat)
    zeros("hybrid.b", (d,))
    return params


def _attn_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k: params[f"{prefix}.attn.{k}"]
            for k in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}


_pe_cache: dict[tuple[int, int], np.ndarray] = {}


def _positions(t: int, d: int) -> np.ndarray:
    key = (t, d)
    if key not in _pe_cache:
        _pe_cache[key] = sinusoidal_positions(t, d)
    return _pe_cache[key]


class TokenExtractor:
    """Forward passes, loss, and decoding over one parameter set."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    # -- streams ---------------------------------------------------------
    def embed_and_aggregate(self, grid: TokenGrid) -> Tensor:
        """Per-frame softmax-weighted fusion of the per-layer embeddings."""
        cfg = self.cfg
        if grid.K != cfg.K:
            raise ValueError(f"grid vocabulary {grid.K} != model K {cfg.K}")
        if grid.layers != cfg.n_layers_in:
            raise ValueError(f"grid has {grid.layers} layers, model expects {cfg.n_layers_in}")
        embs = [T.embedding(self.params[f"embed.{i}"], grid.tokens[i])
                for i in range(cfg.n_layers_in)]
        stacked = T.stack(embs, axis=0)                       # (n, T, d)
        w = self.params["agg.w"].reshape((cfg.n_layers_in, 1, cfg.d_model))
        scores = (stacked * w).sum(axis=2)                    # (n, T)
        alpha = T.softmax(scores, axis=0)
        fused = (stacked * alpha.reshape((cfg.n_layers_in, grid.frames, 1))).sum(axis=0)
        return fused                                          # (T, d)

    def aggregate_continuous(self, fs: FeatureStack) -> Tensor:
        """Continuous mixture path: layer mean, then a learned projection."""
        if fs.dim != self.cfg.e_feat:
            raise ValueError(f"feature dim {fs.dim} != model e_feat {self.cfg.e_feat}")
        pooled = Tensor(fs.data.mean(axis=0))                 # (T, E)
        return linear(pooled, self.params["hybrid.w"], self.params["hybrid.b"])

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        h = gelu(linear(x, self.params[f"{prefix}.mlp.w1"], self.params[f"{prefix}.mlp.b1"]))
        return linear(h, self.params[f"{prefix}.mlp.w2"], self.params[f"{prefix}.mlp.b2"])

    def _block(self, x: Tensor, kv: Tensor, prefix: str, heads: int,
               key_mask: np.ndarray | None) -> Tensor:
        p = self.params
        a = multi_head_attention(x, kv, kv, heads, _attn_params(p, prefix), key_mask=key_mask)
        x = layer_norm(x + a, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        m = self._mlp(x, prefix)
        return layer_norm(x + m, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])

    def cross_attend(self, e_m: Tensor, e_r: Tensor,
                     ref_mask: np.ndarray | None = None,
                     return_internals: bool = False):
        """Speaker injection: cross-attention stack, then FiLM, then norm."""
        if e_m.ndim != 2 or e_r.ndim != 2 or e_m.shape[1] != e_r.shape[1]:
            raise ValueError(f"stream shape mismatch: {e_m.shape} vs {e_r.shape}")
        x = e_m
        for b in range(self.cfg.xattn_blocks):
            x = self._block(x, e_r, f"xattn.{b}", self.cfg.xattn_heads, ref_mask)
        e_spk = x
        p = self.params
        film = p["film.gamma"] * e_spk * e_m + p["film.beta"] * e_spk
        out = layer_norm(film, p["film_ln.g"], p["film_ln.b"])
        if return_internals:
            return out, e_spk, film
        return out

    def lm_forward(self, e_f: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Positional encoding, bidirectional encoder blocks, n classifier heads."""
        t, d = e_f.shape
        x = e_f + Tensor(_positions(t, d))
        for b in range(self.cfg.lm_blocks):
            x = self._block(x, x, f"lm.{b}", self.cfg.lm_heads, mask)
        logits = [linear(x, self.params[f"head.{i}.w"], self.params[f"head.{i}.b"])
                  for i in range(self.cfg.n_layers_in)]
        return T.stack(logits, axis=0)                        # (n, T, K)

    # -- end to end --------------------------------------------------------
    def forward(self, mix, ref_grid: TokenGrid,
                mix_mask: np.ndarray | None = None,
                ref_mask: np.ndarray | None = None) -> Tensor:
        """Logits (n, T, K); `mix` is a TokenGrid, or a FeatureStack in hybrid mode."""
        if isinstance(mix, TokenGrid):
            e_m = self.embed_and_aggregate(mix)
        elif isinstance(mix, FeatureStack):
            e_m = self.aggregate_continuous(mix)
        else:
            raise TypeError(f"mixture input must be TokenGrid or FeatureStack, got {type(mix)!r}")
        e_r = self.embed_and_aggregate(ref_grid)
        e_f = self.cross_attend(e_m, e_r, ref_mask=ref_mask)
        return self.lm_forward(e_f, mask=mix_mask)

    def loss(self, logits: Tensor, clean: TokenGrid,
             mask: np.ndarray | None = None) -> Tensor:
        """Uniform mean of per-layer cross-entropy against the clean tokens."""
        n, t, k = logits.shape
        if clean.tokens.shape != (n, t):
            raise ValueError(f"clean grid {clean.tokens.shape} != logits ({n}, {t})")
        if clean.K != k:
            raise ValueError(f"clean vocabulary {clean.K} != logit classes {k}")
        total = None
        for i in range(n):
            layer_logits = T.slice_axis(logits, 0, i, i + 1).reshape((t, k))
            ce = cross_entropy(layer_logits, clean.tokens[i], mask)
            total = ce if total is None else total + ce
        return total * (1.0 / n)

    def extract_tokens(self, mix, ref_grid: TokenGrid,
                       mix_mask: np.ndarray | None = None,
                       ref_mask: np.ndarray | None = None) -> TokenGrid:
        """Argmax decoding (ties to the lowest token index); no graph is built."""
        with no_grad():
            logits = self.forward(mix, ref_grid, mix_mask=mix_mask, ref_mask=ref_mask)
        return TokenGrid(np.argmax(logits.data, axis=-1), self.cfg.K)


# -- checkpoint format -------------------------------------------------------
# "TSLM", u8 version, u8 float width, u64 timestamp (excluded from the CRC),
# u32 json length + JSON (config, metadata, optimizer scalars, section order),
# named sections (u16 name len, name, u8 ndim, u32 dims, raw floats),
# trailing u32 CRC32 computed with the timestamp bytes zeroed.

_TS_OFFSET = 6


def save_checkpoint(path, params: dict[str, Tensor], cfg: ModelConfig,
                    meta: dict | None = None, opt: AdamW | None = None,
                    width: int = 8) -> None:
    if width not in (4, 8):
        raise CheckpointFormatError(f"float width must be 4 or 8, got {width}")
    dtype = "<f4" if width == 4 else "<f8"
    sections: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in sorted(params.items())]
    opt_info = None
    if opt is not None:
        state = opt.state_dict()
        opt_info = {"step": state["step"], "lr": opt.lr, "beta1": opt.beta1,
                    "beta2": opt.beta2, "eps": opt.eps, "weight_decay": opt.weight_decay}
        for name in sorted(state["m"]):
            sections.append((f"opt.m.{name}", state["m"][name]))
            sections.append((f"opt.v.{name}", state["v"][name]))
    header = {
        "config": asdict(cfg),
        "meta": meta or {},
        "opt": opt_info,
        "param_names": sorted(params),
    }
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<BB", CKPT_VERSION, width)
    blob += struct.pack("<Q", time.time_ns())
    meta_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(sections))
    for name, arr in sections:
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,)))
        blob += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    crc_input = bytearray(blob)
    crc_input[_TS_OFFSET:_TS_OFFSET + 8] = b"\x00" * 8
    blob += struct.pack("<I", zlib.crc32(bytes(crc_input)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


@dataclass
class CheckpointData:
    params: dict[str, Tensor]
    cfg: ModelConfig
    meta: dict
    opt_state: dict | None
    timestamp_ns: int


def load_checkpoint(path) -> CheckpointData:
    blob = Path(path).read_bytes()
    if len(blob) < 22 or blob[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, width = struct.unpack_from("<BB", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if width not in (4, 8):
        raise CheckpointFormatError(f"{path}: bad float width {width}")
    crc_input = bytearray(blob[:-4])
    crc_input[_TS_OFFSET:_TS_OFFSET + 8] = b"\x00" * 8
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if (zlib.crc32(bytes(crc_input)) & 0xFFFFFFFF) != stored_crc:
        raise CheckpointFormatError(f"{path}: checksum mismatch")
    (timestamp,) = struct.unpack_from("<Q", blob, _TS_OFFSET)
    offset = 14
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    header = json.loads(blob[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_sections,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    dtype = "<f4" if width == 4 else "<f8"
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{max(ndim, 1)}I", blob, offset)
        offset += 4 * max(ndim, 1)
        shape = tuple(dims[:ndim]) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        offset += count * width
        arrays[name] = arr.astype(np.float64).reshape(shape if ndim else (1,))
        if not ndim:
            arrays[name] = arrays[name].reshape(())
    if offset != len(blob) - 4:
        raise CheckpointFormatError(f"{path}: trailing bytes after sections")
    cfg = ModelConfig(**header["config"])
    params = {}
    for name in header["param_names"]:
        if name not in arrays:
            raise CheckpointFormatError(f"{path}: missing parameter section {name!r}")
        params[name] = Tensor(arrays[name], requires_grad=True)
    opt_state = None
    if header.get("opt") is not None:
        opt_state = dict(header["opt"])
        opt_state["m"] = {n: arrays[f"opt.m.{n}"] for n in header["param_names"]}
        opt_state["v"] = {n: arrays[f"opt.v.{n}"] for n in header["param_names"]}
    return CheckpointData(params, cfg, header.get("meta", {}), opt_state, timestamp)
