"""Training loop: seeded on-the-fly mixture synthesis, AdamW, checkpoints.

All randomness is drawn from counter-based generators keyed by
(salt, seed, step, slot), so any batch can be regenerated without replaying
the run, and resuming from a checkpoint reproduces the uninterrupted run.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import MixtureSample, make_mixture_sample
from .corpus import UtteranceTable, load_wav_cached
from .frontend import FRAME_WIN, FeatureStack, FrontendConfig, extract, frame_count
from .model import (ModelConfig, TokenExtractor, init_params, load_checkpoint,
                    save_checkpoint)
from .optim import AdamW, clip_global_norm
from .tensor import NonFiniteError, Tensor, zero_grads
from .tokenizer import (Codebook, TokenGrid, aligned_middle_range,
                        context_features, tokenize,
                        tokenize_mixture_with_context)

MODES = ("standard", "nocat", "hybrid")

_BATCH_SALT = 0x7A0C
_POOL_SALT = 0x0F00D
_PROBE_SALT = 0xFACE


class TrainDivergedError(RuntimeError):
    """A step produced non-finite values; the last good checkpoint survives."""

    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 5e-4
    snr_lo: float = 0.0
    snr_hi: float = 5.0
    seed: int = 0
    checkpoint_every: int = 500
    mode: str = "standard"
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    probe_every: int = 100
    fixed_pool: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ValueError(f"steps and batch must be >= 1, got {self.steps}, {self.batch}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.snr_lo <= self.snr_hi <= 5.0:
            raise ValueError(f"snr range [{self.snr_lo}, {self.snr_hi}] outside [0, 5]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fixed_pool < 0 or self.checkpoint_every < 0 or self.probe_every < 0:
            raise ValueError("counters must be >= 0")


@dataclass
class TrainItem:
    """One prepared sample: model inputs plus validity masks."""

    mix: object                 # TokenGrid, or FeatureStack in hybrid mode
    ref: TokenGrid
    clean: TokenGrid
    mix_mask: np.ndarray
    ref_mask: np.ndarray
    meta: dict


def _rng(salt: int, seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([salt, seed, step, slot]))


def synth_training_sample(table: UtteranceTable, rng: np.random.Generator,
                          snr_lo: float, snr_hi: float):
    """Seeded pick of target/interference/reference, then SNR-controlled mix."""
    speakers = table.speakers()
    t_pos = int(rng.integers(len(speakers)))
    i_pos = (t_pos + 1 + int(rng.integers(len(speakers) - 1))) % len(speakers)
    t_spk, i_spk = speakers[t_pos], speakers[i_pos]
    t_paths = table.paths(t_spk, train_only=True)
    i_paths = table.paths(i_spk, train_only=True)
    t_utt = int(rng.integers(len(t_paths)))
    ref_candidates = [p for j, p in enumerate(t_paths) if j != t_utt]
    if not ref_candidates:
        raise ValueError(f"speaker {t_spk} has no other utterance to serve as reference")
    ref_path = ref_candidates[int(rng.integers(len(ref_candidates)))]
    i_path = i_paths[int(rng.integers(len(i_paths)))]
    snr = float(rng.uniform(snr_lo, snr_hi))
    clip_seed = int(rng.integers(2 ** 31 - 1))
    sample, valid_m, valid_r = make_mixture_sample(
        load_wav_cached(t_paths[t_utt]), load_wav_cached(i_path),
        load_wav_cached(ref_path), snr, clip_seed)
    meta = {"target_speaker": t_spk, "interference_speaker": i_spk,
            "snr_db": snr, "target_path": t_paths[t_utt]}
    return sample, valid_m, valid_r, meta


def _valid_frames(valid_samples: int, total_frames: int) -> np.ndarray:
    n = frame_count(valid_samples) if valid_samples >= FRAME_WIN else 0
    return np.arange(total_frames) < n


def prepare_item(sample: MixtureSample, valid_m: int, valid_r: int, mode: str,
                 fe_cfg: FrontendConfig, cb: Codebook, meta: dict | None = None) -> TrainItem:
    """Tokenize one mixture sample for the given run mode.

    The context slice is trimmed to the frames that align exactly with
    standalone mixture framing, so every mode yields the same time length
    as the clean target grid.
    """
    ref_grid = tokenize(extract(sample.reference, fe_cfg), cb)
    clean_grid = tokenize(extract(sample.target, fe_cfg), cb)
    j0, count = aligned_middle_range(len(sample.reference), len(sample.mixture))
    if mode == "nocat":
        mix = tokenize(extract(sample.mixture, fe_cfg), cb)
    elif mode == "standard":
        full = tokenize_mixture_with_context(sample.reference, sample.mixture, fe_cfg, cb)
        mix = full.slice_frames(j0, j0 + count)
    elif mode == "hybrid":
        feats = context_features(sample.reference, sample.mixture, fe_cfg)
        mix = feats.slice_frames(j0, j0 + count)
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return TrainItem(
        mix=mix,
        ref=ref_grid,
        clean=clean_grid,
        mix_mask=_valid_frames(valid_m, count),
        ref_mask=_valid_frames(valid_r, ref_grid.frames),
        meta=meta or {},
    )


def make_batch(table: UtteranceTable, cfg: TrainConfig, fe_cfg: FrontendConfig,
               cb: Codebook, step: int, pool: list[TrainItem] | None = None) -> list[TrainItem]:
    """Deterministic batch for (cfg.seed, step); draws from `pool` when given."""
    items = []
    for slot in range(cfg.batch):
        rng = _rng(_BATCH_SALT, cfg.seed, step, slot)
        if pool is not None:
            items.append(pool[int(rng.integers(len(pool)))])
            continue
        sample, valid_m, valid_r, meta = synth_training_sample(
            table, rng, cfg.snr_lo, cfg.snr_hi)
        items.append(prepare_item(sample, valid_m, valid_r, cfg.mode, fe_cfg, cb, meta))
    return items


def build_fixed_pool(table: UtteranceTable, cfg: TrainConfig, fe_cfg: FrontendConfig,
                     cb: Codebook, size: int) -> list[TrainItem]:
    """The overfit preset: `size` samples synthesized once and reused forever."""
    pool = []
    for i in range(size):
        rng = _rng(_POOL_SALT, cfg.seed, 0, i)
        sample, valid_m, valid_r, meta = synth_training_sample(
            table, rng, cfg.snr_lo, cfg.snr_hi)
        pool.append(prepare_item(sample, valid_m, valid_r, cfg.mode, fe_cfg, cb, meta))
    return pool


def token_accuracy(pred: TokenGrid, ref: TokenGrid,
                   mask: np.ndarray | None = None) -> tuple[list[float], float]:
    """Per-layer and mean fraction of matching tokens over unmasked frames."""
    if pred.tokens.shape != ref.tokens.shape:
        raise ValueError(f"grid shapes differ: {pred.tokens.shape} vs {ref.tokens.shape}")
    if mask is None:
        mask = np.ones(pred.frames, dtype=bool)
    if not mask.any():
        raise ValueError("all frames masked")
    hits = (pred.tokens[:, mask] == ref.tokens[:, mask]).mean(axis=1)
    return [float(h) for h in hits], float(hits.mean())


def _probe_accuracy(extractor: TokenExtractor, items: list[TrainItem]) -> tuple[list[float], float]:
    per_layer = np.zeros(extractor.cfg.n_layers_in)
    for it in items:
        pred = extractor.extract_tokens(it.mix, it.ref,
                                        mix_mask=_or_none(it.mix_mask),
                                        ref_mask=_or_none(it.ref_mask))
        layers, _ = token_accuracy(pred, it.clean, it.mix_mask)
        per_layer += np.asarray(layers)
    per_layer /= len(items)
    return [float(x) for x in per_layer], float(per_layer.mean())


def _or_none(mask: np.ndarray) -> np.ndarray | None:
    return None if mask.all() else mask


def _rng_digest(salt: int, seed: int, step: int) -> str:
    return hashlib.sha256(f"{salt}:{seed}:{step}".encode()).hexdigest()[:12]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    final_checkpoint: Path
    log_path: Path
    steps_run: int
    final_loss: float
    probe_accuracy: float


def train(cfg: TrainConfig, model_cfg: ModelConfig, fe_cfg: FrontendConfig,
          cb: Codebook, table: UtteranceTable, out_dir,
          resume=None, config_hash: str = "",
          stop_at_accuracy: float | None = None,
          params_init: dict[str, Tensor] | None = None) -> TrainResult:
    """Run the loop; returns final parameters and artifact paths.

    Non-finite losses or gradients abort with TrainDivergedError; the most
    recent periodic checkpoint is left in place for post-mortems.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start_step = 0
    opt_state = None
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.meta.get("codebook_hash") != cb.hash():
            raise ValueError(f"checkpoint codebook hash {ck.meta.get('codebook_hash')} "
                             f"!= current codebook {cb.hash()}")
        params = ck.params
        model_cfg = ck.cfg
        start_step = int(ck.meta.get("step", 0))
        opt_state = ck.opt_state
    elif params_init is not None:
        params = params_init
    else:
        params = init_params(model_cfg, cfg.seed)
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    extractor = TokenExtractor(model_cfg, params)
    pool = None
    if cfg.fixed_pool:
        pool = build_fixed_pool(table, cfg, fe_cfg, cb, cfg.fixed_pool)
        probe_items = pool
    else:
        probe_items = [
            _prepare_probe(table, cfg, fe_cfg, cb, slot) for slot in range(cfg.batch)
        ]

    ckpt_meta = {
        "mode": cfg.mode,
        "train_seed": cfg.seed,
        "codebook_hash": cb.hash(),
        "config_hash": config_hash,
        "train": asdict(cfg),
        "frontend": asdict(fe_cfg),
    }
    log_path = out / "runlog.jsonl"
    log_fh = open(log_path, "a" if resume is not None else "w", encoding="utf-8")
    last_ckpt: Path | None = Path(resume) if resume is not None else None
    loss_value = float("nan")
    probe_mean = float("nan")
    steps_run = start_step

    def write_ckpt(step: int, name: str) -> Path:
        path = out / name
        save_checkpoint(path, params, model_cfg, meta=dict(ckpt_meta, step=step), opt=opt)
        return path

    try:
        for step in range(start_step + 1, cfg.steps + 1):
            t0 = time.perf_counter()
            record = {"step": step, "lr": cfg.lr,
                      "rng_digest": _rng_digest(_BATCH_SALT, cfg.seed, step)}
            try:
                items = make_batch(table, cfg, fe_cfg, cb, step, pool=pool)
                zero_grads(params)
                total = None
                for it in items:
                    logits = extractor.forward(it.mix, it.ref,
                                               mix_mask=_or_none(it.mix_mask),
                                               ref_mask=_or_none(it.ref_mask))
                    sample_loss = extractor.loss(logits, it.clean, it.mix_mask)
                    total = sample_loss if total is None else total + sample_loss
                total = total * (1.0 / len(items))
                total.backward()
                loss_value = total.item()
                norm, clipped = clip_global_norm(params, cfg.clip_norm)
                opt.step()
            except NonFiniteError as exc:
                record.update(event="non_finite", error=str(exc))
                log_fh.write(json.dumps(record) + "\n")
                raise TrainDivergedError(f"step {step}: {exc}", last_ckpt) from exc
            steps_run = step
            record.update(loss=loss_value, grad_norm=norm, clipped=clipped,
                          wall_time_s=time.perf_counter() - t0)
            stop_early = False
            if cfg.probe_every and (step % cfg.probe_every == 0 or step == cfg.steps):
                layers, probe_mean = _probe_accuracy(extractor, probe_items)
                record.update(probe_accuracy=probe_mean, probe_accuracy_layers=layers)
                if stop_at_accuracy is not None and probe_mean >= stop_at_accuracy:
                    stop_early = True
            log_fh.write(json.dumps(record) + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_ckpt = write_ckpt(step, f"ckpt_{step:06d}.tslm")
            if stop_early:
                break
    finally:
        log_fh.close()
    if np.isnan(probe_mean) and cfg.probe_every:
        _, probe_mean = _probe_accuracy(extractor, probe_items)
    final = write_ckpt(steps_run, "final.tslm")
    return TrainResult(params, final, log_path, steps_run, loss_value, probe_mean)


def _prepare_probe(table, cfg, fe_cfg, cb, slot) -> TrainItem:
    rng = _rng(_PROBE_SALT, cfg.seed, 0, slot)
    sample, valid_m, valid_r, meta = synth_training_sample(table, rng, cfg.snr_lo, cfg.snr_hi)
    return prepare_item(sample, valid_m, valid_r, cfg.mode, fe_cfg, cb, meta)


def read_runlog(path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
