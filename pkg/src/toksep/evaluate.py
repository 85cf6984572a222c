"""Token-space evaluation: error rates, similarity proxies, and reports.

TER (token error rate) is normalized Levenshtein distance over token
sequences, the discrete stand-in for a recognizer-based error rate.
spk_sim_d is the cosine between time-and-layer-pooled detokenized features,
measured against the discretized clean target.  feature_mse is a plain
distortion number, not a perceptual score.

Every report also carries a copy-mixture baseline (the mixture's own tokens
scored as if they were the output) and an oracle self-check row (the
discretized target scored against itself, which must hit the exact optima).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import ManifestRow, make_mixture_sample, read_wav
from .frontend import FrontendConfig
from .model import ModelConfig, TokenExtractor
from .tensor import Tensor
from .tokenizer import Codebook, TokenGrid, detokenize
from .trainer import _or_none, prepare_item, token_accuracy


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    if len(a) == 0:
        return len(b)
    if len(b) == 0:
        return len(a)
    prev = np.arange(len(b) + 1, dtype=np.int64)
    cur = np.empty_like(prev)
    offsets = np.arange(len(b) + 1, dtype=np.int64)
    for i, ai in enumerate(a, 1):
        cur[0] = i
        cur[1:] = np.minimum(prev[:-1] + (b != ai), prev[1:] + 1)
        # propagate insertions left to right via a prefix minimum
        cur = np.minimum.accumulate(cur - offsets) + offsets
        prev, cur = cur, prev
    return int(prev[-1])


def token_error_rate(hyp, ref) -> float:
    """Edit distance / reference length; 2-D inputs average over layers."""
    hyp = np.asarray(hyp, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if hyp.ndim != ref.ndim or hyp.ndim not in (1, 2):
        raise ValueError(f"hyp/ref must both be 1-D or 2-D, got {hyp.shape} vs {ref.shape}")
    if hyp.ndim == 1:
        hyp, ref = hyp[None, :], ref[None, :]
    if hyp.shape[0] != ref.shape[0]:
        raise ValueError(f"layer counts differ: {hyp.shape[0]} vs {ref.shape[0]}")
    rates = []
    for h, r in zip(hyp, ref):
        if len(r) == 0:
            raise ValueError("empty reference sequence")
        rates.append(edit_distance(h, r) / len(r))
    return float(np.mean(rates))


def _pooled(grid: TokenGrid, cb: Codebook) -> np.ndarray:
    return detokenize(grid, cb).data.mean(axis=(0, 1))


def spk_sim_d(output_grid: TokenGrid, target_grid: TokenGrid, cb: Codebook) -> float:
    """Cosine of mean-pooled detokenized features; identical pools give exactly 1."""
    u = _pooled(output_grid, cb)
    v = _pooled(target_grid, cb)
    nu = float(u @ u)
    nv = float(v @ v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("zero-norm pooled vector")
    if np.array_equal(u, v):
        return 1.0
    return float((u @ v) / np.sqrt(nu * nv))


def feature_mse(output_grid: TokenGrid, target_grid: TokenGrid, cb: Codebook) -> float:
    a = detokenize(output_grid, cb).data
    b = detokenize(target_grid, cb).data
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


@dataclass
class EvalRow:
    index: int
    target: str
    interference: str
    snr_db: float
    accuracy_layers: list[float]
    accuracy: float
    ter: float
    spk_sim: float
    feature_mse: float
    baseline_accuracy: float
    baseline_ter: float
    oracle_ok: bool


@dataclass
class EvalReport:
    mode: str
    config_hash: str
    codebook_hash: str
    rows: list[EvalRow] = field(default_factory=list)
    accuracy_layers: list[float] = field(default_factory=list)
    accuracy: float = 0.0
    ter: float = 0.0
    spk_sim: float = 0.0
    feature_mse: float = 0.0
    baseline_accuracy: float = 0.0
    baseline_ter: float = 0.0
    oracle_ok: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def format_table(self) -> str:
        head = (f"mode={self.mode}  config={self.config_hash or '-'}  "
                f"codebook={self.codebook_hash}  rows={len(self.rows)}")
        cols = f"{'row':>4} {'target':<20} {'snr':>5} {'acc':>7} {'ter':>7} {'sim':>7} {'mse':>9} {'b.acc':>7} {'b.ter':>7}"
        lines = [head, cols, "-" * len(cols)]
        for r in self.rows:
            lines.append(f"{r.index:>4} {Path(r.target).name:<20} {r.snr_db:>5.1f} "
                         f"{r.accuracy:>7.3f} {r.ter:>7.3f} {r.spk_sim:>7.3f} "
                         f"{r.feature_mse:>9.5f} {r.baseline_accuracy:>7.3f} {r.baseline_ter:>7.3f}")
        lines.append("-" * len(cols))
        lines.append(f"{'mean':>4} {'':<20} {'':>5} {self.accuracy:>7.3f} {self.ter:>7.3f} "
                     f"{self.spk_sim:>7.3f} {self.feature_mse:>9.5f} "
                     f"{self.baseline_accuracy:>7.3f} {self.baseline_ter:>7.3f}")
        lines.append(f"oracle self-check: {'ok' if self.oracle_ok else 'FAILED'}")
        return "\n".join(lines)


def evaluate(params: dict[str, Tensor], model_cfg: ModelConfig, fe_cfg: FrontendConfig,
             cb: Codebook, manifest_rows: list[ManifestRow], base_dir,
             mode: str = "standard", checkpoint_meta: dict | None = None,
             config_hash: str = "") -> EvalReport:
    """Score a model over pre-paired mixtures; deterministic given inputs."""
    if checkpoint_meta is not None:
        ck_hash = checkpoint_meta.get("codebook_hash")
        if ck_hash != cb.hash():
            raise ValueError(f"checkpoint was trained against codebook {ck_hash}, "
                             f"got {cb.hash()}; refusing to evaluate")
    if not manifest_rows:
        raise ValueError("empty evaluation manifest")
    base = Path(base_dir)
    extractor = TokenExtractor(model_cfg, params)
    report = EvalReport(mode=mode, config_hash=config_hash, codebook_hash=cb.hash())
    for idx, row in enumerate(manifest_rows):
        snr = 2.5 if row.snr_db is None else float(row.snr_db)
        seed = idx if row.seed is None else int(row.seed)
        sample, valid_m, valid_r = make_mixture_sample(
            read_wav(base / row.target), read_wav(base / row.interference),
            read_wav(base / row.reference), snr, seed)
        item = prepare_item(sample, valid_m, valid_r, mode, fe_cfg, cb)
        pred = extractor.extract_tokens(item.mix, item.ref,
                                        mix_mask=_or_none(item.mix_mask),
                                        ref_mask=_or_none(item.ref_mask))
        if mode == "standard":
            baseline = item.mix
        else:
            baseline = prepare_item(sample, valid_m, valid_r, "standard", fe_cfg, cb).mix
        layers, acc = token_accuracy(pred, item.clean, item.mix_mask)
        _, base_acc = token_accuracy(baseline, item.clean, item.mix_mask)
        oracle_ok = (
            token_accuracy(item.clean, item.clean)[1] == 1.0
            and token_error_rate(item.clean.tokens, item.clean.tokens) == 0.0
            and spk_sim_d(item.clean, item.clean, cb) == 1.0
        )
        report.rows.append(EvalRow(
            index=idx,
            target=row.target,
            interference=row.interference,
            snr_db=snr,
            accuracy_layers=layers,
            accuracy=acc,
            ter=token_error_rate(pred.tokens, item.clean.tokens),
            spk_sim=spk_sim_d(pred, item.clean, cb),
            feature_mse=feature_mse(pred, item.clean, cb),
            baseline_accuracy=base_acc,
            baseline_ter=token_error_rate(baseline.tokens, item.clean.tokens),
            oracle_ok=oracle_ok,
        ))
    rows = report.rows
    report.accuracy_layers = [float(x) for x in
                              np.mean([r.accuracy_layers for r in rows], axis=0)]
    report.accuracy = float(np.mean([r.accuracy for r in rows]))
    report.ter = float(np.mean([r.ter for r in rows]))
    report.spk_sim = float(np.mean([r.spk_sim for r in rows]))
    report.feature_mse = float(np.mean([r.feature_mse for r in rows]))
    report.baseline_accuracy = float(np.mean([r.baseline_accuracy for r in rows]))
    report.baseline_ter = float(np.mean([r.baseline_ter for r in rows]))
    report.oracle_ok = all(r.oracle_ok for r in rows)
    return report


def ablation_summary(reports: dict[str, EvalReport]) -> dict:
    """Directional comparison across run modes, with explicit inversion flags."""
    summary = {
        "ter": {m: r.ter for m, r in reports.items()},
        "accuracy": {m: r.accuracy for m, r in reports.items()},
        "baseline_accuracy": {m: r.baseline_accuracy for m, r in reports.items()},
    }
    if "standard" in reports and "nocat" in reports:
        summary["standard_beats_nocat"] = reports["standard"].ter < reports["nocat"].ter
    if "standard" in reports and "hybrid" in reports:
        summary["hybrid_inversion"] = reports["hybrid"].ter > reports["standard"].ter
    return summary
