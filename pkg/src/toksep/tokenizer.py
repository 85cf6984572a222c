"""Per-layer KMeans codebooks and the token grids they produce.

Fitting is Lloyd's algorithm with k-means++ seeding; ties and empty-cluster
recovery are pinned down so runs are bit-reproducible.  Centroids are held
at f32 precision from the moment a Codebook is built, so the in-memory
codebook and its on-disk KMC1 image assign identical tokens.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, concat_ref_mix_ref
from .frontend import (FRAME_HOP, FRAME_WIN, FeatureStack, FrontendConfig,
                       extract, frame_count)

KMC_MAGIC = b"KMC1"
KMC_VERSION = 1
TOK_MAGIC = b"TOK1"
MIN_CENTROID_GAP = 1e-12


class CodebookFormatError(ValueError):
    """KMC1/TOK1 file violates the declared layout."""


@dataclass
class TokenGrid:
    """n_layers x T integer tokens over a shared vocabulary of size K."""

    tokens: np.ndarray
    K: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError(f"token grid must be 2-D (layers, frames), got {self.tokens.shape}")
        if self.K < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.K}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.K):
            raise ValueError(f"tokens outside [0, {self.K})")

    @property
    def layers(self) -> int:
        return self.tokens.shape[0]

    @property
    def frames(self) -> int:
        return self.tokens.shape[1]

    def slice_frames(self, start: int, stop: int) -> "TokenGrid":
        return TokenGrid(self.tokens[:, start:stop].copy(), self.K)


@dataclass
class Codebook:
    """Stacked per-layer centroids, (n_layers, K, E), plus fit metadata."""

    centroids: np.ndarray
    layer_ids: list[int] = field(default_factory=list)
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 3:
            raise ValueError(f"centroids must be 3-D (layers, K, E), got {c.shape}")
        if c.shape[1] < 2:
            raise ValueError(f"K must be >= 2, got {c.shape[1]}")
        if not np.isfinite(c).all():
            raise ValueError("centroids contain non-finite values")
        # Pin to storage precision so disk and memory agree token-for-token.
        self.centroids = c.astype("<f4").astype(np.float64)
        if not self.layer_ids:
            self.layer_ids = list(range(1, c.shape[0] + 1))
        if len(self.layer_ids) != c.shape[0]:
            raise ValueError("layer_ids length != centroid layer count")
        for i in range(self.layers):
            d2 = _pairwise_sq_dists(self.centroids[i], self.centroids[i])
            np.fill_diagonal(d2, np.inf)
            if d2.min() <= MIN_CENTROID_GAP:
                raise ValueError(f"layer {self.layer_ids[i]}: duplicate centroids")

    @property
    def layers(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[2]

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<III", self.layers, self.K, self.dim))
        h.update(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
        h.update(json.dumps(self.layer_ids).encode())
        return h.hexdigest()[:16]


def _pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(N, K) squared Euclidean distances."""
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float]


def kmeans_fit(features: list[FeatureStack], layer: int, K: int,
               max_iter: int = 100, tol: float = 1e-6, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on one feature layer.

    Inertia is asserted non-increasing across iterations; empty clusters are
    reseeded to the point currently farthest from its assigned centroid.
    """
    x = np.concatenate([fs.data[layer] for fs in features], axis=0)
    return kmeans_fit_points(x, K, max_iter=max_iter, tol=tol, seed=seed, salt=layer)


def kmeans_fit_points(x: np.ndarray, K: int, max_iter: int = 100,
                      tol: float = 1e-6, seed: int = 0, salt: int = 0) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < K:
        raise ValueError(f"K={K} exceeds total training frames {n}")
    if np.unique(x, axis=0).shape[0] < K:
        raise ValueError(f"only {np.unique(x, axis=0).shape[0]} distinct points for K={K}")
    rng = np.random.default_rng(np.random.SeedSequence([0xC10D, seed, salt]))
    centroids = _kmeanspp_init(x, K, rng)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _pairwise_sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise AssertionError(f"inertia rose: {history[-1]} -> {inertia}")
        history.append(inertia)
        new_c, assign = _update_centroids(x, assign, centroids, K)
        shift = float(np.sqrt(((new_c - centroids) ** 2).sum(axis=1)).max())
        centroids = new_c
        if shift < tol:
            break
    d2 = _pairwise_sq_dists(x, centroids)
    final_inertia = float(d2[np.arange(n), d2.argmin(axis=1)].sum())
    return KMeansResult(centroids, final_inertia, n_iter, history)


def _kmeanspp_init(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((K, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = _pairwise_sq_dists(x, centroids[:1]).min(axis=1)
    for j in range(1, K):
        probs = d2 / d2.sum()
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, _pairwise_sq_dists(x, centroids[j : j + 1]).min(axis=1))
    return centroids


def _update_centroids(x, assign, centroids, K):
    """Mean update plus farthest-point theft for empty clusters.

    Donor means are recomputed after each theft, which keeps the Lloyd
    objective monotone through the repair.
    """
    assign = assign.copy()
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    sums = np.zeros((K, x.shape[1]))
    np.add.at(sums, assign, x)
    new_c = centroids.copy()
    nonzero = counts > 0
    new_c[nonzero] = sums[nonzero] / counts[nonzero, None]
    for j in np.flatnonzero(~nonzero):
        d = ((x - new_c[assign]) ** 2).sum(axis=1)
        p = int(d.argmax())
        donor = assign[p]
        sums[donor] -= x[p]
        counts[donor] -= 1.0
        if counts[donor] > 0:
            new_c[donor] = sums[donor] / counts[donor]
        assign[p] = j
        new_c[j] = x[p]
        sums[j] = x[p]
        counts[j] = 1.0
    return new_c, assign


def fit_codebook(features: list[FeatureStack], K: int, max_iter: int = 100,
                 tol: float = 1e-6, seed: int = 0,
                 layer_ids: list[int] | None = None) -> Codebook:
    """Fit one codebook per feature layer; metadata records each fit."""
    if not features:
        raise ValueError("no feature stacks given")
    n_layers = features[0].layers
    per_layer = []
    meta_layers = []
    for layer in range(n_layers):
        res = kmeans_fit(features, layer, K, max_iter=max_iter, tol=tol, seed=seed)
        per_layer.append(res.centroids)
        meta_layers.append({"inertia": res.inertia, "iterations": res.n_iter})
    meta = {"seed": seed, "max_iter": max_iter, "tol": tol, "layers": meta_layers}
    return Codebook(np.stack(per_layer, axis=0),
                    layer_ids=layer_ids or [], train_meta=meta)


def tokenize(fs: FeatureStack, cb: Codebook) -> TokenGrid:
    """Nearest-centroid assignment per layer and frame; ties take the lowest index."""
    if fs.dim != cb.dim:
        raise ValueError(f"feature dim {fs.dim} != codebook dim {cb.dim}")
    if fs.layers != cb.layers:
        raise ValueError(f"feature layers {fs.layers} != codebook layers {cb.layers}")
    tokens = np.empty((fs.layers, fs.frames), dtype=np.int64)
    for i in range(fs.layers):
        tokens[i] = _pairwise_sq_dists(fs.data[i], cb.centroids[i]).argmin(axis=1)
    return TokenGrid(tokens, cb.K)


def detokenize(grid: TokenGrid, cb: Codebook) -> FeatureStack:
    """Replace each token with its centroid row."""
    if grid.layers != cb.layers:
        raise ValueError(f"grid layers {grid.layers} != codebook layers {cb.layers}")
    if grid.K != cb.K:
        raise ValueError(f"grid K {grid.K} != codebook K {cb.K}")
    data = np.stack([cb.centroids[i][grid.tokens[i]] for i in range(grid.layers)], axis=0)
    return FeatureStack(data)


def context_features(s_r: Waveform, s_m: Waveform, cfg: FrontendConfig) -> FeatureStack:
    """Features of the mixture computed inside [reference, mixture, reference].

    Returns the middle slice [T_r, T_r + T) with T = T_total - 2*T_r, so the
    mixture frames carry the concatenated utterance's context normalization.
    """
    t_r = frame_count(len(s_r))
    full = extract(concat_ref_mix_ref(s_r, s_m), cfg)
    t = full.frames - 2 * t_r
    if t <= 0:
        raise ValueError(f"mixture too short relative to framing: middle slice would have {t} frames")
    return full.slice_frames(t_r, t_r + t)


def tokenize_mixture_with_context(s_r: Waveform, s_m: Waveform, cfg: FrontendConfig,
                                  cb: Codebook, nocat: bool = False) -> TokenGrid:
    """Mixture tokens, by default biased by surrounding reference context.

    nocat=True tokenizes the raw mixture alone (the ablation path).
    """
    if nocat:
        return tokenize(extract(s_m, cfg), cb)
    return tokenize(context_features(s_r, s_m, cfg), cb)


def aligned_middle_range(ref_samples: int, mix_samples: int,
                         hop: int = FRAME_HOP, win: int = FRAME_WIN) -> tuple[int, int]:
    """Offset and length within the middle slice that line up with standalone framing.

    Valid only when the reference length is a hop multiple; then middle-slice
    frame j0 + k starts at exactly the same sample as standalone mixture
    frame k, and the two join-straddling frames are dropped.
    """
    if ref_samples % hop != 0:
        raise ValueError(f"reference length {ref_samples} is not a multiple of hop {hop}")
    t_r = frame_count(ref_samples, hop, win)
    j0 = ref_samples // hop - t_r
    count = frame_count(mix_samples, hop, win)
    t_slice = frame_count(2 * ref_samples + mix_samples, hop, win) - 2 * t_r
    if j0 < 0 or j0 + count > t_slice:
        raise ValueError(f"aligned range [{j0}, {j0 + count}) outside middle slice of {t_slice}")
    return j0, count


# -- file formats -----------------------------------------------------------

def save_codebook(path, cb: Codebook) -> None:
    meta = dict(cb.train_meta)
    meta["layer_ids"] = cb.layer_ids
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(KMC_MAGIC)
        fh.write(struct.pack("<BIII", KMC_VERSION, cb.layers, cb.K, cb.dim))
        fh.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def load_codebook(path) -> Codebook:
    blob = Path(path).read_bytes()
    if len(blob) < 4 + 13:
        raise CodebookFormatError(f"{path}: truncated header")
    if blob[:4] != KMC_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, n, k, e = struct.unpack_from("<BIII", blob, 4)
    if version != KMC_VERSION:
        raise CodebookFormatError(f"{path}: unsupported version {version}")
    if n < 1 or k < 2 or e < 1:
        raise CodebookFormatError(f"{path}: degenerate shape ({n}, {k}, {e})")
    offset = 17
    body = n * k * e * 4
    if len(blob) < offset + body + 4:
        raise CodebookFormatError(f"{path}: truncated centroid block")
    cents = np.frombuffer(blob, dtype="<f4", count=n * k * e, offset=offset).reshape(n, k, e)
    offset += body
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) != offset + meta_len:
        raise CodebookFormatError(f"{path}: metadata length mismatch")
    meta = json.loads(blob[offset:].decode("utf-8"))
    layer_ids = meta.pop("layer_ids", [])
    return Codebook(cents.astype(np.float64), layer_ids=layer_ids, train_meta=meta)


def save_tokens(path, grid: TokenGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(TOK_MAGIC)
        fh.write(struct.pack("<III", grid.layers, grid.frames, grid.K))
        fh.write(np.ascontiguousarray(grid.tokens, dtype="<u4").tobytes())


def load_tokens(path) -> TokenGrid:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise CodebookFormatError(f"{path}: truncated header")
    if blob[:4] != TOK_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {blob[:4]!r}")
    n, t, k = struct.unpack_from("<III", blob, 4)
    if n < 1 or t < 1 or k < 2:
        raise CodebookFormatError(f"{path}: degenerate shape ({n}, {t}, K={k})")
    if len(blob) != 16 + n * t * 4:
        raise CodebookFormatError(f"{path}: payload is {len(blob) - 16} bytes, header implies {n * t * 4}")
    tokens = np.frombuffer(blob, dtype="<u4", offset=16).reshape(n, t).astype(np.int64)
    if tokens.max() >= k:
        raise CodebookFormatError(f"{path}: token {tokens.max()} outside [0, {k})")
    return TokenGrid(tokens, k)
