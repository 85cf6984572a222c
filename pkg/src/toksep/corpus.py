"""Synthetic evaluation corpus with recoverable speaker identity.

Each speaker owns a fixed spectral envelope (one structured band plus two
seeded random bands) and a speaker-specific amplitude-modulation rate.
Utterances are band-shaped noise under that envelope with per-utterance
jitter, modulation phase, slow amplitude drift, and level.  The spectral
envelope makes speakers separable in log-mel space; the modulation rate is
a temporal cue that survives utterance-mean normalization in the frontend.

On top of the envelope every utterance carries fast content: a secondary
band that hops among four speaker-jittered anchor frequencies on a 40 ms
grid, seeded per utterance.  The hop sequence is random, so unlike the
slow modulation it cannot be interpolated from neighboring frames; a
listener (or model) has to read it off each frame individually.

Two artifacts are written: an utterance table (speaker, utterance index,
path) for on-the-fly training synthesis, and a fixed held-out mixture
manifest pairing the last `eval_utts` utterances of every speaker.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import (SAMPLE_RATE, ManifestRow, Waveform, read_wav,
                    save_manifest, write_wav)

EVAL_SNRS = (0.0, 2.5, 5.0)
UNIT_ANCHORS_HZ = (900.0, 2400.0, 4300.0, 6400.0)
UNIT_HOP_SAMPLES = 640   # 40 ms content grid, two frontend hops


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 16
    n_utterances: int = 10
    eval_utts: int = 2
    seed: int = 0
    min_duration: float = 4.05
    max_duration: float = 4.5
    speaker_signature_mode: bool = True

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers to form mixtures")
        if not 0 < self.eval_utts < self.n_utterances:
            raise ValueError("eval_utts must leave at least one training utterance")
        if self.n_utterances - self.eval_utts < 2:
            raise ValueError("need >= 2 training utterances per speaker for reference picks")
        if not 0.5 <= self.min_duration <= self.max_duration:
            raise ValueError(f"bad duration range [{self.min_duration}, {self.max_duration}]")


@dataclass
class SpeakerSignature:
    centers_hz: np.ndarray
    widths_hz: np.ndarray
    gains: np.ndarray
    mod_rate_hz: float
    mod_depth: float
    unit_centers_hz: np.ndarray
    unit_width_hz: float
    unit_gain: float


def speaker_signature(cfg: CorpusConfig, speaker: int) -> SpeakerSignature:
    rng = np.random.default_rng(np.random.SeedSequence([0xC0421, cfg.seed, speaker]))
    primary = 400.0 + 340.0 * speaker
    centers = np.array([primary,
                        rng.uniform(300.0, 7000.0),
                        rng.uniform(300.0, 7000.0)])
    widths = np.array([rng.uniform(250.0, 450.0),
                       rng.uniform(400.0, 900.0),
                       rng.uniform(400.0, 900.0)])
    gains = np.array([1.0, rng.uniform(0.3, 0.55), rng.uniform(0.3, 0.55)])
    return SpeakerSignature(
        centers_hz=centers,
        widths_hz=widths,
        gains=gains,
        mod_rate_hz=1.6 + 0.37 * speaker,
        mod_depth=float(rng.uniform(0.35, 0.55)),
        unit_centers_hz=np.array(UNIT_ANCHORS_HZ) + rng.uniform(-150.0, 150.0, 4),
        unit_width_hz=float(rng.uniform(240.0, 320.0)),
        unit_gain=0.9,
    )


def _envelope(freqs: np.ndarray, sig: SpeakerSignature) -> np.ndarray:
    g = np.full_like(freqs, 0.04)
    for c, w, a in zip(sig.centers_hz, sig.widths_hz, sig.gains):
        g += a * np.exp(-0.5 * ((freqs - c) / w) ** 2)
    return g


def _content_track(rng: np.random.Generator, sig: SpeakerSignature,
                   freqs: np.ndarray, n: int, base_rms: float) -> np.ndarray:
    """Band noise hopping among the speaker's unit bands on the 40 ms grid."""
    n_units = len(sig.unit_centers_hz)
    n_seg = -(-n // UNIT_HOP_SAMPLES)
    choices = rng.integers(0, n_units, n_seg)
    gates = np.repeat(np.eye(n_units)[choices], UNIT_HOP_SAMPLES, axis=0)[:n]
    ramp = np.hanning(160)
    ramp /= ramp.sum()   # click-free hops; gates still sum to one everywhere
    track = np.zeros(n)
    for center, gate in zip(sig.unit_centers_hz, gates.T):
        band = np.exp(-0.5 * ((freqs - center) / sig.unit_width_hz) ** 2)
        carrier = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * band, n=n)
        track += carrier * np.convolve(gate, ramp, mode="same")
    rms = float(np.sqrt((track ** 2).mean()))
    if rms <= 0.0:
        return track
    return track * (sig.unit_gain * base_rms / rms)


def synth_utterance(cfg: CorpusConfig, speaker: int, utt: int) -> Waveform:
    """One deterministic utterance of `speaker`; identity cues per module docstring."""
    rng = np.random.default_rng(np.random.SeedSequence([0x07731, cfg.seed, speaker, utt]))
    sig = speaker_signature(cfg, speaker)
    duration = rng.uniform(cfg.min_duration, cfg.max_duration)
    n = int(round(duration * SAMPLE_RATE))

    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    if cfg.speaker_signature_mode:
        gain = _envelope(freqs, sig)
        jitter = np.zeros_like(freqs)
        for m in range(1, 4):
            jitter += rng.normal(0.0, 0.08) * np.cos(2.0 * np.pi * freqs * m / 8000.0
                                                     + rng.uniform(0.0, 2.0 * np.pi))
        gain = gain * np.exp(jitter)
    else:
        gain = np.ones_like(freqs)
    shaped = np.fft.irfft(spectrum * gain, n=n)
    if cfg.speaker_signature_mode:
        base_rms = float(np.sqrt((shaped ** 2).mean()))
        shaped = shaped + _content_track(rng, sig, freqs, n, base_rms)

    t = np.arange(n) / SAMPLE_RATE
    am = 1.0 + sig.mod_depth * np.sin(2.0 * np.pi * sig.mod_rate_hz * t
                                      + rng.uniform(0.0, 2.0 * np.pi))
    knots = 1.0 + 0.2 * rng.standard_normal(6)
    drift = np.interp(np.linspace(0.0, 5.0, n), np.arange(6.0), np.clip(knots, 0.5, 1.5))
    shaped = shaped * am * drift

    peak = np.abs(shaped).max()
    if peak <= 0:
        raise RuntimeError("degenerate synthetic utterance")
    shaped = shaped * (rng.uniform(0.35, 0.7) / peak)
    return Waveform(shaped)


@dataclass
class UtteranceTable:
    """Corpus listing: rows of (speaker index, utterance index, wav path)."""

    rows: list[tuple[int, int, str]]
    eval_utts: int
    n_utterances: int

    def speakers(self) -> list[int]:
        return sorted({s for s, _, _ in self.rows})

    def paths(self, speaker: int, train_only: bool | None = None) -> list[str]:
        cut = self.n_utterances - self.eval_utts
        out = []
        for s, u, p in self.rows:
            if s != speaker:
                continue
            if train_only is True and u >= cut:
                continue
            if train_only is False and u < cut:
                continue
            out.append(p)
        return out


def build_corpus(cfg: CorpusConfig, out_dir) -> tuple[Path, Path]:
    """Write all WAVs plus the utterance table and held-out mixture manifest.

    Returns (utterance_table_path, eval_manifest_path).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(cfg.n_speakers):
        for u in range(cfg.n_utterances):
            name = f"spk{s:02d}_utt{u:02d}.wav"
            write_wav(out / name, synth_utterance(cfg, s, u))
            rows.append((s, u, name))
    table_path = out / "utterances.tsv"
    lines = ["# speaker\tutterance\tpath", f"# eval_utts={cfg.eval_utts}"]
    lines += [f"{s}\t{u}\t{p}" for s, u, p in rows]
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    eval_rows = []
    cut = cfg.n_utterances - cfg.eval_utts
    idx = 0
    for s in range(cfg.n_speakers):
        for u in range(cut, cfg.n_utterances):
            other = cut + ((u - cut + 1) % cfg.eval_utts)
            i_spk = (s + 5) % cfg.n_speakers
            eval_rows.append(ManifestRow(
                target=f"spk{s:02d}_utt{u:02d}.wav",
                interference=f"spk{i_spk:02d}_utt{other:02d}.wav",
                reference=f"spk{s:02d}_utt{other:02d}.wav",
                snr_db=EVAL_SNRS[idx % len(EVAL_SNRS)],
                seed=1000 + idx,
            ))
            idx += 1
    eval_path = out / "eval_pairs.tsv"
    save_manifest(eval_path, eval_rows)
    return table_path, eval_path


def load_utterance_table(path) -> UtteranceTable:
    p = Path(path)
    rows = []
    eval_utts = None
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            if stripped.startswith("# eval_utts="):
                eval_utts = int(stripped.split("=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected speaker<TAB>utt<TAB>path")
        rows.append((int(parts[0]), int(parts[1]), str(p.parent / parts[2])))
    if not rows:
        raise ValueError(f"{path}: empty utterance table")
    n_utts = max(u for _, u, _ in rows) + 1
    if eval_utts is None:
        eval_utts = min(2, max(n_utts - 2, 0)) or 1
    return UtteranceTable(rows, eval_utts=eval_utts, n_utterances=n_utts)


@lru_cache(maxsize=512)
def load_wav_cached(path: str) -> Waveform:
    return read_wav(path)
