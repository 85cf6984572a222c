"""WAV ingestion, SNR-controlled mixing, clipping, and concatenation.

All audio is mono PCM16 at 16 kHz.  Samples live as float64 in [-1, 1]
(int16 / 32768 on read).  Mixing rescales the interference to hit an exact
power ratio; if the sum clips, mixture and target are peak-normalized by
the same factor so they stay usable as a training pair.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
SILENCE_POWER = 1e-10  # mean-square floor below which a signal counts as silent


class AudioFormatError(ValueError):
    """File or waveform violates the PCM16 mono 16 kHz contract."""


class SilentSignalError(ValueError):
    """Mixing was asked to scale a signal with no measurable power."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise AudioFormatError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples**2)) if len(self.samples) else 0.0


@dataclass
class MixtureSample:
    """One synthesized training/eval item: 3 s mixture, 4 s reference."""

    mixture: Waveform
    reference: Waveform
    target: Waveform
    snr_db: float
    seed: int

    def __post_init__(self):
        if len(self.mixture) != 3 * SAMPLE_RATE:
            raise ValueError(f"mixture must be 3 s ({3 * SAMPLE_RATE} samples), got {len(self.mixture)}")
        if len(self.reference) != 4 * SAMPLE_RATE:
            raise ValueError(f"reference must be 4 s ({4 * SAMPLE_RATE} samples), got {len(self.reference)}")
        if len(self.target) != len(self.mixture):
            raise ValueError("target and mixture lengths differ")
        if not 0.0 <= self.snr_db <= 5.0:
            raise ValueError(f"snr_db must lie in [0, 5], got {self.snr_db}")


def read_wav(path) -> Waveform:
    """Read a PCM16 mono 16 kHz RIFF/WAVE file."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"not a readable WAV file: {path} ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if len(raw) != 2 * n:
        raise AudioFormatError(f"{path}: truncated data chunk")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data)


def write_wav(path, w: Waveform) -> None:
    ints = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())


def _scaled_mix(target: Waveform, interference: Waveform, snr_db: float):
    if len(target) != len(interference):
        raise ValueError(f"length mismatch: target {len(target)} vs interference {len(interference)}")
    p_t = target.power()
    p_i = interference.power()
    if p_t <= SILENCE_POWER:
        raise SilentSignalError("silent target")
    if p_i <= SILENCE_POWER:
        raise SilentSignalError("silent interference")
    scale = np.sqrt(p_t / (p_i * 10.0 ** (snr_db / 10.0)))
    mix = target.samples + scale * interference.samples
    kept_target = target.samples
    peak = float(np.max(np.abs(mix))) if len(mix) else 0.0
    if peak > 1.0:
        mix = mix / peak
        kept_target = kept_target / peak
    return Waveform(mix), Waveform(kept_target.copy()), float(scale)


def mix_at_snr(target: Waveform, interference: Waveform, snr_db: float) -> Waveform:
    """Mix so the target-to-interference power ratio is exactly snr_db."""
    mixture, _, _ = _scaled_mix(target, interference, snr_db)
    return mixture


def clip_or_pad(w: Waveform, seconds: float, seed: int) -> Waveform:
    return clip_or_pad_with_info(w, seconds, seed)[0]


def clip_or_pad_with_info(w: Waveform, seconds: float, seed: int) -> tuple[Waveform, int]:
    """Seeded random crop to `seconds`, or zero-pad at the end.

    Also returns the count of valid (non-padding) samples, which the
    trainer turns into a frame mask.
    """
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    n = int(round(seconds * w.sample_rate))
    if len(w) == n:
        return w, n
    if len(w) > n:
        rng = np.random.default_rng(np.random.SeedSequence([0x77AF, seed & 0x7FFFFFFF]))
        start = int(rng.integers(0, len(w) - n + 1))
        return Waveform(w.samples[start : start + n].copy()), n
    out = np.zeros(n)
    out[: len(w)] = w.samples
    return Waveform(out), len(w)


def concat_ref_mix_ref(s_r: Waveform, s_m: Waveform) -> Waveform:
    """Assemble [reference, mixture, reference], sample-exact."""
    if s_r.sample_rate != s_m.sample_rate:
        raise AudioFormatError("sample rate mismatch in concatenation")
    if len(s_m) == 0:
        raise ValueError("empty mixture")
    if len(s_r) == 0:
        raise ValueError("empty reference")
    return Waveform(np.concatenate([s_r.samples, s_m.samples, s_r.samples]))


def make_mixture_sample(
    target_src: Waveform,
    interference_src: Waveform,
    reference_src: Waveform,
    snr_db: float,
    seed: int,
) -> tuple[MixtureSample, int, int]:
    """Clip sources to 3 s / 3 s / 4 s and mix; fully determined by seed.

    Returns the sample plus the valid (pre-padding) sample counts of the
    mixture and reference clips.
    """
    target, valid_t = clip_or_pad_with_info(target_src, 3.0, seed * 3 + 0)
    interference, valid_i = clip_or_pad_with_info(interference_src, 3.0, seed * 3 + 1)
    reference, valid_r = clip_or_pad_with_info(reference_src, 4.0, seed * 3 + 2)
    mixture, kept_target, _ = _scaled_mix(target, interference, snr_db)
    sample = MixtureSample(mixture=mixture, reference=reference, target=kept_target,
                           snr_db=snr_db, seed=seed)
    return sample, min(valid_t, valid_i), valid_r


@dataclass
class ManifestRow:
    """One line of a sample manifest: three paths plus optional overrides."""

    target: str
    interference: str
    reference: str
    snr_db: float | None = None
    seed: int | None = None

    def to_line(self) -> str:
        parts = [self.target, self.interference, self.reference]
        if self.snr_db is not None or self.seed is not None:
            parts.append("" if self.snr_db is None else repr(float(self.snr_db)))
        if self.seed is not None:
            parts.append(str(self.seed))
        return "\t".join(parts)


def load_manifest(path) -> list[ManifestRow]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if not 3 <= len(parts) <= 5:
            raise ValueError(f"{path}:{lineno}: expected 3-5 tab-separated fields, got {len(parts)}")
        snr = float(parts[3]) if len(parts) > 3 and parts[3] != "" else None
        seed = int(parts[4]) if len(parts) > 4 and parts[4] != "" else None
        rows.append(ManifestRow(parts[0], parts[1], parts[2], snr_db=snr, seed=seed))
    return rows


def save_manifest(path, rows: list[ManifestRow]) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in rows), encoding="utf-8")
