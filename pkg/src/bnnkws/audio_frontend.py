"""Log-mel spectrogram front-end for one-second 16 kHz keyword clips.

Pipeline per clip: normalize to exactly 16000 samples, slide a 25 ms Hann
window with a 10 ms hop, take the magnitude-squared FFT (zero-padded to
512 points), apply 64 triangular mel filters spanning 50-7500 Hz, and
log-compress with a small floor. Everything is deterministic and pure.

Conventions the clip format leaves open and this module fixes: HTK mel
scale mel(f) = 2595*log10(1 + f/700), symmetric Hann window, log floor
1e-6, no pre-emphasis and no per-clip normalization.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = [
    "SAMPLE_RATE",
    "CLIP_SAMPLES",
    "PcmClip",
    "FrontendConfig",
    "LogMelSpectrogram",
    "load_wav",
    "hz_to_mel",
    "mel_to_hz",
    "mel_filterbank",
    "log_mel",
    "save_spectrogram",
    "load_spectrogram",
]

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000


@dataclass(frozen=True)
class PcmClip:
    """Mono PCM16 audio. Loader-produced clips are exactly one second."""

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.int16)
        object.__setattr__(self, "samples", s)
        if s.ndim != 1:
            raise ValueError("samples must be one-dimensional")


@dataclass(frozen=True)
class FrontendConfig:
    window_ms: int = 25
    hop_ms: int = 10
    n_mels: int = 64
    fmin_hz: float = 50.0
    fmax_hz: float = 7500.0
    fft_size: int | None = None  # None: next power of two >= window samples
    log_floor: float = 1e-6
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= {self.sample_rate_hz // 2}, "
                f"got [{self.fmin_hz}, {self.fmax_hz}]"
            )
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.window_ms <= 0 or self.hop_ms <= 0:
            raise ValueError("window and hop must be positive")
        fft = self.fft_size
        if fft is None:
            fft = 1 << (self.window_samples - 1).bit_length()
            object.__setattr__(self, "fft_size", fft)
        if fft < self.window_samples or fft & (fft - 1):
            raise ValueError(
                f"fft_size must be a power of two >= window ({self.window_samples})"
            )

    @property
    def window_samples(self) -> int:
        return self.window_ms * self.sample_rate_hz // 1000

    @property
    def hop_samples(self) -> int:
        return self.hop_ms * self.sample_rate_hz // 1000

    def frame_count(self, clip_samples: int) -> int:
        if clip_samples < self.window_samples:
            raise ValueError("clip shorter than one analysis window")
        return (clip_samples - self.window_samples) // self.hop_samples + 1


@dataclass(frozen=True)
class LogMelSpectrogram:
    """frames x bands matrix of log mel energies."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError("spectrogram must be two-dimensional")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bands(self) -> int:
        return self.values.shape[1]


def load_wav(path: str | Path) -> PcmClip:
    """Read a RIFF/WAVE PCM16 file as a mono one-second 16 kHz clip.

    Multichannel input is averaged to mono; short clips are zero-padded and
    long clips truncated to exactly 16000 samples. Other sample rates or
    encodings are rejected (no resampler here).
    """
    try:
        with wave.open(str(path), "rb") as wav:
            rate = wav.getframerate()
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            n = wav.getnframes()
            raw = wav.readframes(n)
    except (wave.Error, EOFError) as e:
        raise DataError(f"{path}: malformed or non-PCM wav: {e}") from None
    if width != 2:
        raise DataError(f"{path}: unsupported encoding: {8 * width}-bit, want PCM16")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: unsupported sample rate {rate}, want {SAMPLE_RATE}")

    samples = np.frombuffer(raw, dtype="<i2")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
        samples = np.round(samples).astype(np.int16)
    if samples.shape[0] >= CLIP_SAMPLES:
        samples = samples[:CLIP_SAMPLES]
    else:
        samples = np.concatenate(
            [samples, np.zeros(CLIP_SAMPLES - samples.shape[0], np.int16)]
        )
    return PcmClip(samples)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular mel filters evaluated at FFT bin frequencies.

    Returns an (n_mels, fft_size/2 + 1) nonnegative matrix. Filter centers
    are equally spaced on the mel scale between mel(fmin) and mel(fmax);
    triangle m rises from edge m to center m and falls to edge m+1, so the
    filters tile (fmin, fmax) with no gaps.
    """
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate_hz / cfg.fft_size

    mel_pts = np.linspace(
        hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2
    )
    hz_pts = mel_to_hz(mel_pts)

    centers_as_bins = np.rint(hz_pts[1:-1] / (cfg.sample_rate_hz / cfg.fft_size))
    if len(centers_as_bins) > 1 and (np.diff(centers_as_bins) < 1).any():
        raise ValueError(
            f"{cfg.n_mels} mel filters collapse at fft_size={cfg.fft_size}: "
            "adjacent centers fall in the same FFT bin"
        )

    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    if (fb.sum(axis=1) <= 0).any():
        raise ValueError("some mel filters cover no FFT bin; reduce n_mels")
    return fb


def log_mel(clip: PcmClip, cfg: FrontendConfig) -> LogMelSpectrogram:
    """Log mel energies: per frame, window -> |FFT|^2 -> filterbank -> log."""
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"clip rate {clip.sample_rate_hz} != config rate {cfg.sample_rate_hz}"
        )
    x = clip.samples.astype(np.float64)
    win = cfg.window_samples
    hop = cfg.hop_samples
    n_frames = cfg.frame_count(x.shape[0])

    window = np.hanning(win)
    fb = mel_filterbank(cfg)

    out = np.empty((n_frames, cfg.n_mels))
    for t in range(n_frames):
        frame = x[t * hop : t * hop + win] * window
        spectrum = np.abs(np.fft.rfft(frame, cfg.fft_size)) ** 2
        out[t] = np.log(fb @ spectrum + cfg.log_floor)
    return LogMelSpectrogram(out)


# --- spectrogram cache ------------------------------------------------------
#
# Flat little-endian file: magic "LMEL0001", frames u32, bands u32, then
# frames*bands float32 row-major.

_LMEL_MAGIC = b"LMEL0001"


def save_spectrogram(spec: LogMelSpectrogram, path: str | Path) -> None:
    blob = _LMEL_MAGIC + struct.pack("<II", spec.frames, spec.bands)
    Path(path).write_bytes(blob + spec.values.astype("<f4").tobytes())


def load_spectrogram(path: str | Path) -> LogMelSpectrogram:
    raw = Path(path).read_bytes()
    hdr = len(_LMEL_MAGIC) + 8
    if len(raw) < hdr or raw[: len(_LMEL_MAGIC)] != _LMEL_MAGIC:
        raise DataError(f"{path}: not a spectrogram cache file")
    frames, bands = struct.unpack_from("<II", raw, len(_LMEL_MAGIC))
    expected = hdr + frames * bands * 4
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", count=frames * bands, offset=hdr)
    return LogMelSpectrogram(values.astype(np.float64).reshape(frames, bands))
