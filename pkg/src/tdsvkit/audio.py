"""Audio ingestion, resampling, speed perturbation and MFCC extraction.

All features are computed at a single working rate (16 kHz by default);
callers resample on ingestion.  The MFCC pipeline is the common speaker
verification recipe: pre-emphasis, Hamming window, power spectrum, HTK-mel
triangular filterbank, log with a floor, orthonormal DCT-II, and
per-utterance cepstral mean subtraction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .accel import resample_kernel
from .errors import DomainError, FormatError, TooShortError, UnsupportedError


@dataclass
class Waveform:
    """Mono audio: float64 samples in [-1, 1] plus the sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MfccConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = 40
    n_mfcc: int = 20
    pre_emphasis: float = 0.97
    target_rate_hz: int = 16000
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mfcc > self.n_mels:
            raise DomainError("n_mfcc must not exceed n_mels")
        if self.frame_shift_ms > self.frame_length_ms:
            raise DomainError("frame shift must not exceed frame length")

    def frame_length(self) -> int:
        return int(round(self.target_rate_hz * self.frame_length_ms / 1000.0))

    def frame_shift(self) -> int:
        return int(round(self.target_rate_hz * self.frame_shift_ms / 1000.0))

    def fft_size(self) -> int:
        n = 1
        while n < self.frame_length():
            n *= 2
        return n


@dataclass
class FeatureMatrix:
    """MFCC frames, [T, n_mfcc], plus provenance."""

    frames: np.ndarray
    frame_shift_ms: float
    source_id: str = ""


# ---------------------------------------------------------------------------
# WAV container (RIFF little-endian, 16-bit PCM)
# ---------------------------------------------------------------------------


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file with 16-bit PCM samples.

    Multi-channel files keep only the first channel.  Sample values are
    scaled by 1/32768, then clipped into [-1, 1].
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: truncated chunk {cid!r}")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt/data chunk")
    if len(fmt) < 16:
        raise FormatError(f"{path}: fmt chunk too small")
    audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format != 1:
        raise UnsupportedError(f"{path}: only PCM (format 1) is supported, got {audio_format}")
    if bits != 16:
        raise UnsupportedError(f"{path}: only 16-bit samples are supported, got {bits}")
    if channels < 1 or rate <= 0:
        raise FormatError(f"{path}: bad channel count or sample rate")
    raw = np.frombuffer(data[: (len(data) // (2 * channels)) * 2 * channels], dtype="<i2")
    if channels > 1:
        raw = raw[::channels]
    samples = np.clip(raw.astype(np.float64) / 32768.0, -1.0, 1.0)
    return Waveform(samples=samples, sample_rate=int(rate))


def save_wav(path, w: Waveform):
    """Write 16-bit PCM WAV (mono, little-endian)."""
    q = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    data = q.tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate,
                                 w.sample_rate * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(data))
    with open(path, "wb") as fh:
        fh.write(hdr + data)


# ---------------------------------------------------------------------------
# resampling / speed perturbation
# ---------------------------------------------------------------------------


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited resampling (windowed sinc, 16 taps per side)."""
    if target_rate <= 0:
        raise DomainError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    step = w.sample_rate / target_rate
    y = resample_kernel(w.samples, n_out, step)
    return Waveform(np.clip(y, -1.0, 1.0), int(target_rate))


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Tempo+pitch change by resampling 1/factor and relabeling the rate.

    factor 1.1 plays 10% faster: round(n/1.1) samples, frequencies scaled
    up by 1.1.  Factors outside (0.5, 2.0) are rejected.
    """
    if not (0.5 < factor < 2.0):
        raise DomainError(f"speed factor {factor} outside (0.5, 2.0)")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w.samples) / factor))
    y = resample_kernel(w.samples, n_out, float(factor))
    return Waveform(np.clip(y, -1.0, 1.0), w.sample_rate)


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, rate: int) -> np.ndarray:
    """Triangular HTK-style filters on FFT bin frequencies, [n_mels, fft/2+1]."""
    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins) * rate / fft_size
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (freqs - lo) / (ctr - lo)
        down = (hi - freqs) / (hi - ctr)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are output coefficients."""
    n = np.arange(n_in)
    k = np.arange(n_out)[:, None]
    mat = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * n + 1) / (2.0 * n_in))
    mat[0] /= np.sqrt(2.0)
    return mat


def frame_signal(x: np.ndarray, frame_len: int, shift: int) -> np.ndarray:
    """Slice x into overlapping frames, [T, frame_len]; T = 1 + (N-len)//shift."""
    if len(x) < frame_len:
        raise TooShortError(f"{len(x)} samples < one frame of {frame_len}")
    n_frames = 1 + (len(x) - frame_len) // shift
    idx = np.arange(frame_len)[None, :] + shift * np.arange(n_frames)[:, None]
    return x[idx]


def log_mel_spectrogram(w: Waveform, cfg: MfccConfig) -> np.ndarray:
    """Log mel energies per frame, [T, n_mels], before any DCT or CMS."""
    if w.sample_rate != cfg.target_rate_hz:
        raise DomainError(
            f"waveform at {w.sample_rate} Hz; resample to {cfg.target_rate_hz} first")
    x = w.samples.astype(np.float64)
    emph = np.concatenate([x[:1], x[1:] - cfg.pre_emphasis * x[:-1]])
    frames = frame_signal(emph, cfg.frame_length(), cfg.frame_shift())
    window = np.hamming(cfg.frame_length())
    spec = np.fft.rfft(frames * window, n=cfg.fft_size(), axis=1)
    power = np.abs(spec) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.fft_size(), cfg.target_rate_hz)
    return np.log(np.maximum(power @ fb.T, cfg.log_floor))


def mfcc(w: Waveform, cfg: MfccConfig | None = None, source_id: str = "") -> FeatureMatrix:
    """MFCC features with per-utterance cepstral mean subtraction.

    Returns a FeatureMatrix of shape [T, n_mfcc] with zero column means.
    """
    cfg = cfg or MfccConfig()
    logmel = log_mel_spectrogram(w, cfg)
    dct = dct_matrix(cfg.n_mfcc, cfg.n_mels)
    ceps = logmel @ dct.T
    ceps -= ceps.mean(axis=0, keepdims=True)
    return FeatureMatrix(frames=ceps, frame_shift_ms=cfg.frame_shift_ms, source_id=source_id)
