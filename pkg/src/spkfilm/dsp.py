"""Waveform I/O, MFCC front-end, context expansion and the ATFM feature file."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.io.wavfile

from .errors import FormatError, TooShortError, UnsupportedFormatError

FEATURE_MAGIC = b"ATFM"
_LOG_FLOOR = float(np.finfo(np.float32).eps)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class FeatureMatrix:
    data: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise FormatError(f"feature matrix must be T x D with T, D >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FormatError("feature matrix contains non-finite values")
        self.data = data

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class ContextBatch:
    windows: np.ndarray  # B x W x D
    center_indices: np.ndarray

    @property
    def context(self) -> int:
        return (self.windows.shape[1] - 1) // 2


@dataclass
class MfccConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_ceps: int = 13
    num_mel_bins: int = 23
    fft_size: int = 512
    preemphasis: float = 0.97
    low_freq: float = 20.0
    high_freq: float | None = None  # None means Nyquist
    cmn: bool = True

    @property
    def frame_length(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))


# --------------------------------------------------------------------------
# WAV I/O


def load_wav(path, allow_float: bool = False) -> Waveform:
    """Read a mono RIFF/WAVE file.

    PCM16 is scaled by 1/32768. 32-bit float files (the format mixtures are
    written in) are accepted only with ``allow_float=True``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, struct.error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise UnsupportedFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 and allow_float:
        samples = data
    else:
        raise UnsupportedFormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.size == 0:
        raise FormatError(f"{path}: no samples")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, float32: bool = False) -> None:
    """Write ``w`` as PCM16 (clipped) or as 32-bit float WAV."""
    if float32:
        scipy.io.wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
        return
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.astype("<i2").tobytes())


# --------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters, equally spaced on the mel scale, over rfft bins."""
    high = cfg.sample_rate / 2.0 if cfg.high_freq is None else cfg.high_freq
    n_bins = cfg.fft_size // 2 + 1
    bin_mel = hz_to_mel(np.arange(n_bins) * cfg.sample_rate / cfg.fft_size)
    edges = np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(high), cfg.num_mel_bins + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.clip(np.minimum(up, down), 0.0, None)


def num_frames(n_samples: int, frame_length: int, frame_shift: int) -> int:
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // frame_shift + 1


def frame_signal(x: np.ndarray, frame_length: int, frame_shift: int) -> np.ndarray:
    n = num_frames(x.shape[0], frame_length, frame_shift)
    idx = np.arange(frame_length)[None, :] + frame_shift * np.arange(n)[:, None]
    return x[idx]


def compute_mfcc(w: Waveform, cfg: MfccConfig | None = None) -> FeatureMatrix:
    cfg = cfg or MfccConfig(sample_rate=w.sample_rate)
    flen, hop = cfg.frame_length, cfg.frame_shift
    if len(w) < flen:
        raise TooShortError(f"waveform has {len(w)} samples, need at least {flen}")
    if flen > cfg.fft_size:
        raise TooShortError(f"frame length {flen} exceeds FFT size {cfg.fft_size}")

    frames = frame_signal(w.samples.astype(np.float64), flen, hop)
    # per-frame pre-emphasis; the first sample is emphasized against itself
    emph = frames.copy()
    emph[:, 1:] -= cfg.preemphasis * frames[:, :-1]
    emph[:, 0] -= cfg.preemphasis * frames[:, 0]
    emph *= np.hamming(flen)

    power = np.abs(np.fft.rfft(emph, n=cfg.fft_size, axis=1)) ** 2
    mel_energy = power @ mel_filterbank(cfg).T
    log_mel = np.log(np.maximum(mel_energy, _LOG_FLOOR))
    ceps = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]
    if cfg.cmn:
        ceps = ceps - ceps.mean(axis=0, keepdims=True)
    return FeatureMatrix(ceps.astype(np.float32), cfg.frame_shift_ms, cfg.frame_length_ms)


# --------------------------------------------------------------------------
# context expansion


def expand_context(f: FeatureMatrix | np.ndarray, c: int = 10) -> ContextBatch:
    """Stack ``c`` frames on each side of every frame, replicating the edges."""
    if c < 0:
        raise ValueError(f"context must be non-negative, got {c}")
    data = f.data if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float32)
    t = data.shape[0]
    centers = np.arange(t)
    idx = np.clip(centers[:, None] + np.arange(-c, c + 1)[None, :], 0, t - 1)
    return ContextBatch(data[idx], centers)


# --------------------------------------------------------------------------
# ATFM feature files


def write_features(path, f: FeatureMatrix) -> None:
    data = np.ascontiguousarray(f.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *data.shape))
        fh.write(data.tobytes())


def read_features(path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    t, d = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != 4 * t * d:
        raise FormatError(
            f"{path}: truncated payload, header says {t}x{d} floats but found {len(payload) // 4}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)
    return FeatureMatrix(data)


# --------------------------------------------------------------------------
# manifests


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    path: Path
    label_path: Path | None = None


def read_manifest(path) -> list[Utterance]:
    """Parse ``utt_id<TAB>speaker_id<TAB>wav_path[<TAB>label_path]`` lines.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns")
        label = base / cols[3] if len(cols) == 4 else None
        out.append(Utterance(cols[0], cols[1], base / cols[2], label))
    return out


def write_manifest(path, utts: list[Utterance]) -> None:
    base = Path(path).parent
    lines = []
    for u in utts:
        cols = [u.utt_id, u.speaker_id, _rel(u.path, base)]
        if u.label_path is not None:
            cols.append(_rel(u.label_path, base))
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)
