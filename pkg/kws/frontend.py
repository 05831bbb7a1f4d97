"""Audio frontend: RIFF/WAVE reading and writing, MFCC extraction.

compute_mfcc turns a one-second clip into the T x 1 x F FeatureMap the
networks consume: pre-emphasis, Hann-windowed frames, power spectrum, a mel
filterbank limited to [mel_low_hz, mel_high_hz] (this band limit is the
whole of the 20 Hz / 4 kHz band-pass), log with a floor, orthonormal DCT-II.
No per-utterance normalization is applied.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.fftpack import dct

from .errors import DataError, WavFormatError
from .tensor import FeatureMap

PCM_FORMAT = 1
EXTENSIBLE_FORMAT = 0xFFFE
LOG_FLOOR = 1e-10
PRE_EMPHASIS = 0.97


@dataclass(frozen=True)
class MfccConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 30.0
    shift_ms: float = 10.0
    num_coeffs: int = 40
    mel_low_hz: float = 20.0
    mel_high_hz: float = 4000.0
    num_mel_filters: int = 40
    fft_size: int = 512
    clip_seconds: float = 1.0

    def __post_init__(self):
        if not (self.window_ms > self.shift_ms > 0):
            raise ValueError("need window_ms > shift_ms > 0")
        if not (0 <= self.mel_low_hz < self.mel_high_hz <= self.sample_rate_hz / 2):
            raise ValueError("need 0 <= mel_low_hz < mel_high_hz <= sample_rate_hz / 2")
        if not (1 <= self.num_coeffs <= self.num_mel_filters):
            raise ValueError("need 1 <= num_coeffs <= num_mel_filters")
        if self.window_samples > self.fft_size:
            raise ValueError("fft_size must be at least the window length in samples")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.shift_ms * self.sample_rate_hz / 1000.0))

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate_hz))

    def num_frames(self, num_samples: int) -> int:
        return 1 + (num_samples - self.window_samples) // self.shift_samples


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise DataError("audio clip is empty")
        if not np.all(np.isfinite(s)):
            raise DataError("audio clip contains non-finite samples")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]


def fit_length(samples: np.ndarray, length: int) -> np.ndarray:
    """Zero-pad or truncate to exactly length samples."""
    out = np.zeros(length, dtype=np.float64)
    n = min(length, samples.shape[0])
    out[:n] = samples[:n]
    return out


# ---------------------------------------------------------------------------
# WAV


def _iter_chunks(data: bytes, path: str):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(
                f"chunk {cid!r} runs past end of file", {"path": path, "chunk": cid.decode("latin-1")}
            )
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """Read a 16-bit PCM mono WAV file: (samples scaled to [-1, 1], sample rate)."""
    p = str(path)
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("malformed RIFF/WAVE header", {"path": p})

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data, p):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short", {"path": p})
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == EXTENSIBLE_FORMAT and len(body) >= 26:
                # WAVE_FORMAT_EXTENSIBLE: the real format code leads the subformat GUID
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise WavFormatError("no fmt chunk", {"path": p})
    if pcm is None:
        raise WavFormatError("no data chunk", {"path": p})

    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != PCM_FORMAT or bits != 16:
        raise WavFormatError(
            f"unsupported encoding (format {audio_format}, {bits} bits); need 16-bit PCM",
            {"path": p},
        )
    if channels != 1:
        raise WavFormatError(f"need mono audio, got {channels} channels", {"path": p})
    usable = len(pcm) - (len(pcm) % 2)
    samples = np.frombuffer(pcm[:usable], dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def load_wav(
    path: Union[str, Path], sample_rate_hz: int = 16000, clip_seconds: float = 1.0
) -> AudioClip:
    """Read a clip and zero-pad or truncate it to clip_seconds.

    There is no resampling: a sample-rate mismatch is rejected.
    """
    samples, rate = read_wav(path)
    if rate != sample_rate_hz:
        raise WavFormatError(
            f"sample rate {rate} Hz does not match expected {sample_rate_hz} Hz",
            {"path": str(path), "sample_rate": rate},
        )
    if samples.size == 0:
        raise WavFormatError("data chunk is empty", {"path": str(path)})
    length = int(round(clip_seconds * sample_rate_hz))
    if samples.shape[0] != length:
        logging.debug("fitting %s from %d to %d samples", path, samples.shape[0], length)
    return AudioClip(fit_length(samples, length), sample_rate_hz)


def wav_bytes(samples: np.ndarray, sample_rate_hz: int = 16000) -> bytes:
    """Encode samples in [-1, 1] as a canonical 16-bit PCM mono WAV file."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", PCM_FORMAT, 1, sample_rate_hz, sample_rate_hz * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    if len(pcm) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path: Union[str, Path], clip: AudioClip) -> None:
    from .container import write_atomic

    write_atomic(path, wav_bytes(clip.samples, clip.sample_rate_hz))


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters, (num_mel_filters, fft_size // 2 + 1).

    Triangles are evaluated at the exact bin frequencies, so every weight is
    zero outside (mel_low_hz, mel_high_hz).
    """
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.num_mel_filters + 2)
    )
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate_hz / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(samples: np.ndarray, window: int, shift: int) -> np.ndarray:
    n = 1 + (samples.shape[0] - window) // shift
    idx = np.arange(window)[None, :] + shift * np.arange(n)[:, None]
    return samples[idx]


def compute_mfcc(clip: AudioClip, cfg: MfccConfig = MfccConfig()) -> FeatureMap:
    """T x 1 x num_coeffs MFCC features, T = 1 + (L - W) // S."""
    if clip.sample_rate_hz != cfg.sample_rate_hz:
        raise DataError(
            f"clip sample rate {clip.sample_rate_hz} Hz != configured {cfg.sample_rate_hz} Hz"
        )
    x = clip.samples
    if x.shape[0] < cfg.window_samples:
        raise DataError(
            f"clip has {x.shape[0]} samples, shorter than one {cfg.window_samples}-sample window"
        )
    emphasized = np.append(x[0], x[1:] - PRE_EMPHASIS * x[:-1])
    frames = frame_signal(emphasized, cfg.window_samples, cfg.shift_samples)
    frames = frames * np.hanning(cfg.window_samples)
    power = np.abs(np.fft.rfft(frames, cfg.fft_size)) ** 2 / cfg.fft_size
    mel = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, LOG_FLOOR))
    coeffs = dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.num_coeffs]
    return FeatureMap(coeffs.astype(np.float32))
