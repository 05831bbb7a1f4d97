"""WAV reading/writing and MFCC extraction."""

import struct
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
import scipy.fft
from scipy import signal
from scipy.io import wavfile

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from kws.errors import DataError, WavFormatError
from kws.frontend import (
    AudioClip,
    MfccConfig,
    compute_mfcc,
    load_wav,
    mel_filterbank,
    read_wav,
    wav_bytes,
    write_wav,
)


def _chunk(cid: bytes, body: bytes) -> bytes:
    pad = b"\x00" if len(body) & 1 else b""
    return cid + struct.pack("<I", len(body)) + body + pad


def _riff(*chunks: bytes) -> bytes:
    body = b"WAVE" + b"".join(chunks)
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _fmt(fmt=1, channels=1, rate=16000, bits=16):
    block = channels * bits // 8
    return _chunk(b"fmt ", struct.pack("<HHIIHH", fmt, channels, rate, rate * block, block, bits))


def test_load_wav_full_and_short_clips(tmp_path):
    rng = np.random.default_rng(0)
    full = rng.uniform(-0.5, 0.5, 16000)
    p = tmp_path / "full.wav"
    write_wav(p, AudioClip(full))
    clip = load_wav(p)
    assert len(clip) == 16000
    np.testing.assert_allclose(clip.samples, full, atol=1.0 / 32767)

    p = tmp_path / "short.wav"
    p.write_bytes(wav_bytes(rng.uniform(-0.5, 0.5, 8000)))
    clip = load_wav(p)
    assert len(clip) == 16000
    assert np.all(clip.samples[8000:] == 0.0)

    p = tmp_path / "long.wav"
    p.write_bytes(wav_bytes(rng.uniform(-0.5, 0.5, 20000)))
    assert len(load_wav(p)) == 16000


def test_chunk_walk_matches_reference_reader(tmp_path):
    pcm = np.arange(-500, 500, dtype="<i2")
    data = _riff(_chunk(b"LIST", b"INFOISFT\x05\x00\x00\x00kws!\x00\x00"), _fmt(), _chunk(b"data", pcm.tobytes()))
    p = tmp_path / "odd_order.wav"
    p.write_bytes(data)
    samples, rate = read_wav(p)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref_rate, ref = wavfile.read(p)
    assert rate == ref_rate == 16000
    np.testing.assert_array_equal(samples, ref.astype(np.float64) / 32768.0)


def test_rejects_unsupported_files(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFX" + b"\x00" * 40)
    with pytest.raises(WavFormatError):
        load_wav(bad)

    eight_bit = tmp_path / "u8.wav"
    eight_bit.write_bytes(_riff(_fmt(bits=8), _chunk(b"data", b"\x80" * 100)))
    with pytest.raises(WavFormatError):
        load_wav(eight_bit)

    stereo = tmp_path / "stereo.wav"
    stereo.write_bytes(_riff(_fmt(channels=2), _chunk(b"data", b"\x00" * 400)))
    with pytest.raises(WavFormatError):
        load_wav(stereo)

    rate = tmp_path / "8k.wav"
    rate.write_bytes(wav_bytes(np.zeros(8000), 8000))
    with pytest.raises(WavFormatError):
        load_wav(rate)


def test_mfcc_shape_for_one_second():
    clip = AudioClip(np.random.default_rng(1).uniform(-0.1, 0.1, 16000))
    feats = compute_mfcc(clip)
    assert feats.shape == (98, 1, 40)
    assert MfccConfig().num_frames(16000) == 98


def test_zero_clip_gives_identical_frames():
    feats = compute_mfcc(AudioClip(np.zeros(16000))).matrix()
    assert np.max(np.abs(feats - feats[0])) == 0.0


def reference_mfcc(x: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Straight-line MFCC in float64 from scipy.signal and explicit loops."""
    x = signal.lfilter([1.0, -0.97], [1.0], x)
    w, s = cfg.window_samples, cfg.shift_samples
    frames = np.lib.stride_tricks.sliding_window_view(x, w)[::s]
    frames = frames * signal.get_window("hann", w, fftbins=False)
    power = np.abs(scipy.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2 / cfg.fft_size

    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    lo, hi = mel(cfg.mel_low_hz), mel(cfg.mel_high_hz)
    edges = [inv(lo + (hi - lo) * i / (cfg.num_mel_filters + 1)) for i in range(cfg.num_mel_filters + 2)]
    bins = power.shape[1]
    fb = np.zeros((cfg.num_mel_filters, bins))
    for m in range(cfg.num_mel_filters):
        a, b, c = edges[m], edges[m + 1], edges[m + 2]
        for k in range(bins):
            f = k * cfg.sample_rate_hz / cfg.fft_size
            if a < f <= b:
                fb[m, k] = (f - a) / (b - a)
            elif b < f < c:
                fb[m, k] = (c - f) / (c - b)
    logmel = np.log(np.maximum(power @ fb.T, 1e-10))

    n = cfg.num_mel_filters
    basis = np.array([[np.cos(np.pi * k * (2 * i + 1) / (2 * n)) for i in range(n)] for k in range(cfg.num_coeffs)])
    basis[0] *= np.sqrt(1.0 / n)
    basis[1:] *= np.sqrt(2.0 / n)
    return logmel @ basis.T


def test_mfcc_matches_reference_pipeline():
    cfg = MfccConfig()
    x = np.random.default_rng(3).uniform(-0.3, 0.3, 16000)
    ours = compute_mfcc(AudioClip(x)).matrix().astype(np.float64)
    ref = reference_mfcc(x, cfg)
    assert ours.shape == ref.shape == (98, 40)
    np.testing.assert_allclose(ours, ref, rtol=1e-4, atol=1e-3)


def test_sine_features_are_stationary():
    t = np.arange(16000) / 16000.0
    x = 0.5 * np.sin(2 * np.pi * 440.0 * t)
    feats = compute_mfcc(AudioClip(x)).matrix().astype(np.float64)
    ref = reference_mfcc(x, MfccConfig())
    np.testing.assert_allclose(feats, ref, rtol=1e-4, atol=1e-3)

    interior = feats[2:-2]
    mean = interior.mean(axis=0)
    spread = np.linalg.norm(interior - mean, axis=1) / np.linalg.norm(mean)
    assert spread.max() < 0.05

    # envelope coefficients; higher ones of a pure tone sit near zero
    env = slice(0, 10)
    assert np.all(interior.std(axis=0)[env] < 0.05 * np.abs(mean[env]))


def test_mfcc_is_deterministic_and_energy_monotone():
    x = np.random.default_rng(2).uniform(-0.05, 0.05, 16000)
    a = compute_mfcc(AudioClip(x)).matrix()
    b = compute_mfcc(AudioClip(x.copy())).matrix()
    assert a.tobytes() == b.tobytes()
    louder = compute_mfcc(AudioClip(10.0 * x)).matrix()
    assert np.all(louder[:, 0] > a[:, 0])


def test_mel_filterbank_respects_band():
    cfg = MfccConfig()
    fb = mel_filterbank(cfg)
    assert fb.shape == (40, cfg.fft_size // 2 + 1)
    assert np.all(fb.sum(axis=1) > 0)
    freqs = np.arange(fb.shape[1]) * cfg.sample_rate_hz / cfg.fft_size
    outside = (freqs <= cfg.mel_low_hz) | (freqs >= cfg.mel_high_hz)
    assert np.all(fb[:, outside] == 0.0)


def test_short_clip_and_bad_config_rejected():
    with pytest.raises(DataError):
        compute_mfcc(AudioClip(np.zeros(100)))
    with pytest.raises(ValueError):
        MfccConfig(window_ms=10.0, shift_ms=10.0)
    with pytest.raises(ValueError):
        MfccConfig(mel_high_hz=9000.0)
    with pytest.raises(DataError):
        AudioClip(np.array([]))
