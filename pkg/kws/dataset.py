"""Speech-commands style corpus handling and the synthetic toy corpus.

On-disk layout: ``ROOT/<word>/<clip>.wav`` plus ``ROOT/_background_noise_/``
holding long noise recordings. The ten target words map to classes 0-9,
every other word to "unknown" (10), generated silence to "silence" (11).

Splits are decided by hashing the file name with the ``_nohash_`` suffix
removed, so all clips of one speaker land in the same split.
"""

import csv
import hashlib
import io
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import chirp, correlate, lfilter

from .errors import DataError
from .frontend import AudioClip, fit_length, load_wav, read_wav, write_wav

TARGET_WORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
UNKNOWN_INDEX = 10
SILENCE_INDEX = 11
SILENCE_LABEL = "_silence_"
UNKNOWN_LABEL = "_unknown_"
BACKGROUND_NOISE_DIR = "_background_noise_"
CLASS_NAMES = TARGET_WORDS + (UNKNOWN_LABEL, SILENCE_LABEL)
SPLITS = ("train", "validation", "test")

# Bucket = (last 8 hex digits of SHA-1 as an integer) mod HASH_PRIME, scaled
# to [0, 100). HASH_PRIME is the Mersenne prime 2**31 - 1.
HASH_PRIME = 2_147_483_647
_NOHASH_RE = re.compile(r"_nohash_.*$")


@dataclass(frozen=True)
class SplitConfig:
    train_pct: float = 80.0
    val_pct: float = 10.0
    test_pct: float = 10.0

    def __post_init__(self):
        if min(self.train_pct, self.val_pct, self.test_pct) < 0:
            raise ValueError("split percentages must be non-negative")
        if abs(self.train_pct + self.val_pct + self.test_pct - 100.0) > 1e-9:
            raise ValueError("split percentages must sum to 100")


@dataclass(frozen=True)
class CorpusConfig:
    train_pct: float = 80.0
    val_pct: float = 10.0
    test_pct: float = 10.0
    unknown_pct: float = 10.0
    silence_pct: float = 10.0
    silence_max_gain: float = 0.1
    seed: int = 59185

    def __post_init__(self):
        self.split  # validates percentages
        if self.unknown_pct < 0 or self.silence_pct < 0:
            raise ValueError("unknown_pct and silence_pct must be non-negative")

    @property
    def split(self) -> SplitConfig:
        return SplitConfig(self.train_pct, self.val_pct, self.test_pct)


@dataclass(frozen=True)
class LabeledClip:
    path: str
    word: str
    split: str
    label: int
    noise_seed: Optional[int] = None

    @property
    def is_silence(self) -> bool:
        return self.label == SILENCE_INDEX


def label_index(word: str) -> int:
    if word in TARGET_WORDS:
        return TARGET_WORDS.index(word)
    if word == SILENCE_LABEL:
        return SILENCE_INDEX
    return UNKNOWN_INDEX


def split_bucket(filename: str) -> float:
    """Percentage bucket in [0, 100) for a clip file name."""
    base = _NOHASH_RE.sub("", Path(filename).name)
    digest = hashlib.sha1(base.encode("utf-8")).hexdigest()
    return (int(digest[-8:], 16) % HASH_PRIME) * (100.0 / HASH_PRIME)


def assign_split(filename: str, cfg: SplitConfig = SplitConfig()) -> str:
    bucket = split_bucket(filename)
    if bucket < cfg.train_pct:
        return "train"
    if bucket < cfg.train_pct + cfg.val_pct:
        return "validation"
    return "test"


@dataclass
class Corpus:
    """Labeled items plus the noise bank; audio is read lazily.

    ``clips`` holds in-memory audio keyed by item path (the toy corpus);
    other items are read from ``root``.
    """

    items: List[LabeledClip]
    noise_bank: List[np.ndarray]
    root: Optional[Path] = None
    sample_rate_hz: int = 16000
    silence_max_gain: float = 0.1
    clips: Dict[str, np.ndarray] = field(default_factory=dict)

    def split(self, name: str) -> List[LabeledClip]:
        return [it for it in self.items if it.split == name]

    def load(self, item: LabeledClip) -> AudioClip:
        length = self.sample_rate_hz
        if item.path in self.clips:
            return AudioClip(self.clips[item.path], self.sample_rate_hz)
        if item.is_silence:
            return AudioClip(
                silence_clip(self.noise_bank, np.random.default_rng(item.noise_seed), length, self.silence_max_gain),
                self.sample_rate_hz,
            )
        if self.root is None:
            raise DataError(f"no audio for {item.path}", {"path": item.path})
        return load_wav(self.root / item.path, self.sample_rate_hz)

    def class_counts(self, split: Optional[str] = None) -> List[int]:
        counts = [0] * len(CLASS_NAMES)
        for it in self.items:
            if split is None or it.split == split:
                counts[it.label] += 1
        return counts


def noise_segment(bank: Sequence[np.ndarray], rng: np.random.Generator, length: int) -> np.ndarray:
    """A random length-sample crop of a random noise recording."""
    noise = bank[int(rng.integers(len(bank)))]
    if noise.shape[0] <= length:
        return fit_length(noise, length)
    offset = int(rng.integers(0, noise.shape[0] - length + 1))
    return noise[offset : offset + length].astype(np.float64)


def silence_clip(
    bank: Sequence[np.ndarray], rng: np.random.Generator, length: int, max_gain: float = 0.1
) -> np.ndarray:
    if not bank:
        return np.zeros(length)
    segment = noise_segment(bank, rng, length)
    return segment * rng.uniform(0.0, max_gain)


def scan_corpus(root: Union[str, Path], cfg: CorpusConfig = CorpusConfig(), sample_rate_hz: int = 16000) -> Corpus:
    """Index ROOT/<word>/*.wav, sample unknown items and add silence items.

    Per split, unknown items number ceil(targets * unknown_pct / 100) drawn
    without replacement from the non-target words, and silence items
    ceil(targets * silence_pct / 100), each a noise-bank crop scaled by
    U(0, silence_max_gain) drawn from its own seed.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root not found: {root}", {"root": str(root)})

    rng = np.random.default_rng(cfg.seed)
    targets: Dict[str, List[LabeledClip]] = {s: [] for s in SPLITS}
    unknown: Dict[str, List[LabeledClip]] = {s: [] for s in SPLITS}
    noise_bank: List[np.ndarray] = []
    split_cfg = cfg.split

    for word_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = sorted(word_dir.glob("*.wav"))
        if word_dir.name == BACKGROUND_NOISE_DIR:
            for w in wavs:
                samples, rate = read_wav(w)
                if rate != sample_rate_hz:
                    logging.warning("skipping noise file %s: %d Hz", w, rate)
                    continue
                noise_bank.append(samples)
            continue
        for w in wavs:
            rel = f"{word_dir.name}/{w.name}"
            split = assign_split(w.name, split_cfg)
            item = LabeledClip(rel, word_dir.name, split, label_index(word_dir.name))
            (targets if item.label < UNKNOWN_INDEX else unknown)[split].append(item)

    n_targets = sum(len(v) for v in targets.values())
    n_unknown = sum(len(v) for v in unknown.values())
    if n_targets + n_unknown == 0:
        raise DataError(f"no clips found under {root}", {"root": str(root)})
    if n_unknown == 0:
        logging.warning("corpus %s has no non-target words; unknown class will be empty", root)
    if not noise_bank:
        logging.warning("no %s directory under %s; silence clips will be all zeros", BACKGROUND_NOISE_DIR, root)

    items: List[LabeledClip] = []
    for split in SPLITS:
        base = targets[split]
        items.extend(base)
        pool = unknown[split]
        n_unk = min(len(pool), math.ceil(len(base) * cfg.unknown_pct / 100.0))
        if n_unk:
            picks = rng.choice(len(pool), size=n_unk, replace=False)
            items.extend(pool[int(i)] for i in sorted(picks))
        n_sil = math.ceil(len(base) * cfg.silence_pct / 100.0)
        for j in range(n_sil):
            items.append(
                LabeledClip(
                    f"{SILENCE_LABEL}/{split}_{j:05d}.wav",
                    SILENCE_LABEL,
                    split,
                    SILENCE_INDEX,
                    noise_seed=int(rng.integers(0, 2**31 - 1)),
                )
            )

    corpus = Corpus(items, noise_bank, root=root, sample_rate_hz=sample_rate_hz, silence_max_gain=cfg.silence_max_gain)
    for split in SPLITS:
        logging.info("corpus %s: %s class counts %s", root, split, corpus.class_counts(split))
    return corpus


def manifest_csv(items: Sequence[LabeledClip]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label", "split"])
    for it in items:
        writer.writerow([it.path, it.label, it.split])
    return buf.getvalue()


def write_manifest(items: Sequence[LabeledClip], path: Union[str, Path]) -> None:
    from .container import write_atomic

    write_atomic(path, manifest_csv(items).encode("utf-8"))


# ---------------------------------------------------------------------------
# toy corpus

TOY_UNKNOWN_WORDS = ("bed", "bird", "cat", "dog")
TOY_TEMPLATE_SECONDS = 0.5


def toy_template(index: int, sample_rate_hz: int = 16000) -> np.ndarray:
    """Clean half-second multi-tone chirp for template index.

    Indices 0-9 are the keyword classes (rising sweeps on a 300 Hz grid);
    10 and up are the held-out unknown templates (falling sweeps placed
    between the keyword bands).
    """
    n = int(TOY_TEMPLATE_SECONDS * sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    if index < len(TARGET_WORDS):
        f0 = 350.0 + 300.0 * index
        f1 = 1.2 * f0
    else:
        j = index - len(TARGET_WORDS)
        f1 = 500.0 + 600.0 * j
        f0 = 1.25 * f1
    tone = chirp(t, f0=f0, t1=t[-1], f1=f1) + 0.5 * chirp(t, f0=2.0 * f1, t1=t[-1], f1=2.0 * f0)
    return tone * np.hanning(n) / 1.5


def template_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Maximum normalized cross-correlation over all lags."""
    xc = correlate(a, b, mode="full", method="fft")
    return float(np.max(np.abs(xc)) / (np.linalg.norm(a) * np.linalg.norm(b)))


def toy_noise_bank(rng: np.random.Generator, sample_rate_hz: int = 16000, seconds: float = 5.0) -> List[np.ndarray]:
    n = int(seconds * sample_rate_hz)
    white = rng.normal(0.0, 0.3, n)
    brown = lfilter([1.0], [1.0, -0.98], rng.normal(0.0, 0.05, n))
    return [np.clip(white, -1, 1), np.clip(brown / max(1e-9, np.abs(brown).max()), -1, 1)]


def make_toy_corpus(seed: int = 0, items_per_class: int = 40, sample_rate_hz: int = 16000) -> Corpus:
    """Twelve-class synthetic corpus held in memory.

    Keyword clips are a class template at a random onset and gain over
    low-level noise, unknown clips use one of the held-out templates,
    silence clips are noise only. Items i % 10 == 8 go to validation,
    i % 10 == 9 to test, the rest to train.
    """
    if items_per_class < 10:
        raise DataError("make_toy_corpus needs items_per_class >= 10")
    rng = np.random.default_rng(seed)
    length = sample_rate_hz
    bank = toy_noise_bank(rng, sample_rate_hz)
    templates = [toy_template(k, sample_rate_hz) for k in range(len(TARGET_WORDS) + len(TOY_UNKNOWN_WORDS))]
    words = list(TARGET_WORDS) + [UNKNOWN_LABEL, SILENCE_LABEL]

    items: List[LabeledClip] = []
    clips: Dict[str, np.ndarray] = {}
    for label, word in enumerate(words):
        for i in range(items_per_class):
            split = "validation" if i % 10 == 8 else "test" if i % 10 == 9 else "train"
            noise = noise_segment(bank, rng, length) * rng.uniform(0.0, 0.05)
            if label == SILENCE_INDEX:
                audio = noise_segment(bank, rng, length) * rng.uniform(0.01, 0.1)
                dir_name = word
            else:
                if label == UNKNOWN_INDEX:
                    k = int(rng.integers(len(TOY_UNKNOWN_WORDS)))
                    dir_name = TOY_UNKNOWN_WORDS[k]
                    tpl = templates[len(TARGET_WORDS) + k]
                else:
                    dir_name = word
                    tpl = templates[label]
                onset = int(rng.uniform(0.05, 0.45) * sample_rate_hz)
                audio = noise
                audio[onset : onset + tpl.shape[0]] += rng.uniform(0.3, 0.6) * tpl
            digest = hashlib.sha1(f"{seed}-{word}-{i}".encode("utf-8")).hexdigest()[:8]
            path = f"{dir_name}/{digest}_nohash_{i}.wav"
            clips[path] = np.clip(audio, -1.0, 1.0)
            items.append(LabeledClip(path, dir_name, split, label))
    return Corpus(items, bank, sample_rate_hz=sample_rate_hz, clips=clips)


def write_corpus(corpus: Corpus, root: Union[str, Path]) -> int:
    """Write an in-memory corpus in the on-disk layout; returns files written.

    Silence items are not written: scanning regenerates them from the noise
    bank.
    """
    root = Path(root)
    count = 0
    for item in corpus.items:
        if item.is_silence:
            continue
        target = root / item.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_wav(target, corpus.load(item))
        count += 1
    noise_dir = root / BACKGROUND_NOISE_DIR
    noise_dir.mkdir(parents=True, exist_ok=True)
    for j, noise in enumerate(corpus.noise_bank):
        write_wav(noise_dir / f"noise_{j:02d}.wav", AudioClip(noise, corpus.sample_rate_hz))
        count += 1
    return count
