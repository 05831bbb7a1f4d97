"""Corpus indexing, split assignment and the synthetic toy corpus."""

import logging
import math
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from kws.dataset import (
    CLASS_NAMES,
    SILENCE_INDEX,
    SPLITS,
    TARGET_WORDS,
    TOY_UNKNOWN_WORDS,
    UNKNOWN_INDEX,
    CorpusConfig,
    SplitConfig,
    assign_split,
    label_index,
    make_toy_corpus,
    scan_corpus,
    split_bucket,
    template_similarity,
    toy_template,
    write_corpus,
    write_manifest,
)
from kws.errors import DataError
from kws.frontend import AudioClip, write_wav


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_corpus(make_toy_corpus(seed=3, items_per_class=20), root)
    return root


# ---------------------------------------------------------------------------
# labels and splits


def test_label_index():
    assert label_index("yes") == 0
    assert label_index("go") == 9
    assert label_index("seven") == UNKNOWN_INDEX
    assert label_index("_silence_") == SILENCE_INDEX
    assert len(CLASS_NAMES) == 12


def test_split_ignores_nohash_suffix():
    a = assign_split("3e1d9c4a_nohash_0.wav")
    assert all(assign_split(f"3e1d9c4a_nohash_{i}.wav") == a for i in range(1, 6))
    assert split_bucket("up/3e1d9c4a_nohash_2.wav") == split_bucket("3e1d9c4a_nohash_0.wav")
    assert 0.0 <= split_bucket("anything.wav") < 100.0


def test_split_fractions():
    rng = np.random.default_rng(0)
    names = [f"{rng.integers(0, 2**32):08x}_nohash_0.wav" for _ in range(10_000)]
    counts = {s: 0 for s in SPLITS}
    for name in names:
        counts[assign_split(name)] += 1
    assert abs(counts["train"] / 10_000 - 0.8) <= 0.02
    assert abs(counts["validation"] / 10_000 - 0.1) <= 0.02
    assert abs(counts["test"] / 10_000 - 0.1) <= 0.02


def test_split_config_validation():
    assert assign_split("x.wav", SplitConfig(100.0, 0.0, 0.0)) == "train"
    assert assign_split("x.wav", SplitConfig(0.0, 0.0, 100.0)) == "test"
    with pytest.raises(ValueError):
        SplitConfig(80.0, 10.0, 20.0)
    with pytest.raises(ValueError):
        CorpusConfig(unknown_pct=-1.0)


# ---------------------------------------------------------------------------
# toy corpus


def test_toy_corpus_is_deterministic():
    a = make_toy_corpus(seed=5, items_per_class=10)
    b = make_toy_corpus(seed=5, items_per_class=10)
    assert a.items == b.items
    assert all(a.clips[k].tobytes() == b.clips[k].tobytes() for k in a.clips)
    c = make_toy_corpus(seed=6, items_per_class=10)
    assert a.items != c.items


def test_toy_corpus_layout():
    toy = make_toy_corpus(seed=0, items_per_class=10)
    assert len(toy.items) == 120
    for split, n in (("train", 8), ("validation", 1), ("test", 1)):
        assert toy.class_counts(split) == [n] * 12
    for item in toy.items:
        clip = toy.load(item)
        assert len(clip) == 16000
        assert np.all(np.abs(clip.samples) <= 1.0)
        assert "_nohash_" in item.path
    unknown_dirs = {it.word for it in toy.items if it.label == UNKNOWN_INDEX}
    assert unknown_dirs <= set(TOY_UNKNOWN_WORDS)
    with pytest.raises(DataError):
        make_toy_corpus(items_per_class=9)


def test_toy_templates_are_distinct():
    templates = [toy_template(k) for k in range(len(TARGET_WORDS) + len(TOY_UNKNOWN_WORDS))]
    for i in range(len(templates)):
        assert template_similarity(templates[i], templates[i]) == pytest.approx(1.0)
        for j in range(i + 1, len(templates)):
            assert template_similarity(templates[i], templates[j]) < 0.9, (i, j)


# ---------------------------------------------------------------------------
# scanning a corpus on disk


def test_scan_written_toy_corpus(toy_dir):
    corpus = scan_corpus(toy_dir)
    assert len(corpus.noise_bank) == 2
    paths = [it.path for it in corpus.items]
    assert len(paths) == len(set(paths))
    for it in corpus.items:
        if it.word in TOY_UNKNOWN_WORDS:
            assert it.label == UNKNOWN_INDEX
        if not it.is_silence:
            assert it.split == assign_split(it.path)
    for split in SPLITS:
        counts = corpus.class_counts(split)
        targets = sum(counts[:UNKNOWN_INDEX])
        assert counts[SILENCE_INDEX] == math.ceil(targets * 0.1)
        assert counts[UNKNOWN_INDEX] <= math.ceil(targets * 0.1)


def test_scan_is_deterministic(toy_dir):
    a = scan_corpus(toy_dir)
    b = scan_corpus(toy_dir)
    assert a.items == b.items
    silence = [it for it in a.items if it.is_silence][0]
    x, y = a.load(silence), b.load(silence)
    assert x.samples.tobytes() == y.samples.tobytes()
    assert len(x) == 16000
    assert np.max(np.abs(x.samples)) <= 0.1 + 1e-9


def test_unknown_and_silence_are_fixed_per_seed(toy_dir):
    a = scan_corpus(toy_dir, CorpusConfig(seed=1))
    b = scan_corpus(toy_dir, CorpusConfig(seed=2))
    again = scan_corpus(toy_dir, CorpusConfig(seed=1))
    assert [it.path for it in a.items if it.label == UNKNOWN_INDEX] == [it.path for it in again.items if it.label == UNKNOWN_INDEX]

    silence_a = [it for it in a.items if it.is_silence][0]
    silence_b = [it for it in b.items if it.is_silence][0]
    first = a.load(silence_a).samples.copy()
    assert a.load(silence_a).samples.tobytes() == first.tobytes()
    assert b.load(silence_b).samples.tobytes() != first.tobytes()


def test_scan_without_unknown_words_or_noise_warns(tmp_path, caplog):
    for word in ("yes", "no"):
        (tmp_path / word).mkdir()
        for i in range(3):
            write_wav(tmp_path / word / f"{word}{i:04d}_nohash_0.wav", AudioClip(np.zeros(16000)))
    with caplog.at_level(logging.WARNING):
        corpus = scan_corpus(tmp_path)
    assert "no non-target words" in caplog.text
    assert "_background_noise_" in caplog.text
    assert corpus.class_counts()[UNKNOWN_INDEX] == 0
    silence = [it for it in corpus.items if it.is_silence]
    assert silence and np.all(corpus.load(silence[0]).samples == 0.0)


def test_scan_rejects_missing_or_empty_root(tmp_path):
    with pytest.raises(DataError):
        scan_corpus(tmp_path / "nope")
    with pytest.raises(DataError):
        scan_corpus(tmp_path)


def test_write_manifest(tmp_path):
    toy = make_toy_corpus(seed=0, items_per_class=10)
    out = tmp_path / "manifest.csv"
    write_manifest(toy.items, out)
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "path,label,split"
    assert len(lines) == 121
    assert not (tmp_path / "manifest.csv.tmp").exists()
