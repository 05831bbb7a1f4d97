"""Training and evaluation of TENet models.

Gradients come from the hand-written reverse pass in ``model.Network``.
Optimisation is Adam with decoupled weight decay on conv and dense weights
and a step-decay learning rate. Batch assembly (augmentation + MFCC) may
run on a thread pool; every item gets its own seed drawn from the training
RNG, so batches are identical for any worker count.
"""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset import CLASS_NAMES, UNKNOWN_INDEX, Corpus, LabeledClip, noise_segment
from .errors import DataError, NonFiniteError
from .frontend import AudioClip, MfccConfig, compute_mfcc
from .model import BN_MOMENTUM, Model, Network, forward_batch, update_running_stats
from .tensor import cross_entropy, softmax

GradientSet = Dict[str, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 10000
    total_iterations: int = 30000
    weight_decay: float = 4e-5
    batch_size: int = 100
    noise_prob: float = 0.8
    noise_max: float = 0.1
    time_shift_ms: float = 100.0
    eval_every: int = 500
    bn_momentum: float = BN_MOMENTUM
    augment: bool = True
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "decay_factor", "decay_every", "total_iterations", "batch_size", "eval_every", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.noise_max < 0 or self.time_shift_ms < 0:
            raise ValueError("weight_decay, noise_max and time_shift_ms must be non-negative")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ValueError("noise_prob must lie in [0, 1]")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in [0, 1)")


# ---------------------------------------------------------------------------
# gradients and optimiser


def backward(
    model: Model,
    inputs: np.ndarray,
    labels: Sequence[int],
    update_stats: bool = False,
    momentum: float = BN_MOMENTUM,
) -> Tuple[float, GradientSet]:
    """Mean cross-entropy of a train-mode forward pass and its gradients.

    Gradients cover every trainable array (running statistics excluded).
    With update_stats the batch statistics are folded into the running
    statistics after the pass.
    """
    loss, grads, _ = _train_pass(model, inputs, labels, update_stats, momentum)
    return loss, grads


def _train_pass(
    model: Model, inputs: np.ndarray, labels: Sequence[int], update_stats: bool, momentum: float
) -> Tuple[float, GradientSet, np.ndarray]:
    x = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise DataError(f"need a non-empty (N, T, C) batch, got shape {x.shape}")
    if labels.shape != (x.shape[0],):
        raise DataError("labels must have one entry per batch item")
    if labels.min() < 0 or labels.max() >= model.spec.num_classes:
        raise DataError(f"labels must lie in [0, {model.spec.num_classes})")

    net = Network(model.spec)
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    logits = net.forward(model.params, x, train=True, stats=stats)
    loss, grad_logits = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NonFiniteError("loss is not finite", {"loss": loss})
    grads = net.backward(model.params, grad_logits.astype(logits.dtype))
    if update_stats:
        update_running_stats(model.params, stats, momentum)
    return loss, {name: grads[name] for name in model.trainable_names()}, logits


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.learning_rate * cfg.decay_factor ** (iteration // cfg.decay_every)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: GradientSet,
    state: AdamState,
    iteration: int,
    cfg: TrainConfig,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One Adam update in place; weight decay p -= lr * wd * p hits ``.w`` arrays only."""
    lr = lr_at(iteration, cfg)
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, g in grads.items():
        p = params[name]
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        value = p.astype(np.float64)
        if name.endswith(".w") and cfg.weight_decay:
            value = value - lr * cfg.weight_decay * value
        p[...] = value - update
    return params, state


# ---------------------------------------------------------------------------
# augmentation and features


def shift_clip(samples: np.ndarray, shift: int) -> np.ndarray:
    """Delay (shift > 0) or advance the signal, zero-filling vacated samples."""
    out = np.zeros_like(samples)
    n = samples.shape[0]
    if shift >= n or -shift >= n:
        return out
    if shift > 0:
        out[shift:] = samples[: n - shift]
    elif shift < 0:
        out[: n + shift] = samples[-shift:]
    else:
        out[:] = samples
    return out


def augment(
    clip: AudioClip, noise_bank: Sequence[np.ndarray], rng: np.random.Generator, cfg: TrainConfig
) -> AudioClip:
    """Random time shift, then background noise with probability noise_prob.

    Length and label never change. With an empty noise bank only the shift
    is applied.
    """
    rate = clip.sample_rate_hz
    shift_ms = rng.uniform(-cfg.time_shift_ms, cfg.time_shift_ms) if cfg.time_shift_ms else 0.0
    out = shift_clip(clip.samples, int(round(shift_ms * rate / 1000.0)))
    if noise_bank and cfg.noise_prob > 0 and rng.uniform() < cfg.noise_prob:
        coeff = rng.uniform(0.0, cfg.noise_max)
        out = out + coeff * noise_segment(noise_bank, rng, out.shape[0])
    return AudioClip(np.clip(out, -1.0, 1.0), rate)


class FeaturePipeline:
    """MFCC features for corpus items; clean features are cached."""

    def __init__(self, corpus: Corpus, mfcc_cfg: MfccConfig = MfccConfig(), workers: int = 1):
        self.corpus = corpus
        self.mfcc_cfg = mfcc_cfg
        self.workers = workers
        self._cache: Dict[str, np.ndarray] = {}

    def clean(self, item: LabeledClip) -> np.ndarray:
        feats = self._cache.get(item.path)
        if feats is None:
            feats = compute_mfcc(self.corpus.load(item), self.mfcc_cfg).matrix()
            self._cache[item.path] = feats
        return feats

    def augmented(self, item: LabeledClip, seed: int, cfg: TrainConfig) -> np.ndarray:
        rng = np.random.default_rng(seed)
        clip = augment(self.corpus.load(item), self.corpus.noise_bank, rng, cfg)
        return compute_mfcc(clip, self.mfcc_cfg).matrix()

    def _map(self, fn, args) -> List[np.ndarray]:
        if self.workers <= 1 or len(args) < 2:
            return [fn(*a) for a in args]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda a: fn(*a), args))

    def batch(
        self,
        items: Sequence[LabeledClip],
        seeds: Optional[Sequence[int]] = None,
        cfg: Optional[TrainConfig] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """(features (N, T, C) float32, labels (N,)); augmented when seeds are given."""
        if seeds is None:
            feats = self._map(self.clean, [(it,) for it in items])
        else:
            feats = self._map(self.augmented, [(it, int(s), cfg) for it, s in zip(items, seeds)])
        labels = np.array([it.label for it in items], dtype=np.int64)
        return np.stack(feats).astype(np.float32), labels


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ScoreRow:
    path: str
    label: int
    scores: Tuple[float, ...]


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray
    scores: List[ScoreRow]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def evaluate(
    model: Model,
    corpus: Corpus,
    split: str,
    pipeline: Optional[FeaturePipeline] = None,
    batch_size: int = 100,
) -> Evaluation:
    """Accuracy, confusion matrix (rows = true class) and per-item softmax scores."""
    items = corpus.split(split)
    if not items:
        raise DataError(f"split '{split}' is empty", {"split": split})
    pipeline = pipeline or FeaturePipeline(corpus)
    n_classes = model.spec.num_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    rows: List[ScoreRow] = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        x, labels = pipeline.batch(chunk)
        probs = softmax(forward_batch(model, x, "infer").astype(np.float64))
        for it, label, p in zip(chunk, labels, probs):
            confusion[label, int(np.argmax(p))] += 1
            rows.append(ScoreRow(it.path, int(label), tuple(float(s) for s in p)))
    accuracy = float(np.trace(confusion) / confusion.sum())
    return Evaluation(accuracy, confusion, rows)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class MetricRow:
    iteration: int
    lr: float
    loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: Model
    metrics: List[MetricRow]
    losses: List[float]
    best_iteration: int
    best_accuracy: float


class _Sampler:
    """Epoch-wise shuffled batches drawn from the training RNG."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while self._order.shape[0] < k:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        picked, self._order = self._order[:k], self._order[k:]
        return picked


def train(
    model: Model,
    corpus: Corpus,
    cfg: TrainConfig = TrainConfig(),
    mfcc_cfg: MfccConfig = MfccConfig(),
) -> TrainResult:
    """Train model in place; returns a copy of the best-validation checkpoint.

    Validation runs every eval_every iterations and after the last one.
    A non-finite loss aborts with NonFiniteError naming the iteration.
    """
    train_items = corpus.split("train")
    val_items = corpus.split("validation")
    if not train_items:
        raise DataError("training split is empty")
    if not val_items:
        raise DataError("validation split is empty")

    rng = np.random.default_rng(cfg.seed)
    sampler = _Sampler(len(train_items), rng)
    pipeline = FeaturePipeline(corpus, mfcc_cfg, cfg.workers)
    state = AdamState()
    metrics: List[MetricRow] = []
    losses: List[float] = []
    best = (model.copy(), -1, -1.0)
    correct = seen = 0

    logging.info(
        "training %s (%s): %d iterations, batch %d, %d train / %d validation items",
        model.spec.name,
        model.spec.depthwise,
        cfg.total_iterations,
        cfg.batch_size,
        len(train_items),
        len(val_items),
    )
    for it in range(cfg.total_iterations):
        idx = sampler.take(cfg.batch_size)
        batch = [train_items[int(i)] for i in idx]
        seeds = rng.integers(0, 2**63 - 1, size=len(batch)) if cfg.augment else None
        x, labels = pipeline.batch(batch, seeds, cfg)
        try:
            loss, grads, logits = _train_pass(model, x, labels, True, cfg.bn_momentum)
        except NonFiniteError as e:
            e.context["iteration"] = it
            logging.error("training diverged at iteration %d", it)
            raise
        losses.append(loss)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        seen += len(batch)
        lr = lr_at(it, cfg)
        adam_step(model.params, grads, state, it, cfg)

        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.total_iterations:
            # train accuracy: train-mode batches since the last evaluation
            val = evaluate(model, corpus, "validation", pipeline, cfg.batch_size)
            train_acc = correct / seen
            metrics.append(MetricRow(done, lr, loss, train_acc, val.accuracy))
            logging.info(
                "iter %d lr=%.6g loss=%.4f train_acc=%.4f val_acc=%.4f",
                done,
                lr,
                loss,
                train_acc,
                val.accuracy,
            )
            if val.accuracy > best[2]:
                best = (model.copy(), done, val.accuracy)
            correct = seen = 0

    logging.info("best validation accuracy %.4f at iteration %d", best[2], best[1])
    return TrainResult(best[0], metrics, losses, best[1], best[2])


# ---------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    far: float
    frr: float


def _rate(hits: int, total: int) -> float:
    return hits / total if total else 0.0


def roc_points(scores: Sequence[ScoreRow]) -> List[RocPoint]:
    """Keyword-vs-rest ROC over a posterior threshold sweep, FAR ascending.

    An item is accepted for a keyword when that keyword's posterior is at
    least the threshold. False rejects are keyword items (classes 0-9) whose
    true-class posterior is below it; false alarms are unknown and silence
    items whose largest keyword posterior reaches it.
    """
    if not scores:
        raise DataError("score table is empty")
    table = np.array([r.scores for r in scores], dtype=np.float64)
    labels = np.array([r.label for r in scores], dtype=np.int64)
    if table.ndim != 2 or table.shape[1] <= UNKNOWN_INDEX:
        raise DataError(f"score rows need {len(CLASS_NAMES)} columns")
    if np.any(table < 0.0) or np.any(table > 1.0) or not np.all(np.isfinite(table)):
        raise DataError("scores must lie in [0, 1]")

    keyword = labels < UNKNOWN_INDEX
    positives = table[keyword, labels[keyword]]
    negatives = table[~keyword, :UNKNOWN_INDEX].max(axis=1) if np.any(~keyword) else np.empty(0)
    if positives.size == 0 or negatives.size == 0:
        logging.warning(
            "ROC from %d keyword and %d non-keyword items; the empty side reports rate 0",
            positives.size,
            negatives.size,
        )

    thresholds = np.unique(np.concatenate([positives, negatives, [0.0, 1.0]]))[::-1]
    pos_sorted = np.sort(positives)
    neg_sorted = np.sort(negatives)
    points = []
    for t in thresholds:
        rejected = int(np.searchsorted(pos_sorted, t, side="left"))
        alarms = neg_sorted.size - int(np.searchsorted(neg_sorted, t, side="left"))
        points.append(RocPoint(float(t), _rate(alarms, neg_sorted.size), _rate(rejected, pos_sorted.size)))
    return points


def equal_error_point(points: Sequence[RocPoint]) -> RocPoint:
    """The sweep point where FAR and FRR are closest."""
    return min(points, key=lambda p: (abs(p.far - p.frr), p.far + p.frr))


# ---------------------------------------------------------------------------
# CSV artifacts


def _csv_bytes(header: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def write_metrics_csv(metrics: Sequence[MetricRow], path: Union[str, Path]) -> None:
    from .container import write_atomic

    rows = [
        (m.iteration, repr(float(m.lr)), repr(float(m.loss)), repr(float(m.train_accuracy)), repr(float(m.val_accuracy)))
        for m in metrics
    ]
    write_atomic(path, _csv_bytes(["iteration", "lr", "loss", "train_accuracy", "val_accuracy"], rows))


def scores_header(num_classes: int = len(CLASS_NAMES)) -> List[str]:
    return ["path", "label"] + [f"score_{i}" for i in range(num_classes)]


def write_scores_csv(scores: Sequence[ScoreRow], path: Union[str, Path]) -> None:
    from .container import write_atomic

    n = len(scores[0].scores) if scores else len(CLASS_NAMES)
    rows = [[r.path, int(r.label)] + [repr(float(s)) for s in r.scores] for r in scores]
    write_atomic(path, _csv_bytes(scores_header(n), rows))


def read_scores_csv(path: Union[str, Path]) -> List[ScoreRow]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read scores file {p}: {e}", {"path": str(p)}) from e
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[:2] != ["path", "label"]:
        raise DataError(f"{p} is not a scores CSV (expected path,label,score_*)", {"path": str(p)})
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise DataError(f"{p}:{lineno}: expected {len(header)} fields, got {len(rec)}", {"path": str(p)})
        try:
            rows.append(ScoreRow(rec[0], int(rec[1]), tuple(float(s) for s in rec[2:])))
        except ValueError as e:
            raise DataError(f"{p}:{lineno}: {e}", {"path": str(p)}) from e
    return rows


def write_roc_csv(points: Sequence[RocPoint], path: Union[str, Path]) -> None:
    from .container import write_atomic

    write_atomic(path, _csv_bytes(["far", "frr"], [(repr(float(pt.far)), repr(float(pt.frr))) for pt in points]))
