"""TENet model descriptions, forward and backward passes, footprint accounting.

A TENet is a 3x1 stem convolution (40 MFCC channels -> width) with batch
norm and ReLU, a stack of inverted bottleneck blocks (IBBs) and a head of
time-average pooling, a dense layer and softmax. Each IBB runs

    1x1 expand (stride s) -> BN -> ReLU -> depthwise -> BN -> ReLU
    -> 1x1 project -> BN, + shortcut, -> ReLU

where the shortcut is the identity, or a stride-s 1x1 conv + BN when the
shapes differ. With MTConv the depthwise conv + BN is replaced by parallel
depthwise branches of distinct odd kernel sizes, each with its own BN,
summed before the ReLU.

Parameters live in a flat, ordered name -> array mapping. Every conv or
dense unit ``P`` owns ``P.w`` and its batch norm ``P.bn.{gamma,beta,mu,sigma}``;
``mu``/``sigma`` are running statistics, not trainable.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, TensorError, UsageError
from .tensor import (
    BN_EPSILON,
    BnParams,
    DepthwiseKernel,
    FeatureMap,
    avg_pool_time,
    bn_infer,
    bn_train,
    bn_train_backward,
    check_finite,
    dense,
    dense_backward,
    dwconv,
    dwconv_backward,
    out_frames,
    pwconv,
    pwconv_backward,
    relu,
    relu_backward,
    softmax,
    tconv,
    tconv_backward,
    time_pool_backward,
)

NUM_CLASSES = 12
INPUT_CHANNELS = 40
EXPANSION_RATIO = 3
STEM_KERNEL = 3
STANDARD_KERNEL = 9
DEFAULT_BRANCHES = (3, 5, 7, 9)
BN_MOMENTUM = 0.99
DEFAULT_FRAMES = 98

TENET12_STRIDES = (1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2, 1)
TENET6_STRIDES = (2, 1, 2, 1, 2, 1)

# name -> (IBB width, stride pattern)
VARIANTS: Dict[str, Tuple[int, Tuple[int, ...]]] = {
    "TENet6": (32, TENET6_STRIDES),
    "TENet12": (32, TENET12_STRIDES),
    "TENet6-narrow": (16, TENET6_STRIDES),
    "TENet12-narrow": (16, TENET12_STRIDES),
}

# reference footprints: name -> (parameters, multiplies at T=98)
PUBLISHED_FOOTPRINT: Dict[str, Tuple[int, int]] = {
    "TENet6-narrow": (17_000, 553_000),
    "TENet12-narrow": (31_000, 895_000),
    "TENet6": (54_000, 1_680_000),
    "TENet12": (100_000, 2_900_000),
}

# kernel-scale ablation presets, smallest to largest
ABLATION_BRANCH_SETS: Dict[str, Tuple[int, ...]] = {
    "k9": (9,),
    "k3-9": (3, 9),
    "k3-5-9": (3, 5, 9),
    "k3-5-7-9": (3, 5, 7, 9),
}


def resolve_variant(name: str) -> str:
    """Canonical variant name, case-insensitive ("tenet12" -> "TENet12")."""
    for canonical in VARIANTS:
        if canonical.lower() == str(name).strip().lower():
            return canonical
    raise UsageError(
        f"unknown variant '{name}', expected one of {', '.join(VARIANTS)}",
        context={"variant": name},
    )


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class DepthwiseKind:
    """Which depthwise layer the IBBs use.

    ``standard`` is one kernel with one BN; ``mtconv`` is a set of branches.
    Sizes are kept sorted ascending.
    """

    mode: str = "standard"
    sizes: Tuple[int, ...] = (STANDARD_KERNEL,)

    def __post_init__(self):
        if self.mode not in ("standard", "mtconv"):
            raise UsageError(f"unknown depthwise mode '{self.mode}'")
        sizes = tuple(sorted(int(s) for s in self.sizes))
        if not sizes:
            raise UsageError("depthwise layer needs at least one kernel size")
        if any(s < 1 or s % 2 == 0 for s in sizes):
            raise UsageError(f"kernel sizes must be odd and positive, got {list(sizes)}")
        if len(set(sizes)) != len(sizes):
            raise UsageError(f"MTConv kernel sizes must be distinct, got {list(sizes)}")
        if self.mode == "standard" and len(sizes) != 1:
            raise UsageError("a standard depthwise layer has exactly one kernel size")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def standard(cls, kernel_size: int = STANDARD_KERNEL) -> "DepthwiseKind":
        return cls("standard", (kernel_size,))

    @classmethod
    def mtconv(cls, sizes: Sequence[int] = DEFAULT_BRANCHES) -> "DepthwiseKind":
        return cls("mtconv", tuple(sizes))

    @classmethod
    def parse(cls, text: Optional[str]) -> "DepthwiseKind":
        """Accepts "standard", "standard:7", "mtconv", "mtconv:3,5,9",
        a bare size list "3,5,7,9" or an ablation preset name."""
        if text is None or str(text).strip() == "":
            return cls.standard()
        t = str(text).strip().lower()
        if t in ABLATION_BRANCH_SETS:
            return cls.mtconv(ABLATION_BRANCH_SETS[t])
        mode, _, rest = t.partition(":")
        if mode not in ("standard", "mtconv"):
            mode, rest = "mtconv", t
        if not rest:
            return cls.standard() if mode == "standard" else cls.mtconv()
        try:
            sizes = tuple(int(s) for s in rest.split(",") if s.strip())
        except ValueError as e:
            raise UsageError(f"cannot parse kernel sizes from '{text}'") from e
        return cls(mode, sizes)

    @property
    def is_mtconv(self) -> bool:
        return self.mode == "mtconv"

    @property
    def fused_size(self) -> int:
        return max(self.sizes)

    def __str__(self) -> str:
        return f"{self.mode}:{','.join(str(s) for s in self.sizes)}"


@dataclass(frozen=True)
class IbbSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    depthwise: DepthwiseKind = field(default_factory=DepthwiseKind)
    expansion_ratio: int = EXPANSION_RATIO

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise UsageError(f"IBB stride must be 1 or 2, got {self.stride}")
        if min(self.in_channels, self.out_channels, self.expansion_ratio) < 1:
            raise UsageError("IBB channel counts must be positive")

    @property
    def expansion_channels(self) -> int:
        return self.out_channels * self.expansion_ratio

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass(frozen=True)
class ModelSpec:
    name: str
    width: int
    blocks: Tuple[IbbSpec, ...]
    input_channels: int = INPUT_CHANNELS
    stem_kernel: int = STEM_KERNEL
    num_classes: int = NUM_CLASSES
    epsilon: float = BN_EPSILON

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(b.stride for b in self.blocks)

    @property
    def depthwise(self) -> DepthwiseKind:
        return self.blocks[0].depthwise if self.blocks else DepthwiseKind.standard()

    def with_depthwise(self, kind: DepthwiseKind) -> "ModelSpec":
        return replace(self, blocks=tuple(replace(b, depthwise=kind) for b in self.blocks))


def custom_spec(
    name: str,
    width: int,
    strides: Sequence[int],
    depthwise: Optional[DepthwiseKind] = None,
    input_channels: int = INPUT_CHANNELS,
    epsilon: float = BN_EPSILON,
) -> ModelSpec:
    kind = depthwise or DepthwiseKind.standard()
    blocks = tuple(IbbSpec(width, width, int(s), kind) for s in strides)
    return ModelSpec(name, width, blocks, input_channels=input_channels, epsilon=epsilon)


def make_spec(name: str, depthwise: Optional[DepthwiseKind] = None) -> ModelSpec:
    canonical = resolve_variant(name)
    width, strides = VARIANTS[canonical]
    return custom_spec(canonical, width, strides, depthwise)


@dataclass(frozen=True)
class MtConvBranch:
    kernel: DepthwiseKernel
    bn: BnParams

    @property
    def kernel_size(self) -> int:
        return self.kernel.kernel_size


@dataclass(frozen=True)
class MtConvSpec:
    """Parallel depthwise branches sharing channels and stride.

    Branches are stored in ascending kernel-size order whatever order they
    are given in; sizes must be odd and pairwise distinct.
    """

    branches: Tuple[MtConvBranch, ...]

    def __post_init__(self):
        branches = tuple(sorted(self.branches, key=lambda b: b.kernel_size))
        if not branches:
            raise TensorError("MTConv needs at least one branch")
        sizes = [b.kernel_size for b in branches]
        if len(set(sizes)) != len(sizes):
            raise TensorError(f"MTConv kernel sizes must be distinct, got {sizes}")
        channels = {b.kernel.channels for b in branches} | {b.bn.channels for b in branches}
        if len(channels) != 1:
            raise TensorError("MTConv branches must share one channel count")
        object.__setattr__(self, "branches", branches)

    @property
    def channels(self) -> int:
        return self.branches[0].kernel.channels

    @property
    def kernel_sizes(self) -> Tuple[int, ...]:
        return tuple(b.kernel_size for b in self.branches)


# ---------------------------------------------------------------------------
# parameters


def bn_names(prefix: str) -> Tuple[str, str, str, str]:
    return (f"{prefix}.bn.gamma", f"{prefix}.bn.beta", f"{prefix}.bn.mu", f"{prefix}.bn.sigma")


def depthwise_prefixes(block_prefix: str, kind: DepthwiseKind) -> List[Tuple[str, int]]:
    """(unit prefix, kernel size) for each depthwise unit of a block."""
    if kind.is_mtconv:
        return [(f"{block_prefix}.dw.k{s}", s) for s in kind.sizes]
    return [(f"{block_prefix}.dw", kind.sizes[0])]


def param_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    """Every tensor of a model in canonical order."""
    shapes: Dict[str, Tuple[int, ...]] = {}

    def unit(prefix: str, wshape: Tuple[int, ...], channels: int) -> None:
        shapes[f"{prefix}.w"] = wshape
        for n in bn_names(prefix):
            shapes[n] = (channels,)

    unit("stem", (spec.stem_kernel, 1, spec.input_channels, spec.width), spec.width)
    for i, b in enumerate(spec.blocks):
        p = f"blocks.{i}"
        e = b.expansion_channels
        unit(f"{p}.expand", (1, 1, b.in_channels, e), e)
        for prefix, size in depthwise_prefixes(p, b.depthwise):
            unit(prefix, (size, 1, e), e)
        unit(f"{p}.project", (1, 1, e, b.out_channels), b.out_channels)
        if b.has_projection:
            unit(f"{p}.shortcut", (1, 1, b.in_channels, b.out_channels), b.out_channels)
    last = spec.blocks[-1].out_channels if spec.blocks else spec.width
    shapes["head.w"] = (last, spec.num_classes)
    shapes["head.b"] = (spec.num_classes,)
    return shapes


def is_running_stat(name: str) -> bool:
    return name.endswith(".bn.mu") or name.endswith(".bn.sigma")


@dataclass
class Model:
    spec: ModelSpec
    params: Dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def trainable_names(self) -> List[str]:
        return [k for k in self.params if not is_running_stat(k)]

    def decayed_names(self) -> List[str]:
        """Conv and dense weights; BN parameters and biases are not decayed."""
        return [k for k in self.params if k.endswith(".w")]

    def bn_params(self, prefix: str) -> BnParams:
        g, b, m, s = (self.params[n] for n in bn_names(prefix))
        return BnParams(g, b, m, s, self.spec.epsilon)


def _fan_in(shape: Tuple[int, ...]) -> int:
    if len(shape) == 4:  # (D, 1, C_in, C_out)
        return shape[0] * shape[2]
    if len(shape) == 3:  # depthwise (D, 1, C)
        return shape[0]
    return shape[0]


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Fan-in-scaled uniform convs, identity batch norms, a small dense head."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if name == "head.w":
            bound = 1.0 / shape[0]
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".w"):
            bound = np.sqrt(6.0 / _fan_in(shape))
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma") or name.endswith(".sigma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def build_model(
    name: str,
    depthwise_kind: Union[DepthwiseKind, str, None] = None,
    seed: int = 0,
) -> Model:
    if not isinstance(depthwise_kind, DepthwiseKind):
        depthwise_kind = DepthwiseKind.parse(depthwise_kind)
    spec = make_spec(name, depthwise_kind)
    model = Model(spec, init_params(spec, seed))
    logging.debug("built %s (%s) seed=%d, %d tensors", spec.name, depthwise_kind, seed, len(model.params))
    return model


def build_from_spec(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    return Model(spec, init_params(spec, seed, dtype))


def block_mtconv(model: Model, index: int) -> MtConvSpec:
    """The depthwise layer of block index as an MtConvSpec (any kind)."""
    kind = model.spec.blocks[index].depthwise
    branches = []
    for prefix, _ in depthwise_prefixes(f"blocks.{index}", kind):
        branches.append(MtConvBranch(DepthwiseKernel(model.params[f"{prefix}.w"]), model.bn_params(prefix)))
    return MtConvSpec(tuple(branches))


# ---------------------------------------------------------------------------
# forward / backward


def _accumulate(grads: Dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


class _ConvBn:
    """One convolution followed by batch normalization."""

    def __init__(self, prefix: str, kind: str, stride: int, eps: float):
        self.prefix = prefix
        self.kind = kind
        self.stride = stride
        self.eps = eps
        self._cache = None

    def forward(self, params, x, train, stats):
        w = params[f"{self.prefix}.w"]
        if self.kind == "depthwise":
            y = dwconv(x, w, self.stride)
        elif self.kind == "pointwise":
            y = pwconv(x, w, self.stride)
        else:
            y = tconv(x, w, self.stride)
        gamma, beta, mu, sigma = (params[n] for n in bn_names(self.prefix))
        if train:
            z, cache = bn_train(y, gamma, beta, self.eps)
            if stats is not None:
                stats[self.prefix] = (cache.mean, cache.var)
        else:
            z, cache = bn_infer(y, gamma, beta, mu, sigma, self.eps), None
        self._cache = (x, cache)
        return z

    def backward(self, params, g, grads):
        x, cache = self._cache
        if cache is None:
            raise RuntimeError("backward needs a train-mode forward pass")
        gamma_name, beta_name, _, _ = bn_names(self.prefix)
        gy, ggamma, gbeta = bn_train_backward(g, cache)
        _accumulate(grads, gamma_name, ggamma)
        _accumulate(grads, beta_name, gbeta)
        w = params[f"{self.prefix}.w"]
        if self.kind == "depthwise":
            gx, gw = dwconv_backward(x, w, self.stride, gy)
        elif self.kind == "pointwise":
            gx, gw, _ = pwconv_backward(x, w, self.stride, gy)
        else:
            gx, gw = tconv_backward(x, w, self.stride, gy)
        _accumulate(grads, f"{self.prefix}.w", gw)
        return gx


class _MtConv:
    """Depthwise branches with their own BN, summed."""

    def __init__(self, units: List[_ConvBn]):
        self.units = units

    def forward(self, params, x, train, stats):
        out = None
        for u in self.units:
            y = u.forward(params, x, train, stats)
            out = y if out is None else out + y
        return out

    def backward(self, params, g, grads):
        gx = None
        for u in self.units:
            gi = u.backward(params, g, grads)
            gx = gi if gx is None else gx + gi
        return gx


class _Block:
    def __init__(self, index: int, spec: IbbSpec, eps: float):
        p = f"blocks.{index}"
        self.expand = _ConvBn(f"{p}.expand", "pointwise", spec.stride, eps)
        self.depthwise = _MtConv(
            [_ConvBn(prefix, "depthwise", 1, eps) for prefix, _ in depthwise_prefixes(p, spec.depthwise)]
        )
        self.project = _ConvBn(f"{p}.project", "pointwise", 1, eps)
        self.shortcut = _ConvBn(f"{p}.shortcut", "pointwise", spec.stride, eps) if spec.has_projection else None

    def forward(self, params, x, train, stats):
        self._h1 = self.expand.forward(params, x, train, stats)
        self._h2 = self.depthwise.forward(params, relu(self._h1), train, stats)
        out = self.project.forward(params, relu(self._h2), train, stats)
        out = out + (self.shortcut.forward(params, x, train, stats) if self.shortcut else x)
        self._pre = out
        return relu(out)

    def backward(self, params, g, grads):
        g = relu_backward(self._pre, g)
        gb = self.project.backward(params, g, grads)
        ga = self.depthwise.backward(params, relu_backward(self._h2, gb), grads)
        gx = self.expand.backward(params, relu_backward(self._h1, ga), grads)
        if self.shortcut is not None:
            return gx + self.shortcut.backward(params, g, grads)
        return gx + g


class Network:
    """Executable graph for a ModelSpec. Holds activations of the last
    forward pass, so one instance serves one forward/backward pair."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.stem = _ConvBn("stem", "full", 1, spec.epsilon)
        self.blocks = [_Block(i, b, spec.epsilon) for i, b in enumerate(spec.blocks)]

    def forward(self, params, x, train: bool = False, stats: Optional[dict] = None) -> np.ndarray:
        """x is (N, T, input_channels); returns logits (N, num_classes)."""
        if x.shape[-1] != self.spec.input_channels:
            raise TensorError(
                f"input has {x.shape[-1]} channels, model expects {self.spec.input_channels}",
                {"shape": list(x.shape)},
            )
        self._stem_out = self.stem.forward(params, x, train, stats)
        h = relu(self._stem_out)
        for b in self.blocks:
            h = b.forward(params, h, train, stats)
        self._frames = h.shape[-2]
        self._pooled = avg_pool_time(h)
        logits = dense(self._pooled, params["head.w"], params["head.b"])
        check_finite("logits", logits)
        return logits

    def backward(self, params, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        gv, gw, gb = dense_backward(self._pooled, params["head.w"], grad_logits)
        grads["head.w"] = gw
        grads["head.b"] = gb
        g = time_pool_backward(self._frames, gv)
        for b in reversed(self.blocks):
            g = b.backward(params, g, grads)
        g = relu_backward(self._stem_out, g)
        self.stem.backward(params, g, grads)
        return grads


def update_running_stats(
    params: Dict[str, np.ndarray], stats: Dict[str, Tuple[np.ndarray, np.ndarray]], momentum: float = BN_MOMENTUM
) -> None:
    """Exponential moving average of batch mean and variance, in place."""
    for prefix, (mean, var) in stats.items():
        _, _, mu_name, sigma_name = bn_names(prefix)
        mu, sigma = params[mu_name], params[sigma_name]
        new_var = momentum * sigma.astype(np.float64) ** 2 + (1.0 - momentum) * var
        mu[...] = momentum * mu + (1.0 - momentum) * mean
        sigma[...] = np.sqrt(new_var)


def forward_batch(
    model: Model,
    x: np.ndarray,
    mode: str = "infer",
    update_stats: bool = False,
    momentum: float = BN_MOMENTUM,
) -> np.ndarray:
    """Logits (N, num_classes) for a batch x of shape (N, T, C)."""
    if mode not in ("train", "infer"):
        raise UsageError(f"mode must be 'train' or 'infer', got '{mode}'")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    net = Network(model.spec)
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    logits = net.forward(model.params, x, train=(mode == "train"), stats=stats)
    if update_stats and mode == "train":
        update_running_stats(model.params, stats, momentum)
    return logits


def forward(model: Model, input: FeatureMap, mode: str = "infer") -> Tuple[np.ndarray, np.ndarray]:
    """(logits, softmax) for one T x 1 x C map."""
    logits = forward_batch(model, input.matrix()[None], mode)[0]
    return logits, softmax(logits)


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class CountRow:
    layer: str
    params: int
    mults: int


@dataclass(frozen=True)
class CountReport:
    rows: Tuple[CountRow, ...]

    @property
    def parameters(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def multiplies(self) -> int:
        return sum(r.mults for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,params,mults"]
        lines.extend(f"{r.layer},{r.params},{r.mults}" for r in self.rows)
        lines.append(f"total,{self.parameters},{self.multiplies}")
        return "\n".join(lines) + "\n"


def count_report(model: Union[Model, ModelSpec], input_frames: int = DEFAULT_FRAMES) -> CountReport:
    """Parameters and multiplies of the deployed (fused) form.

    Parameters: conv weights, BN gamma/beta per channel, dense weights and
    bias. Multiplies: one per MAC of every conv and the dense layer, with
    frame counts following ceil(T / stride). MTConv layers count as their
    fused kernel of the largest branch size.
    """
    spec = model.spec if isinstance(model, Model) else model
    rows: List[CountRow] = []
    T = input_frames
    w = spec.width
    rows.append(CountRow("stem.conv", spec.stem_kernel * spec.input_channels * w, T * spec.stem_kernel * spec.input_channels * w))
    rows.append(CountRow("stem.bn", 2 * w, 0))
    for i, b in enumerate(spec.blocks):
        p = f"blocks.{i}"
        T = out_frames(T, b.stride)
        e = b.expansion_channels
        d = b.depthwise.fused_size
        rows.append(CountRow(f"{p}.expand", b.in_channels * e, T * b.in_channels * e))
        rows.append(CountRow(f"{p}.expand.bn", 2 * e, 0))
        rows.append(CountRow(f"{p}.dw", d * e, T * d * e))
        rows.append(CountRow(f"{p}.dw.bn", 2 * e, 0))
        rows.append(CountRow(f"{p}.project", e * b.out_channels, T * e * b.out_channels))
        rows.append(CountRow(f"{p}.project.bn", 2 * b.out_channels, 0))
        if b.has_projection:
            rows.append(CountRow(f"{p}.shortcut", b.in_channels * b.out_channels, T * b.in_channels * b.out_channels))
            rows.append(CountRow(f"{p}.shortcut.bn", 2 * b.out_channels, 0))
    last = spec.blocks[-1].out_channels if spec.blocks else w
    rows.append(CountRow("head.dense", last * spec.num_classes + spec.num_classes, last * spec.num_classes))
    return CountReport(tuple(rows))
