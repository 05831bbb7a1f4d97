"""Dense numeric kernels for temporal convolution networks.

Array kernels use a (..., T, C) layout: time on the second-to-last axis,
channels last, any number of leading batch axes. Every forward kernel that
training needs has a matching ``*_backward`` returning exact reverse-mode
gradients. The FeatureMap-level functions wrap the kernels for single
T x 1 x C maps and validate their preconditions.

Temporal padding is "same"-style: ``floor((D-1)/2)`` zeros on the left and
as many as needed on the right so that the output has ``ceil(T/stride)``
frames.
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax
from scipy.special import softmax as _softmax

from .errors import NonFiniteError, NumericError, TensorError

BN_EPSILON = 1e-3


def out_frames(frames: int, stride: int) -> int:
    return -(-frames // stride)


def check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise TensorError(f"stride must be 1 or 2, got {stride}", {"stride": stride})


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name} contains non-finite values", {"name": name})


def _as_float(a) -> np.ndarray:
    arr = np.array(a, copy=True)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class FeatureMap:
    """A T x 1 x C map: frames on axis 0, a unit height axis, channels last."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float(self.data)
        if arr.ndim == 2:
            arr = arr[:, None, :]
        if arr.ndim != 3 or arr.shape[1] != 1:
            raise TensorError(f"FeatureMap must be T x 1 x C, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[2] < 1:
            raise TensorError(f"FeatureMap needs T >= 1 and C >= 1, got {arr.shape}")
        check_finite("FeatureMap", arr)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def matrix(self) -> np.ndarray:
        """(T, C) view of the data."""
        return self.data[:, 0, :]


@dataclass(frozen=True)
class DepthwiseKernel:
    """One D x 1 filter per channel, stored as (D, 1, C)."""

    weights: np.ndarray

    def __post_init__(self):
        w = _as_float(self.weights)
        if w.ndim == 2:
            w = w[:, None, :]
        if w.ndim != 3 or w.shape[1] != 1 or w.shape[2] < 1:
            raise TensorError(f"depthwise kernel must be D x 1 x C, got {w.shape}")
        if w.shape[0] < 1 or w.shape[0] % 2 == 0:
            raise TensorError(
                f"depthwise kernel size must be odd, got {w.shape[0]}",
                {"kernel_size": w.shape[0]},
            )
        check_finite("DepthwiseKernel", w)
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]

    @property
    def half_width(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def channels(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class BnParams:
    """Per-channel batch-normalization scale, shift and running statistics.

    ``sigma`` is a standard deviation; the effective divisor is
    ``sqrt(sigma**2 + epsilon)``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        arrays = {}
        for name in ("gamma", "beta", "mu", "sigma"):
            a = np.atleast_1d(_as_float(getattr(self, name)))
            if a.ndim != 1:
                raise TensorError(f"BnParams.{name} must be one-dimensional")
            arrays[name] = a
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise TensorError("BnParams arrays differ in length", {"lengths": sorted(lengths)})
        check_finite("BnParams", *arrays.values())
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise NonFiniteError(f"BnParams.epsilon must be finite and >= 0, got {self.epsilon}")
        if np.any(arrays["sigma"] < 0):
            raise TensorError("BnParams.sigma must be non-negative")
        for name, a in arrays.items():
            object.__setattr__(self, name, _frozen(a))

    @classmethod
    def identity(cls, channels: int, epsilon: float = 0.0, dtype=np.float64) -> "BnParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            mu=np.zeros(channels, dtype),
            sigma=np.ones(channels, dtype),
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def effective_sigma(self) -> np.ndarray:
        s = np.sqrt(self.sigma * self.sigma + self.epsilon)
        if np.any(s <= 0):
            raise NumericError(
                "batch norm has zero effective sigma",
                {"channels": np.flatnonzero(s <= 0).tolist()},
            )
        return s


@dataclass(frozen=True)
class PointwiseWeights:
    """A 1 x 1 convolution, weights (1, 1, C_in, C_out) and optional bias."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = _as_float(self.weights)
        if w.ndim == 2:
            w = w[None, None, :, :]
        if w.ndim != 4 or w.shape[:2] != (1, 1) or min(w.shape[2:]) < 1:
            raise TensorError(f"pointwise weights must be 1 x 1 x C_in x C_out, got {w.shape}")
        check_finite("PointwiseWeights", w)
        object.__setattr__(self, "weights", _frozen(w))
        if self.bias is not None:
            b = _as_float(self.bias).reshape(-1)
            if b.shape[0] != w.shape[3]:
                raise TensorError("pointwise bias length must equal C_out")
            check_finite("PointwiseWeights.bias", b)
            object.__setattr__(self, "bias", _frozen(b))

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


# ---------------------------------------------------------------------------
# array kernels


def _pad_time(x: np.ndarray, kernel_size: int, stride: int) -> Tuple[np.ndarray, int]:
    frames = x.shape[-2]
    k = (kernel_size - 1) // 2
    n_out = out_frames(frames, stride)
    right = max(0, stride * (n_out - 1) + kernel_size - k - frames)
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k, right)
    return np.pad(x, pad), n_out


def _tap(xp: np.ndarray, i: int, stride: int, n_out: int) -> np.ndarray:
    # frames t*stride + i of the padded input, t = 0 .. n_out-1 (a view)
    return xp[..., i : i + stride * (n_out - 1) + 1 : stride, :]


def _lead_axes(a: np.ndarray) -> Tuple[int, ...]:
    return tuple(range(a.ndim - 1))


def dwconv(
    x: np.ndarray, w: np.ndarray, stride: int = 1, bias: Optional[np.ndarray] = None
) -> np.ndarray:
    """Depthwise temporal convolution; w is (D, 1, C)."""
    D = w.shape[0]
    xp, n = _pad_time(x, D, stride)
    out = np.zeros(x.shape[:-2] + (n, x.shape[-1]), dtype=np.result_type(x, w))
    for i in range(D):
        out += _tap(xp, i, stride, n) * w[i, 0]
    if bias is not None:
        out += bias
    return out


def dwconv_backward(
    x: np.ndarray, w: np.ndarray, stride: int, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    D = w.shape[0]
    xp, n = _pad_time(x, D, stride)
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, w, grad_out))
    gw = np.zeros(w.shape, dtype=gxp.dtype)
    axes = _lead_axes(grad_out)
    for i in range(D):
        gw[i, 0] = (_tap(xp, i, stride, n) * grad_out).sum(axis=axes)
        view = _tap(gxp, i, stride, n)
        view += grad_out * w[i, 0]
    k = (D - 1) // 2
    return gxp[..., k : k + x.shape[-2], :], gw


def tconv(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Full (channel-mixing) temporal convolution; w is (D, 1, C_in, C_out)."""
    D = w.shape[0]
    xp, n = _pad_time(x, D, stride)
    out = np.zeros(x.shape[:-2] + (n, w.shape[3]), dtype=np.result_type(x, w))
    for i in range(D):
        out += _tap(xp, i, stride, n) @ w[i, 0]
    return out


def tconv_backward(
    x: np.ndarray, w: np.ndarray, stride: int, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    D, _, c_in, c_out = w.shape
    xp, n = _pad_time(x, D, stride)
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, w, grad_out))
    gw = np.zeros(w.shape, dtype=gxp.dtype)
    g2 = grad_out.reshape(-1, c_out)
    for i in range(D):
        tap = _tap(xp, i, stride, n)
        gw[i, 0] = tap.reshape(-1, c_in).T @ g2
        view = _tap(gxp, i, stride, n)
        view += grad_out @ w[i, 0].T
    k = (D - 1) // 2
    return gxp[..., k : k + x.shape[-2], :], gw


def pwconv(
    x: np.ndarray, w: np.ndarray, stride: int = 1, bias: Optional[np.ndarray] = None
) -> np.ndarray:
    """1 x 1 convolution sampling every stride-th frame; w is (1, 1, C_in, C_out)."""
    out = x[..., ::stride, :] @ w[0, 0]
    if bias is not None:
        out = out + bias
    return out


def pwconv_backward(
    x: np.ndarray, w: np.ndarray, stride: int, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_w, grad_bias)."""
    c_in, c_out = w.shape[2:]
    xs = x[..., ::stride, :]
    gx = np.zeros(x.shape, dtype=np.result_type(x, w, grad_out))
    gx[..., ::stride, :] = grad_out @ w[0, 0].T
    gw = (xs.reshape(-1, c_in).T @ grad_out.reshape(-1, c_out)).reshape(w.shape)
    gb = grad_out.sum(axis=_lead_axes(grad_out))
    return gx, gw, gb


def bn_infer(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    eps: float,
) -> np.ndarray:
    return (x - mu) * (gamma / np.sqrt(sigma * sigma + eps)) + beta


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def bn_train(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> Tuple[np.ndarray, BnCache]:
    """Batch-statistics normalization over every axis but the channel axis."""
    axes = _lead_axes(x)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat * gamma + beta, BnCache(xhat, inv, gamma, mean, var)


def bn_train_backward(
    grad_out: np.ndarray, cache: BnCache
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gamma, grad_beta)."""
    axes = _lead_axes(grad_out)
    m = grad_out.size // grad_out.shape[-1]
    gbeta = grad_out.sum(axis=axes)
    ggamma = (grad_out * cache.xhat).sum(axis=axes)
    gxhat = grad_out * cache.gamma
    gx = (cache.inv_std / m) * (
        m * gxhat - gxhat.sum(axis=axes) - cache.xhat * (gxhat * cache.xhat).sum(axis=axes)
    )
    return gx, ggamma, gbeta


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def time_pool_backward(frames: int, grad_out: np.ndarray) -> np.ndarray:
    g = grad_out[..., None, :] / frames
    return np.repeat(g, frames, axis=-2)


def dense_backward(
    v: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_v, grad_w, grad_bias) for v @ w + b."""
    g2 = grad_out.reshape(-1, w.shape[1])
    gw = v.reshape(-1, w.shape[0]).T @ g2
    return grad_out @ w.T, gw, g2.sum(axis=0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient wrt logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# FeatureMap-level operations


def depthwise_conv(
    input: FeatureMap,
    kernel: DepthwiseKernel,
    stride: int = 1,
    bias: Optional[np.ndarray] = None,
) -> FeatureMap:
    check_stride(stride)
    if input.channels != kernel.channels:
        raise TensorError(
            f"channel mismatch: input has {input.channels}, kernel has {kernel.channels}"
        )
    if kernel.kernel_size % 2 == 0:
        raise TensorError("depthwise kernel size must be odd")
    if bias is not None:
        bias = np.asarray(bias).reshape(-1)
        if bias.shape[0] != kernel.channels:
            raise TensorError("bias length must equal the channel count")
    out = dwconv(input.matrix(), kernel.weights, stride, bias)
    return FeatureMap(out)


def batchnorm(input: FeatureMap, bn: BnParams) -> FeatureMap:
    if input.channels != bn.channels:
        raise TensorError(
            f"channel mismatch: input has {input.channels}, batch norm has {bn.channels}"
        )
    scale = bn.gamma / bn.effective_sigma()
    return FeatureMap((input.matrix() - bn.mu) * scale + bn.beta)


def pointwise_conv(input: FeatureMap, w: PointwiseWeights, stride: int = 1) -> FeatureMap:
    check_stride(stride)
    if input.channels != w.in_channels:
        raise TensorError(
            f"channel mismatch: input has {input.channels}, weights expect {w.in_channels}"
        )
    return FeatureMap(pwconv(input.matrix(), w.weights, stride, w.bias))


def relu(x: Union[FeatureMap, np.ndarray]) -> Union[FeatureMap, np.ndarray]:
    if isinstance(x, FeatureMap):
        return FeatureMap(np.maximum(x.data, 0))
    x = np.asarray(x)
    if x.size == 0:
        raise TensorError("relu of an empty input")
    return np.maximum(x, 0)


def avg_pool_time(x: Union[FeatureMap, np.ndarray]) -> np.ndarray:
    """Mean over frames: a T x 1 x C map gives a length-C vector."""
    if isinstance(x, FeatureMap):
        return x.matrix().mean(axis=0)
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise TensorError("time pooling needs at least one frame")
    return x.mean(axis=-2)


def dense(v: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    v = np.asarray(v)
    if v.size == 0:
        raise TensorError("dense layer on an empty input")
    if v.shape[-1] != w.shape[0]:
        raise TensorError(f"dense input has {v.shape[-1]} features, weights expect {w.shape[0]}")
    out = v @ w
    if bias is not None:
        out = out + bias
    return out


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.size == 0:
        raise TensorError("softmax of an empty vector")
    return _softmax(v, axis=-1)
