"""Kernel fusion: collapse MTConv branches and their batch norms into one
depthwise convolution with a bias.

Per branch, batch norm folds into the kernel (channel-wise scale
gamma / sqrt(sigma^2 + eps)) and a bias (-mu * gamma / sqrt(sigma^2 + eps) + beta).
Folded kernels are zero-padded, centred, to the largest branch size and
added element-wise; the biases add up. Folding runs in double precision and
casts back to the storage dtype at the end.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Tuple

import numpy as np

from .errors import NumericError, TensorError
from .model import (
    DepthwiseKind,
    Model,
    MtConvSpec,
    block_mtconv,
    bn_names,
    depthwise_prefixes,
    param_shapes,
)
from .tensor import BnParams, DepthwiseKernel


@dataclass(frozen=True)
class FusedDepthwise:
    kernel: DepthwiseKernel
    bias: np.ndarray

    @property
    def kernel_size(self) -> int:
        return self.kernel.kernel_size


def fold_bn(kernel: DepthwiseKernel, bn: BnParams) -> Tuple[DepthwiseKernel, np.ndarray]:
    """(scaled kernel, bias) with depthwise_conv(x, kernel', bias) == batchnorm(depthwise_conv(x, kernel))."""
    if kernel.channels != bn.channels:
        raise TensorError(
            f"channel mismatch: kernel has {kernel.channels}, batch norm has {bn.channels}"
        )
    s = np.sqrt(bn.sigma.astype(np.float64) ** 2 + bn.epsilon)
    if np.any(s <= 0):
        raise NumericError(
            "cannot fold batch norm with zero effective sigma",
            {"channels": np.flatnonzero(s <= 0).tolist()},
        )
    scale = bn.gamma.astype(np.float64) / s
    weights = kernel.weights.astype(np.float64) * scale
    bias = bn.beta.astype(np.float64) - bn.mu.astype(np.float64) * scale
    return DepthwiseKernel(weights), bias


def pad_to_max(kernel: DepthwiseKernel, half_width: int) -> DepthwiseKernel:
    """Centre kernel inside a zero kernel of size 2 * half_width + 1."""
    size = 2 * half_width + 1
    if kernel.kernel_size > size:
        raise TensorError(
            f"cannot pad a size-{kernel.kernel_size} kernel down to size {size}",
            {"kernel_size": kernel.kernel_size, "target": size},
        )
    offset = half_width - kernel.half_width
    out = np.zeros((size, 1, kernel.channels), dtype=kernel.weights.dtype)
    out[offset : offset + kernel.kernel_size] = kernel.weights
    return DepthwiseKernel(out)


def fuse_mtconv(spec: MtConvSpec, dtype=None) -> FusedDepthwise:
    """The single depthwise conv + bias equal to the sum of all branches.

    Result dtype defaults to the dtype of the first branch kernel.
    """
    dtype = dtype or spec.branches[0].kernel.weights.dtype
    k_max = max(b.kernel.half_width for b in spec.branches)
    kernel = np.zeros((2 * k_max + 1, 1, spec.channels), dtype=np.float64)
    bias = np.zeros(spec.channels, dtype=np.float64)
    for b in spec.branches:
        folded, bb = fold_bn(b.kernel, b.bn)
        kernel += pad_to_max(folded, k_max).weights
        bias += bb
    return FusedDepthwise(DepthwiseKernel(kernel.astype(dtype)), bias.astype(dtype))


def fuse_model(model: Model) -> Model:
    """Equivalent model whose IBBs all use a standard depthwise layer.

    The fused bias has nowhere else to live in the standard layout, so it
    goes into the depthwise batch norm as beta, with that batch norm reduced
    to the identity (mu = 0, sigma = 1, gamma = sqrt(1 + eps)). The result has
    exactly the tensor set of the base variant.
    """
    spec = model.spec
    if not any(b.depthwise.is_mtconv for b in spec.blocks):
        return model.copy()

    gamma = math.sqrt(1.0 + spec.epsilon)
    blocks = []
    values: Dict[str, np.ndarray] = {}
    for i, b in enumerate(spec.blocks):
        if not b.depthwise.is_mtconv:
            blocks.append(b)
            continue
        kind = DepthwiseKind.standard(b.depthwise.fused_size)
        blocks.append(replace(b, depthwise=kind))
        f = fuse_mtconv(block_mtconv(model, i), dtype=np.float64)
        prefix = depthwise_prefixes(f"blocks.{i}", kind)[0][0]
        c = f.kernel.channels
        gamma_n, beta_n, mu_n, sigma_n = bn_names(prefix)
        values[f"{prefix}.w"] = f.kernel.weights
        values[gamma_n] = np.full(c, gamma)
        values[beta_n] = f.bias
        values[mu_n] = np.zeros(c)
        values[sigma_n] = np.ones(c)

    new_spec = replace(spec, blocks=tuple(blocks))
    dtype = model.dtype
    params = {}
    for name in param_shapes(new_spec):
        if name in values:
            params[name] = np.asarray(values[name]).astype(dtype)
        else:
            params[name] = model.params[name].copy()
    logging.info(
        "fused %d MTConv layer(s) of %s into standard depthwise kernels",
        sum(1 for b in spec.blocks if b.depthwise.is_mtconv),
        spec.name,
    )
    return Model(new_spec, params)
