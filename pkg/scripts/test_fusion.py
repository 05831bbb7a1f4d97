"""Batch-norm folding and MTConv kernel fusion."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT))

from kws.errors import NumericError, TensorError
from kws.fusion import fold_bn, fuse_model, fuse_mtconv, pad_to_max
from kws.model import (
    DepthwiseKind,
    MtConvBranch,
    MtConvSpec,
    Network,
    build_model,
    count_report,
    forward_batch,
    make_spec,
    param_shapes,
)
from kws.tensor import BnParams, DepthwiseKernel, FeatureMap, batchnorm, depthwise_conv


def random_bn(rng, c, dtype=np.float64, sigma=(0.1, 3.0)):
    return BnParams(
        gamma=rng.uniform(0.5, 1.5, c).astype(dtype),
        beta=rng.uniform(-0.5, 0.5, c).astype(dtype),
        mu=rng.uniform(-0.5, 0.5, c).astype(dtype),
        sigma=rng.uniform(*sigma, c).astype(dtype),
        epsilon=1e-3,
    )


def random_mtconv(rng, sizes, c, dtype=np.float64, sigma=(0.1, 3.0)):
    return MtConvSpec(
        tuple(
            MtConvBranch(DepthwiseKernel(rng.uniform(-1, 1, (d, 1, c)).astype(dtype)), random_bn(rng, c, dtype, sigma))
            for d in sizes
        )
    )


def branch_sum(x: FeatureMap, spec: MtConvSpec, stride: int) -> np.ndarray:
    return sum(batchnorm(depthwise_conv(x, b.kernel, stride), b.bn).matrix() for b in spec.branches)


def fused_out(x: FeatureMap, spec: MtConvSpec, stride: int, dtype=None) -> np.ndarray:
    f = fuse_mtconv(spec, dtype)
    return depthwise_conv(x, f.kernel, stride, f.bias).matrix()


# ---------------------------------------------------------------------------
# fold_bn / pad_to_max


def test_fold_identity_bn():
    k = DepthwiseKernel(np.arange(1.0, 4.0).reshape(3, 1, 1))
    folded, bias = fold_bn(k, BnParams.identity(1, epsilon=0.0))
    np.testing.assert_array_equal(folded.weights, k.weights)
    np.testing.assert_array_equal(bias, [0.0])


def test_fold_direct_substitution():
    k = DepthwiseKernel(np.ones((3, 1, 1)))
    bn = BnParams(gamma=[2.0], beta=[0.1], mu=[0.5], sigma=[1.0], epsilon=0.0)
    folded, bias = fold_bn(k, bn)
    np.testing.assert_allclose(folded.weights[:, 0, 0], [2.0, 2.0, 2.0])
    assert bias[0] == pytest.approx(-0.9)


def test_fold_matches_conv_then_bn():
    rng = np.random.default_rng(0)
    k = DepthwiseKernel(rng.normal(size=(7, 1, 6)))
    bn = random_bn(rng, 6)
    x = FeatureMap(rng.normal(size=(25, 1, 6)))
    folded, bias = fold_bn(k, bn)
    ref = batchnorm(depthwise_conv(x, k), bn).matrix()
    assert np.max(np.abs(depthwise_conv(x, folded, 1, bias).matrix() - ref)) <= 1e-10


def test_fold_rejects_zero_sigma_and_mismatch():
    k = DepthwiseKernel(np.ones((3, 1, 2)))
    with pytest.raises(NumericError):
        fold_bn(k, BnParams(gamma=[1.0, 1.0], beta=[0.0, 0.0], mu=[0.0, 0.0], sigma=[1.0, 0.0], epsilon=0.0))
    with pytest.raises(TensorError):
        fold_bn(k, BnParams.identity(3))


def test_pad_to_max_centres_kernel():
    k = DepthwiseKernel(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
    padded = pad_to_max(k, 4)
    np.testing.assert_array_equal(padded.weights[:, 0, 0], [0, 0, 0, 1, 2, 3, 0, 0, 0])
    same = DepthwiseKernel(np.arange(9.0).reshape(9, 1, 1))
    np.testing.assert_array_equal(pad_to_max(same, 4).weights, same.weights)
    with pytest.raises(TensorError):
        pad_to_max(same, 1)


def test_padded_kernel_gives_same_convolution():
    rng = np.random.default_rng(1)
    k = DepthwiseKernel(rng.normal(size=(3, 1, 4)))
    x = FeatureMap(rng.normal(size=(20, 1, 4)))
    for stride in (1, 2):
        a = depthwise_conv(x, k, stride).matrix()
        b = depthwise_conv(x, pad_to_max(k, 4), stride).matrix()
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# fuse_mtconv


def test_single_identity_branch_is_unchanged():
    k = DepthwiseKernel(np.random.default_rng(2).normal(size=(9, 1, 3)))
    f = fuse_mtconv(MtConvSpec((MtConvBranch(k, BnParams.identity(3, epsilon=0.0)),)))
    np.testing.assert_array_equal(f.kernel.weights, k.weights)
    np.testing.assert_array_equal(f.bias, np.zeros(3))


def test_centre_alignment_of_two_branches():
    u, p, q, r = 5.0, 1.0, 2.0, 3.0
    spec = MtConvSpec(
        (
            MtConvBranch(DepthwiseKernel(np.array([[[u]]])), BnParams.identity(1)),
            MtConvBranch(DepthwiseKernel(np.array([p, q, r]).reshape(3, 1, 1)), BnParams.identity(1)),
        )
    )
    f = fuse_mtconv(spec)
    np.testing.assert_array_equal(f.kernel.weights[:, 0, 0], [p, q + u, r])
    np.testing.assert_array_equal(f.bias, [0.0])


def test_random_fusion_double_precision():
    rng = np.random.default_rng(3)
    pool = [1, 3, 5, 7, 9]
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        sizes = sorted(rng.choice(pool, size=n, replace=False).tolist())
        c = int(rng.choice([1, 4, 16, 96]))
        t = int(rng.choice([9, 20, 98]))
        stride = int(rng.choice([1, 2]))
        spec = random_mtconv(rng, sizes, c)
        x = FeatureMap(rng.normal(size=(t, 1, c)))
        diff = np.max(np.abs(fused_out(x, spec, stride) - branch_sum(x, spec, stride)))
        worst = max(worst, float(diff))
    assert worst <= 1e-10


def cast_mtconv(spec: MtConvSpec, dtype) -> MtConvSpec:
    return MtConvSpec(
        tuple(
            MtConvBranch(
                DepthwiseKernel(b.kernel.weights.astype(dtype)),
                BnParams(*(np.asarray(v).astype(dtype) for v in (b.bn.gamma, b.bn.beta, b.bn.mu, b.bn.sigma)), b.bn.epsilon),
            )
            for b in spec.branches
        )
    )


def test_random_fusion_single_precision():
    """float32 fusion against the exact sum of the same float32 branches.

    The error is measured against the scale of the fused convolution with
    every term made positive, since one float32 ulp of a large output
    already exceeds 1e-5.
    """
    rng = np.random.default_rng(4)
    pool = [1, 3, 5, 7, 9]
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        sizes = sorted(rng.choice(pool, size=n, replace=False).tolist())
        c = int(rng.choice([1, 4, 16, 96]))
        t = int(rng.choice([9, 20, 98]))
        stride = int(rng.choice([1, 2]))
        spec32 = cast_mtconv(random_mtconv(rng, sizes, c), np.float32)
        spec64 = cast_mtconv(spec32, np.float64)
        x32 = rng.normal(size=(t, 1, c)).astype(np.float32)
        x64 = FeatureMap(x32.astype(np.float64))

        out = fused_out(FeatureMap(x32), spec32, stride)
        assert out.dtype == np.float32
        ref = branch_sum(x64, spec64, stride)
        f = fuse_mtconv(spec64)
        scale = depthwise_conv(FeatureMap(np.abs(x64.data)), DepthwiseKernel(np.abs(f.kernel.weights)), stride).matrix()
        scale = float(np.max(scale + np.abs(f.bias)))
        assert np.max(np.abs(out - ref)) <= 1e-5 * max(1.0, scale)


def test_fusion_is_order_invariant_and_idempotent():
    rng = np.random.default_rng(5)
    spec = random_mtconv(rng, [3, 5, 7], 4)
    reversed_spec = MtConvSpec(tuple(reversed(spec.branches)))
    a, b = fuse_mtconv(spec), fuse_mtconv(reversed_spec)
    np.testing.assert_array_equal(a.kernel.weights, b.kernel.weights)
    np.testing.assert_array_equal(a.bias, b.bias)

    carrier = BnParams(gamma=np.ones(4), beta=a.bias, mu=np.zeros(4), sigma=np.ones(4), epsilon=0.0)
    again = fuse_mtconv(MtConvSpec((MtConvBranch(a.kernel, carrier),)))
    np.testing.assert_array_equal(again.kernel.weights, a.kernel.weights)
    np.testing.assert_array_equal(again.bias, a.bias)


def test_branch_gamma_scales_its_contribution():
    rng = np.random.default_rng(6)
    spec = random_mtconv(rng, [3, 9], 4)
    small, large = spec.branches
    scaled_bn = BnParams(small.bn.gamma * 2.5, small.bn.beta, small.bn.mu, small.bn.sigma, small.bn.epsilon)
    scaled = MtConvSpec((MtConvBranch(small.kernel, scaled_bn), large))
    only_large = fuse_mtconv(MtConvSpec((large,))).kernel.weights
    base = fuse_mtconv(spec).kernel.weights - only_large
    bigger = fuse_mtconv(scaled).kernel.weights - only_large
    np.testing.assert_allclose(bigger, 2.5 * base, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------------------
# fuse_model


def _randomize_bn(model, rng):
    for name, arr in model.params.items():
        if name.endswith(".gamma"):
            arr[...] = rng.uniform(0.8, 1.2, arr.shape)
        elif name.endswith(".beta") or name.endswith(".mu"):
            arr[...] = rng.uniform(-0.1, 0.1, arr.shape)
        elif name.endswith(".sigma"):
            arr[...] = rng.uniform(0.8, 1.2, arr.shape)


def test_fused_model_has_base_layout_and_counts():
    mt = build_model("TENet12", DepthwiseKind.mtconv((3, 5, 7, 9)), seed=1)
    fused = fuse_model(mt)
    base = make_spec("TENet12")
    assert param_shapes(fused.spec) == param_shapes(base)
    assert list(fused.params) == list(param_shapes(base))
    assert fused.spec == base
    assert count_report(fused) == count_report(base)
    assert sum(a.size for a in fused.params.values()) == sum(a.size for a in build_model("TENet12").params.values())


def _calibrate(model, x):
    """Set every running mean and std to the statistics of batch x."""
    stats = {}
    Network(model.spec).forward(model.params, x, train=True, stats=stats)
    for prefix, (mean, var) in stats.items():
        model.params[f"{prefix}.bn.mu"][...] = mean
        model.params[f"{prefix}.bn.sigma"][...] = np.sqrt(var)


def test_fused_model_logits_match():
    rng = np.random.default_rng(7)
    mt64 = build_model("TENet12", DepthwiseKind.mtconv((3, 5, 7, 9)), seed=2).astype(np.float64)
    _randomize_bn(mt64, rng)
    _calibrate(mt64, rng.normal(size=(64, 98, 40)))
    mt = mt64.astype(np.float32)
    fused = fuse_model(mt)
    x = rng.normal(size=(100, 98, 40)).astype(np.float32)

    a = forward_batch(mt, x)
    b = forward_batch(fused, x)
    assert np.max(np.abs(a)) < 100.0
    assert np.max(np.abs(a - b)) <= 1e-5
    assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))

    fused64 = fuse_model(mt64)
    x64 = x[:5].astype(np.float64)
    assert np.max(np.abs(forward_batch(mt64, x64) - forward_batch(fused64, x64))) <= 1e-10


def test_fusing_standard_model_is_a_copy():
    std = build_model("TENet6-narrow", seed=3)
    out = fuse_model(std)
    assert out.spec == std.spec
    assert all(np.array_equal(out.params[k], std.params[k]) for k in std.params)
    out.params["head.b"][0] += 1.0
    assert std.params["head.b"][0] != out.params["head.b"][0]
