"""Central finite-difference verification of every backward pass.

Each check builds a small f64 layer, reduces its output to a scalar through
a fixed random projection, and compares the analytic input/parameter
gradients against (f(x+h) - f(x-h)) / 2h element by element. The error
reported per layer is max|a - n| / (max|a| + max|n| + tiny), which stays
meaningful when a gradient is legitimately zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .architectures import ArchitectureSpec, StageSpec, build
from .attention import ResidualBlock, SelfAttention3D
from .layers import FC, BatchNorm3D, Conv3D, MaxPool3D, softmax_crossentropy

DEFAULT_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.abs(analytic).max(initial=0.0) + np.abs(numeric).max(initial=0.0) + 1e-12
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def numerical_grad(f, arr: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to arr (mutated
    in place element by element, then restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def _projected_check(layer, x: np.ndarray, rng: np.random.Generator,
                     h: float = DEFAULT_STEP, mode: str = "train") -> float:
    """Relative error of the full (input + parameters) gradient of `layer`
    under loss = sum(forward(x) * R).

    The error is taken over the concatenated gradient vector: components
    whose true gradient is zero (e.g. a conv bias feeding a BatchNorm) would
    otherwise divide finite-difference noise by itself.
    """
    out = layer.forward(x, mode)
    r = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(layer.forward(x, mode) * r))

    for p in layer.params():
        p.zero_grad()
    layer.forward(x, mode)
    analytic_dx = layer.backward(r.astype(x.dtype))

    analytic = [analytic_dx.ravel()]
    numeric = [numerical_grad(loss, x, h).ravel()]
    for p in layer.params():
        analytic.append(p.grad.ravel().copy())
        numeric.append(numerical_grad(loss, p.data, h).ravel())
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def check_conv3d(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    errs = []
    for stride in (1, 2):
        layer = Conv3D("conv", 2, 3, kernel=3, stride=stride, dtype="f64", rng=rng)
        x = rng.normal(size=(2, 2, 4, 4, 4))
        errs.append(_projected_check(layer, x, rng, h))
    return max(errs)


def check_batchnorm3d(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    layer = BatchNorm3D("bn", 2, dtype="f64")
    layer.gamma_scale.data[...] = rng.normal(size=2)
    layer.beta.data[...] = rng.normal(size=2)
    x = rng.normal(size=(2, 2, 3, 3, 3))
    return _projected_check(layer, x, rng, h)


def check_fc(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    layer = FC("fc", 7, 5, dtype="f64", rng=rng)
    x = rng.normal(size=(4, 7))
    return _projected_check(layer, x, rng, h)


def check_maxpool3d(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    layer = MaxPool3D("pool")
    x = rng.normal(size=(2, 2, 4, 4, 4))
    return _projected_check(layer, x, rng, h)


def check_softmax_crossentropy(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    logits = rng.normal(size=(4, 2))
    labels = rng.integers(0, 2, size=4)
    _, analytic = softmax_crossentropy(logits, labels)
    numeric = numerical_grad(lambda: softmax_crossentropy(logits, labels)[0],
                             logits, h)
    return rel_error(analytic, numeric)


def check_self_attention(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    layer = SelfAttention3D("attn", 2, attn_channels=2, dtype="f64", rng=rng)
    x = rng.normal(size=(2, 2, 2, 2, 2))
    return _projected_check(layer, x, rng, h)


def check_residual_attention_block(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    block = ResidualBlock("block", 2, 3, stride=1, attention=True,
                          dtype="f64", rng=rng)
    block.attn.gamma.data[...] = 0.7  # exercise the attention path
    x = rng.normal(size=(2, 2, 3, 3, 3))
    return _projected_check(block, x, rng, h)


def micro_gradcheck_spec() -> ArchitectureSpec:
    """A 4-block network small enough for exhaustive whole-model checking."""
    return ArchitectureSpec("gradcheck-micro", 2, (
        StageSpec("res", 1, 2, 2),
        StageSpec("res", 1, 3, 1),
        StageSpec("res_att", 1, 4, 2),
        StageSpec("res_att", 1, 4, 1),
    ))


def check_micro_network(seed: int = 0, h: float = DEFAULT_STEP) -> float:
    """Exhaustive finite-difference check of a composed network, training
    loss end to end: every parameter coordinate and every input voxel."""
    rng = np.random.Generator(np.random.PCG64(seed))
    model = build(micro_gradcheck_spec(), seed=seed, dtype="f64")
    for layer in model.layers:
        for attn in (getattr(layer, "attn", None),):
            if attn is not None:
                attn.gamma.data[...] = 0.5
    x = rng.normal(size=(2, 1, 8, 8, 8))
    labels = rng.integers(0, 2, size=2)

    def loss():
        return softmax_crossentropy(model.forward(x, "train"), labels)[0]

    model.zero_grads()
    _, grad = softmax_crossentropy(model.forward(x, "train"), labels)
    analytic_dx = model.backward(grad)

    analytic = [analytic_dx.ravel()]
    numeric = [numerical_grad(loss, x, h).ravel()]
    for p in model.parameters():
        analytic.append(p.grad.ravel().copy())
        numeric.append(numerical_grad(loss, p.data, h).ravel())
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


@dataclass
class CheckRow:
    name: str
    max_rel_err: float
    passed: bool


ALL_CHECKS = (
    ("conv3d", check_conv3d),
    ("batchnorm3d", check_batchnorm3d),
    ("fc", check_fc),
    ("maxpool3d", check_maxpool3d),
    ("softmax_crossentropy", check_softmax_crossentropy),
    ("self_attention", check_self_attention),
    ("residual_attention_block", check_residual_attention_block),
    ("micro_network", check_micro_network),
)


def run_all(seed: int = 0, h: float = DEFAULT_STEP,
            threshold: float = DEFAULT_THRESHOLD) -> list[CheckRow]:
    rows = []
    for name, fn in ALL_CHECKS:
        err = fn(seed=seed, h=h)
        rows.append(CheckRow(name, err, err < threshold))
    return rows
