"""Minimal numeric kernel: float64 matrices, CSR products, layer forward/backward
rules, and Adam.

Dense matrices are plain ``numpy.ndarray`` (float64, row-major); sparse matrices
are ``scipy.sparse.csr_array``. Every differentiable op returns its output
together with a closure implementing the exact reverse-mode rule. Gradients of
trainable parameters accumulate (+=) into ``ParamTensor.grad`` so that a tensor
touched from several places (e.g. an embedding table read by multiple encoders)
sums its contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import sparse

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray

LEAKY_SLOPE = 0.01

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def check_finite(a: Array, what: str = "array") -> Array:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def as_matrix(a) -> Array:
    """Coerce to a 2-D float64 array (vectors become single-row matrices)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={m.ndim}")
    return m


@dataclass
class ParamTensor:
    """Trainable matrix plus gradient and Adam moment estimates.

    All four arrays share one shape; `step_count` counts applied Adam updates
    (used for bias correction).
    """

    name: str
    value: Array
    grad: Array = field(init=False)
    adam_m: Array = field(init=False)
    adam_v: Array = field(init=False)
    step_count: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.value = as_matrix(self.value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[:] = 0.0


def glorot_init(rows: int, cols: int, seed) -> Array:
    """Uniform init in +-sqrt(6/(rows+cols)); `seed` is an int or a Generator."""
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"glorot_init needs positive dims, got {rows}x{cols}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


# ---------------------------------------------------------------------------
# Forward/backward ops. Each returns (output, backward) where backward maps the
# upstream gradient to the gradient w.r.t. the non-parameter input, after
# accumulating into any ParamTensor arguments.
# ---------------------------------------------------------------------------


def spmm(s: sparse.csr_array, d: Array) -> tuple[Array, Callable[[Array], Array]]:
    """CSR @ dense product; backward w.r.t. the dense input is s.T @ g."""
    if s.shape[1] != d.shape[0]:
        raise ShapeError(f"spmm shapes {s.shape} @ {d.shape} do not conform")
    out = s @ d

    def backward(g: Array) -> Array:
        return s.T @ g

    return out, backward


def affine(x: Array, w: ParamTensor, b: ParamTensor) -> tuple[Array, Callable[[Array], Array]]:
    """y = x @ w + b with broadcast bias row; grads accumulate into w, b."""
    if x.shape[1] != w.value.shape[0]:
        raise ShapeError(f"affine shapes {x.shape} @ {w.shape} do not conform")
    if b.value.shape != (1, w.value.shape[1]):
        raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
    y = x @ w.value
    y += b.value

    def backward(g: Array) -> Array:
        w.grad += x.T @ g
        b.grad += g.sum(axis=0, keepdims=True)
        return g @ w.value.T

    return y, backward


def matmul_param(x: Array, w: ParamTensor) -> tuple[Array, Callable[[Array], Array]]:
    """Bias-free variant of `affine` (linear projections, GCN weights)."""
    if x.shape[1] != w.value.shape[0]:
        raise ShapeError(f"matmul shapes {x.shape} @ {w.shape} do not conform")
    y = x @ w.value

    def backward(g: Array) -> Array:
        w.grad += x.T @ g
        return g @ w.value.T

    return y, backward


def stable_sigmoid(x: Array) -> Array:
    """Branching form: never exponentiates a positive argument."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Array, kind: str) -> tuple[Array, Callable[[Array], Array]]:
    """Elementwise nonlinearity; kind in {"relu", "sigmoid", "leaky_relu"}.

    ReLU's subgradient at 0 is taken as 0; LeakyReLU uses slope 0.01 on the
    non-positive branch.
    """
    if kind == "relu":
        y = np.maximum(x, 0.0)
        mask = x > 0

        def backward(g: Array) -> Array:
            return g * mask

    elif kind == "leaky_relu":
        slope = np.where(x > 0, 1.0, LEAKY_SLOPE)
        y = x * slope

        def backward(g: Array) -> Array:
            return g * slope

    elif kind == "sigmoid":
        y = stable_sigmoid(x)

        def backward(g: Array) -> Array:
            return g * y * (1.0 - y)

    else:
        raise ContractError(f"unknown activation kind {kind!r}")
    return y, backward


def bce_with_logits(logits: Array, labels: Array) -> tuple[float, Callable[[float], Array]]:
    """Mean binary cross-entropy in the overflow-free form.

    loss = mean(max(z, 0) - z*y + log(1 + exp(-|z|))); backward is
    (sigmoid(z) - y) / n scaled by the upstream scalar.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"logits shape {z.shape} != labels shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("labels must be in {0, 1}")
    if z.size == 0:
        raise ContractError("bce_with_logits on an empty batch")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.mean())
    n = z.size

    def backward(upstream: float = 1.0) -> Array:
        return upstream * (stable_sigmoid(z) - y) / n

    return loss, backward


def adam_step(params: Iterable[ParamTensor], lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update over `params`; zeroes grads afterwards."""
    for p in params:
        check_finite(p.grad, f"gradient of {p.name}")
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        g_scaled = g * (1.0 - beta1)
        p.adam_m += g_scaled
        p.adam_v *= beta2
        np.square(g, out=g_scaled)
        g_scaled *= 1.0 - beta2
        p.adam_v += g_scaled
        # update = lr_t * m / (sqrt(v) * c2 + eps) with the bias corrections
        # folded into the scalars lr_t and c2
        lr_t = lr / (1.0 - beta1 ** t)
        c2 = 1.0 / np.sqrt(1.0 - beta2 ** t)
        denom = np.sqrt(p.adam_v, out=g_scaled)
        denom *= c2
        denom += eps
        np.divide(p.adam_m, denom, out=denom)
        denom *= lr_t
        p.value -= denom
        p.zero_grad()


def scatter_add_rows(target: Array, rows: Array, values: Array) -> None:
    """target[rows] += values with duplicate row indices summed.

    Implemented as a one-hot CSR transpose product, which is much faster than
    np.add.at for the wide row batches the trainer produces.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return
    if rows.size < 256:
        np.add.at(target, rows, values)
        return
    n = rows.size
    onehot = sparse.csr_array(
        (np.ones(n), rows, np.arange(n + 1, dtype=np.int64)),
        shape=(n, target.shape[0]),
    )
    target += onehot.T @ values
