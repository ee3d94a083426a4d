"""Dense-network kernel: layers with hand-written backward passes, Adam, RNG.

Tensors are plain float64 ``numpy.ndarray`` objects. Batches are row-major,
one example per row.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, TrainingError

ACTIVATIONS = ("identity", "relu", "sigmoid")


class Rng:
    """Seeded random stream backed by the Philox-4x64 counter-based generator.

    ``Rng(seed)`` and ``Rng(seed).child(k)`` give independent, reproducible
    streams; the key is derived from ``SeedSequence(seed, spawn_key=(k,))``.
    Normal deviates use numpy's ziggurat sampler on top of the Philox bits.
    """

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, k: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(k),))

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, low, high, shape=None) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def integers(self, low, high_inclusive, shape=None):
        return self.gen.integers(low, high_inclusive, size=shape, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


def standard_normal(rng: Rng, n: int) -> np.ndarray:
    return rng.normal(int(n))


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class DenseLayer:
    """``activation(x @ W.T + b)`` with ``W`` of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(
                f"weight shape {self.W.shape} inconsistent with bias shape {self.b.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_size(self) -> int:
        return self.W.shape[1]

    @property
    def out_size(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: Rng) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-limit, limit, (n_out, n_in))
        return cls(W, np.zeros(n_out), activation)

    def _check(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_size:
            raise DimensionError(
                f"input shape {x.shape} does not match layer weights {self.W.shape} "
                f"(expected (batch, {self.in_size}))"
            )

    def preactivation(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return x @ self.W.T + self.b

    def activate(self, a: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(a, 0.0)
        if self.activation == "sigmoid":
            return _sigmoid(a)
        return a

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.activate(self.preactivation(x))

    def activation_grad(self, out, upstream):
        """Map d(loss)/d(output) to d(loss)/d(preactivation) using the output values."""
        if self.activation == "relu":
            return upstream * (out > 0.0)
        if self.activation == "sigmoid":
            return upstream * out * (1.0 - out)
        return upstream

    def linear_backward(self, x, d):
        """``(grad_W, grad_b, grad_x)`` from the gradient at the preactivation."""
        return d.T @ x, d.sum(axis=0), d @ self.W

    def backward(self, x, out, upstream):
        """Gradients given the input ``x`` and this layer's output ``out``.

        Returns ``(grad_W, grad_b, grad_x)``.
        """
        if upstream.shape != out.shape:
            raise DimensionError(
                f"upstream gradient shape {upstream.shape} does not match output shape {out.shape}"
            )
        return self.linear_backward(x, self.activation_grad(out, upstream))

    def params(self):
        return [self.W, self.b]


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = layer.forward(_as_batch(x))
    return out[0] if x.ndim == 1 else out


def dense_backward(layer: DenseLayer, x, upstream_grad):
    """Recompute the forward pass and return ``(grad_W, grad_b, grad_x)``."""
    x = np.asarray(x, dtype=np.float64)
    xb = _as_batch(x)
    up = _as_batch(np.asarray(upstream_grad, dtype=np.float64))
    gW, gb, gx = layer.backward(xb, layer.forward(xb), up)
    return gW, gb, (gx[0] if x.ndim == 1 else gx)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    name: str = "param"

    @classmethod
    def like(cls, param, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise DimensionError(
            f"{state.name}: gradient shape {grads.shape} vs parameter shape {params.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient in parameter block {state.name}", state.name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class Adam:
    """Adam over a fixed list of named parameter arrays (updated in place)."""

    params: list
    names: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list = field(init=False)

    def __post_init__(self):
        self.states = [
            AdamState.like(p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, name=n)
            for p, n in zip(self.params, self.names)
        ]

    def step(self, grads):
        # validate every block before touching any of them
        for g, s in zip(grads, self.states):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter block {s.name}", s.name)
        for p, g, s in zip(self.params, grads, self.states):
            adam_step(p, g, s)


def finite_diff_grad(
    loss_fn: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``params`` is perturbed in place one coordinate at a time and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn(p)
        flat[i] = orig - eps
        lo = loss_fn(p)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise relative error; entries with ``|analytic| < floor`` compare absolutely."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.abs(a)
    small = denom < floor
    return np.where(small, np.abs(a - n), np.abs(a - n) / np.where(small, 1.0, denom))
