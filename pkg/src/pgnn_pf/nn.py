"""Small numpy neural-network engine: dense layers, losses, Adam, gradient checks.

Batches are row-major, shape ``(batch, features)``.  Loss convention: squared
error summed within a sample and averaged over the batch, so a batch gradient is
the mean of per-sample gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "Adam",
    "DenseLayer",
    "LossWeights",
    "Mlp",
    "dense_backward",
    "dense_forward",
    "grad_check",
    "load_arrays",
    "multitask_loss",
    "save_arrays",
    "sq_loss",
]

ACTIVATIONS = ("tanh", "identity")


@dataclass(eq=False)
class DenseLayer:
    w: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.bias.shape != (self.w.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight {self.w.shape}")

    @classmethod
    def glorot(cls, n_in: int, n_out: int, rng: np.random.Generator, activation="tanh",
               zero: bool = False) -> DenseLayer:
        if zero:
            w = np.zeros((n_out, n_in))
        else:
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_out, n_in))
        return cls(w, np.zeros(n_out), activation)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.w, self.bias]


def dense_forward(layer: DenseLayer, x: np.ndarray):
    """Return ``(sigma(x W^T + b), cache)``; ``x`` is a vector or a batch of rows."""
    if x.shape[-1] != layer.w.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != layer fan-in {layer.w.shape[1]}")
    z = x @ layer.w.T + layer.bias
    out = np.tanh(z) if layer.activation == "tanh" else z
    return out, (x, out)


def dense_backward(layer: DenseLayer, cache, upstream: np.ndarray):
    """Return ``(input_grad, [dW, db])``; parameter grads are summed over batch rows."""
    x, out = cache
    dz = upstream * (1.0 - out * out) if layer.activation == "tanh" else upstream
    if dz.ndim == 1:
        dw = np.outer(dz, x)
        db = dz.copy()
    else:
        dw = dz.T @ x
        db = dz.sum(axis=0)
    return dz @ layer.w, [dw, db]


class Mlp:
    """Stack of dense layers: tanh hidden layers, identity output."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)

    @classmethod
    def build(cls, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator,
              zero_last: bool = False) -> Mlp:
        if not hidden:
            raise ValueError("at least one hidden layer is required")
        sizes = [n_in, *hidden, n_out]
        layers = [DenseLayer.glorot(a, b, rng) for a, b in zip(sizes[:-2], sizes[1:-1])]
        layers.append(DenseLayer.glorot(sizes[-2], n_out, rng, "identity", zero=zero_last))
        return cls(layers)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_in(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].w.shape[0]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = dense_forward(layer, x)
            caches.append(c)
        return x, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, caches, upstream):
        grads = []
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            upstream, g = dense_backward(layer, c, upstream)
            grads = g + grads
        return upstream, grads


def sq_loss(pred: np.ndarray, target: np.ndarray):
    """Squared error. Vector: ``sum(d**2)``, grad ``2d``. Batch: mean over rows of that."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    if d.ndim == 1:
        return float(d @ d), 2.0 * d
    n = d.shape[0]
    return float(np.sum(d * d) / n), (2.0 / n) * d


@dataclass(frozen=True)
class LossWeights:
    alpha_sup: float = 1.0
    alpha_unsup: float = 0.1

    def __post_init__(self):
        if self.alpha_sup < 0 or self.alpha_unsup < 0 or self.alpha_sup + self.alpha_unsup <= 0:
            raise ValueError("loss weights must be nonnegative with a positive sum")


def multitask_loss(v_pred, v_tgt, s_pred, s_tgt, w: LossWeights):
    """Weighted voltage + injection loss; returns ``(total, sup, unsup, grad_v, grad_s)``."""
    sup, gv = sq_loss(v_pred, v_tgt)
    unsup, gs = sq_loss(s_pred, s_tgt)
    total = w.alpha_sup * sup + w.alpha_unsup * unsup
    return total, sup, unsup, w.alpha_sup * gv, w.alpha_unsup * gs


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_check(fn: Callable, params: Sequence[np.ndarray], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-7) -> float:
    """Worst entrywise relative error between analytic and central-difference gradients.

    ``fn()`` must evaluate the loss at the current contents of ``params`` and
    return ``(loss, grads)``.  Entries are perturbed in place and restored.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, analytic = fn()
    analytic = [np.array(g, dtype=float, copy=True) for g in analytic]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        af = a.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = fn()[0]
            flat[i] = old - eps
            fm = fn()[0]
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """npz container: named arrays plus a JSON metadata record."""
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_arrays(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    return arrays, meta
