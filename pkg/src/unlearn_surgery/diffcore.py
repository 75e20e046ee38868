"""Small deterministic differentiation core for dense networks.

Parameters of every model live in one flat float64 vector. Layers read
their weights as views into that vector, and backward passes write into a
gradient vector with the same layout. On top of that sit a finite-difference
Hessian-vector product and a damped conjugate-gradient solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CgBreakdown, DimensionError, NumericalError

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def as_batch(x, dim: int | None = None) -> np.ndarray:
    """Return ``x`` as a 2-D float64 array, checking the feature dimension."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"expected a non-empty [n, d] batch, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise DimensionError(f"batch feature dim {x.shape[1]} != model input dim {dim}")
    return x


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act_forward(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name, pre, post, dout):
    if name == "tanh":
        return dout * (1.0 - post * post)
    if name == "relu":
        return dout * (pre > 0)
    if name == "sigmoid":
        return dout * post * (1.0 - post)
    return dout


@dataclass(frozen=True)
class Dense:
    """Affine layer ``y = x @ W + b`` backed by a slice of a flat vector."""

    in_dim: int
    out_dim: int
    offset: int = 0

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def unpack(self, params):
        w_end = self.offset + self.in_dim * self.out_dim
        W = params[self.offset:w_end].reshape(self.in_dim, self.out_dim)
        b = params[w_end:w_end + self.out_dim]
        return W, b

    def forward(self, params, x):
        W, b = self.unpack(params)
        return x @ W + b

    def backward(self, params, x, dy, grad):
        """Accumulate dW, db into ``grad`` and return dx."""
        W, _ = self.unpack(params)
        gW, gb = self.unpack(grad)
        gW += x.T @ dy
        gb += dy.sum(axis=0)
        return dy @ W.T


class Mlp:
    """Stack of dense layers with a hidden activation and a linear head.

    ``offset`` places the network inside a larger parameter vector, which is
    how the VAE packs encoder and decoder into one vector.
    """

    def __init__(self, dims: Sequence[int], activation: str = "tanh", offset: int = 0):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer dims {dims}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.dims = dims
        self.activation = activation
        self.offset = offset
        self.layers = []
        pos = offset
        for a, b in zip(dims[:-1], dims[1:]):
            layer = Dense(a, b, pos)
            self.layers.append(layer)
            pos += layer.n_params
        self.n_params = pos - offset

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def init_params(self, rng: np.random.Generator, out=None) -> np.ndarray:
        """Glorot-normal weights, zero biases."""
        if out is None:
            out = np.zeros(self.offset + self.n_params)
        for layer in self.layers:
            W, b = layer.unpack(out)
            std = np.sqrt(2.0 / (layer.in_dim + layer.out_dim))
            W[...] = rng.standard_normal(W.shape) * std
            b[...] = 0.0
        return out

    def forward(self, params, x):
        """Return (output, cache). The head is linear."""
        acts = [x]
        pres = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre = layer.forward(params, h)
            pres.append(pre)
            h = pre if i == last else _act_forward(self.activation, pre)
            acts.append(h)
        return h, (acts, pres)

    def features(self, params, x):
        """Activations of the last hidden layer (input itself if no hidden layer)."""
        _, (acts, _) = self.forward(params, x)
        return acts[-2]

    def backward(self, params, cache, dout, grad):
        """Accumulate parameter gradients into ``grad`` and return d(input)."""
        acts, pres = cache
        d = dout
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            if i != last:
                d = _act_backward(self.activation, pres[i], acts[i + 1], d)
            d = self.layers[i].backward(params, acts[i], d, grad)
        return d


# ---------------------------------------------------------------------------
# losses: each returns (mean loss over batch, d loss / d output)

def bernoulli_nll(logits, x):
    """Per-sample summed binary cross entropy with logits, averaged over batch."""
    n = logits.shape[0]
    per = np.maximum(logits, 0) - logits * x + np.log1p(np.exp(-np.abs(logits)))
    return per.sum() / n, (sigmoid(logits) - x) / n


def gaussian_nll(mean, x, std=1.0):
    n, d = mean.shape
    var = std * std
    r = mean - x
    per = 0.5 * (r * r).sum(axis=1) / var + 0.5 * d * np.log(2 * np.pi * var)
    return per.sum() / n, r / (var * n)


def mse(out, y):
    n = out.shape[0]
    r = out - y
    return 0.5 * (r * r).sum() / n, r / n


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].sum() / n
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


_LOSSES = {"mse": mse, "xent": softmax_xent}


class MlpModel:
    """An :class:`Mlp` with its parameters and a supervised loss.

    Used for the feature classifier and as a generic differentiable model in
    tests. ``batch`` is an ``(x, y)`` pair.
    """

    def __init__(self, net: Mlp, params: np.ndarray, loss: str = "mse"):
        self.net = net
        self.params = np.asarray(params, dtype=np.float64)
        self.loss = loss

    def loss_and_grad(self, batch, loss=None, params=None, seed=None):
        x, y = batch
        params = self.params if params is None else params
        x = as_batch(x, self.net.in_dim)
        out, cache = self.net.forward(params, x)
        value, dout = _LOSSES[loss or self.loss](out, y)
        grad = np.zeros_like(params)
        self.net.backward(params, cache, dout, grad)
        return value, grad


def compute_gradient(model, batch, loss=None, **kwargs) -> np.ndarray:
    """Mean-over-batch gradient of ``loss`` at the model's current parameters.

    ``model`` is anything exposing ``loss_and_grad(batch, loss=..., **kwargs)``.
    """
    value, grad = model.loss_and_grad(batch, loss=loss, **kwargs)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite loss/gradient (loss={value})")
    return grad


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, h=1e-6):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# curvature

@dataclass
class HvpOperator:
    """Implicit Hessian of a loss at ``theta``.

    ``grad_fn(theta) -> gradient`` must be deterministic (fixed batch, fixed
    reparameterization noise); the product is a central difference of it.
    """

    grad_fn: Callable[[np.ndarray], np.ndarray]
    theta: np.ndarray
    eps_fd: float = 1e-4
    n_calls: int = field(default=0, repr=False)

    @classmethod
    def for_model(cls, model, batch, loss=None, eps_fd=1e-4, **kwargs):
        def grad_fn(theta):
            return model.loss_and_grad(batch, loss=loss, params=theta, **kwargs)[1]

        return cls(grad_fn, np.array(model.params, dtype=np.float64), eps_fd)

    @property
    def dim(self):
        return self.theta.size

    def apply(self, v):
        return hvp(self, v)

    __call__ = apply


def hvp(op: HvpOperator, v) -> np.ndarray:
    """``H v`` by central differences of gradients with a norm-aware step."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != op.theta.shape:
        raise DimensionError(f"vector length {v.size} != parameter count {op.theta.size}")
    vnorm = np.linalg.norm(v)
    if vnorm < 1e-12:
        raise ValueError("hvp direction has (near-)zero norm")
    eps = op.eps_fd * (1.0 + np.linalg.norm(op.theta)) / vnorm
    op.n_calls += 1
    gp = op.grad_fn(op.theta + eps * v)
    gm = op.grad_fn(op.theta - eps * v)
    out = (gp - gm) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite Hessian-vector product; retry with larger eps_fd")
    return out


def explicit_hessian(grad_fn, theta, h=1e-5) -> np.ndarray:
    """Dense Hessian built column by column from central differences of gradients.

    Symmetrized. Only for small parameter counts (validation oracle).
    """
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    H = np.empty((d, d))
    for i in range(d):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += h
        tm[i] -= h
        H[:, i] = (grad_fn(tp) - grad_fn(tm)) / (2 * h)
    return 0.5 * (H + H.T)


@dataclass
class CgResult:
    x: np.ndarray
    residual: float  # relative: ||(H + damping I) x - b|| / ||b||
    iterations: int
    converged: bool
    damping: float


def cg_solve(op, b, damping: float = 1e-3, tol: float = 1e-6, max_iter: int = 100) -> CgResult:
    """Solve ``(H + damping I) x = b`` with conjugate gradients.

    ``op`` is an :class:`HvpOperator` or any callable returning ``H v``.
    Raises :class:`CgBreakdown` when a search direction has non-positive
    damped curvature.
    """
    if damping < 0:
        raise ValueError("damping must be >= 0")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CgResult(x, 0.0, 0, True, damping)

    def matvec(v):
        return op(v) + damping * v

    # solve for the unit-norm right-hand side; keeps search directions O(1)
    b = b / bnorm
    r = b.copy()
    p = r.copy()
    rr = r @ r
    best_x, best_res = x.copy(), 1.0
    it = 0
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        curv = p @ Ap
        if not np.isfinite(curv) or curv <= 0.0:
            raise CgBreakdown(
                f"non-positive curvature {curv:.3e} at iteration {it} (damping={damping})",
                best_x * bnorm, best_res, it,
            )
        alpha = rr / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        res = np.sqrt(rr_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    # recursive residual drifts from the true one; report the true value
    true_res = np.linalg.norm(matvec(best_x) - b)
    return CgResult(best_x * bnorm, float(true_res), it, bool(true_res <= tol), damping)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam over a flat parameter vector. ``step`` updates ``params`` in place."""

    def __init__(self, n, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def direction(self, grad):
        """Advance moments with ``grad`` and return the step (without lr)."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)

    def step(self, params, grad):
        params -= self.lr * self.direction(grad)
        return params
