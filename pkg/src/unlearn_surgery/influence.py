"""Influence functions: parameter/loss influence, group conflict, second-order group term.

All routines work on an *objective*: an object with

* ``params``: the parameter vector the influence is evaluated at,
* ``n``: number of training samples,
* ``loss_grad(params, idx)``: mean per-sample loss gradient over ``idx``,
* ``risk_grad(params)``: gradient of the training objective (its Jacobian is H).

:class:`ConvexProbe` (ridge logistic regression, where H is truly positive
definite and leave-one-out retraining is well defined) and
:class:`VaeObjective` implement it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffcore import CgResult, HvpOperator, cg_solve, hvp, sigmoid
from .errors import NumericalError

log = logging.getLogger(__name__)


@dataclass
class InfluenceConfig:
    damping: float = 1e-3
    cg_tol: float = 1e-8
    cg_max_iter: int = 200
    eps_fd: float = 1e-4
    p: float | None = None  # forget fraction; computed from the forget set when None


def _indices(z):
    return np.atleast_1d(np.asarray(z, dtype=np.int64))


# ---------------------------------------------------------------------------
# objectives

class ConvexProbe:
    """L2-regularized logistic regression.

    Training objective ``(1/n) sum_i w_i l_i(theta) + lam/2 ||theta||^2`` with
    all ``w_i = 1``; leave-one-out sets one weight to zero so that removal is
    exactly an upweighting by ``-1/n``.
    """

    def __init__(self, X, y, lam: float = 1e-2, params=None):
        if lam <= 0:
            raise ValueError("probe regularizer must be > 0 for strict convexity")
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.lam = lam
        self.params = np.zeros(self.X.shape[1]) if params is None else np.asarray(params, float)

    @classmethod
    def synthetic(cls, n=200, d=20, lam=1e-2, seed=0, fit=True):
        rng = np.random.default_rng([seed, 31])
        X = rng.standard_normal((n, d))
        X[:, -1] = 1.0  # bias column
        w = rng.standard_normal(d)
        y = (rng.uniform(size=n) < sigmoid(X @ w * 0.8)).astype(float)
        probe = cls(X, y, lam)
        if fit:
            probe.fit()
        return probe

    @property
    def n(self):
        return self.X.shape[0]

    def losses(self, params, idx=None):
        X, y = (self.X, self.y) if idx is None else (self.X[_indices(idx)], self.y[_indices(idx)])
        m = X @ params
        return np.logaddexp(0.0, m) - y * m

    def loss_value(self, params, idx):
        return float(self.losses(params, idx).mean())

    def loss_grad(self, params, idx):
        idx = _indices(idx)
        X = self.X[idx]
        r = sigmoid(X @ params) - self.y[idx]
        return X.T @ r / idx.size

    def risk(self, params, weights=None):
        w = np.ones(self.n) if weights is None else weights
        return float(w @ self.losses(params) / self.n + 0.5 * self.lam * params @ params)

    def risk_grad(self, params, weights=None):
        w = np.ones(self.n) if weights is None else weights
        r = (sigmoid(self.X @ params) - self.y) * w
        return self.X.T @ r / self.n + self.lam * params

    # dense oracles ---------------------------------------------------------
    def sample_hessian(self, params, idx):
        """Mean analytic per-sample loss Hessian over ``idx`` (no regularizer)."""
        idx = _indices(idx)
        X = self.X[idx]
        s = sigmoid(X @ params)
        return (X * (s * (1 - s))[:, None]).T @ X / idx.size

    def risk_hessian(self, params, weights=None):
        w = np.ones(self.n) if weights is None else weights
        s = sigmoid(self.X @ params)
        return (self.X * (s * (1 - s) * w)[:, None]).T @ self.X / self.n + self.lam * np.eye(self.X.shape[1])

    def fit(self, weights=None, tol=1e-10, max_iter=100, params=None):
        """Damped Newton to gradient norm ``tol``; updates and returns ``params``."""
        theta = (self.params if params is None else params).copy()
        for _ in range(max_iter):
            g = self.risk_grad(theta, weights)
            if np.linalg.norm(g) <= tol:
                break
            step = np.linalg.solve(self.risk_hessian(theta, weights), g)
            t, f0 = 1.0, self.risk(theta, weights)
            # near the optimum risk differences drown in rounding; take full steps
            while (np.linalg.norm(g) > 1e-6 and t > 1e-8
                   and self.risk(theta - t * step, weights) > f0 - 0.25 * t * (g @ step)):
                t *= 0.5
            theta = theta - t * step
        else:
            if np.linalg.norm(self.risk_grad(theta, weights)) > tol:
                raise NumericalError("probe Newton solve did not converge")
        if params is None:
            self.params = theta
        return theta


class VaeObjective:
    """Negative ELBO of a VAE over a fixed dataset with per-sample frozen noise.

    Noise is tied to the sample index, so the gradient over a group equals
    the mean of the per-sample gradients regardless of batching.
    ``hessian_idx`` restricts the training objective (and so H) to a subsample.
    """

    def __init__(self, model, data, seed=0, loss="elbo", hessian_idx=None):
        self.model = model
        self.data = np.asarray(data, dtype=np.float64)
        self.params = model.params
        self.loss = loss
        self.eps = np.random.default_rng([seed, 41]).standard_normal(
            (self.data.shape[0], model.arch.latent_dim))
        self.hessian_idx = np.arange(self.data.shape[0]) if hessian_idx is None else _indices(hessian_idx)

    @property
    def n(self):
        return self.data.shape[0]

    def loss_grad(self, params, idx):
        idx = _indices(idx)
        return self.model.loss_and_grad(self.data[idx], self.loss, params=params, eps=self.eps[idx])[1]

    def loss_value(self, params, idx):
        idx = _indices(idx)
        return self.model.loss_and_grad(self.data[idx], self.loss, params=params, eps=self.eps[idx])[0]

    def risk_grad(self, params):
        return self.loss_grad(params, self.hessian_idx)


# ---------------------------------------------------------------------------
# influence

def hessian_operator(obj, eps_fd=1e-4) -> HvpOperator:
    return HvpOperator(obj.risk_grad, np.array(obj.params, dtype=np.float64), eps_fd)


def _solve(obj, b, cfg: InfluenceConfig, op=None) -> CgResult:
    op = op or hessian_operator(obj, cfg.eps_fd)
    return cg_solve(op, b, damping=cfg.damping, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)


def inverse_hvp(obj, b, cfg: InfluenceConfig = InfluenceConfig()) -> CgResult:
    """``(H + damping I)^{-1} b`` by CG."""
    return _solve(obj, b, cfg)


def influence_up_param(obj, z, cfg: InfluenceConfig = InfluenceConfig()):
    """``-H^{-1} grad L(z)``; returns ``(vector, cg_result)``."""
    g = obj.loss_grad(obj.params, z)
    res = _solve(obj, g, cfg)
    return -res.x, res


def influence_up_loss(obj, z, z_prime, cfg: InfluenceConfig = InfluenceConfig()):
    """``grad L(z')^T H^{-1} grad L(z)``; returns ``(value, cg_result)``."""
    g = obj.loss_grad(obj.params, z)
    res = _solve(obj, g, cfg)
    return float(obj.loss_grad(obj.params, z_prime) @ res.x), res


def summed_gradient(obj, forget):
    idx = _indices(forget)
    return obj.loss_grad(obj.params, idx) * idx.size


def group_conflict(obj, forget, z_prime) -> float:
    """``grad L(z')^T sum_{z in forget} grad L(z)``; no Hessian involved.

    ``z_prime`` may be an index set, in which case its mean gradient is used.
    """
    forget = _indices(forget)
    if forget.size == 0:
        raise ValueError("forget set must be non-empty")
    return float(obj.loss_grad(obj.params, z_prime) @ summed_gradient(obj, forget))


def second_order_group_influence(obj, forget, cfg: InfluenceConfig = InfluenceConfig()):
    """``A H^{-1} sum grad L`` with ``A v = p/(1-p) (v - H^{-1} H_f v)``.

    ``H_f`` is the mean per-sample loss Hessian over the forget set. Returns
    ``(vector, [cg_result_1, cg_result_2])``.
    """
    forget = _indices(forget)
    p = cfg.p if cfg.p is not None else forget.size / obj.n
    if not 0 < p < 1:
        raise ValueError(f"forget fraction must lie in (0, 1), got {p}")
    op = hessian_operator(obj, cfg.eps_fd)
    first = _solve(obj, summed_gradient(obj, forget), cfg, op)
    v = first.x
    if not np.any(v):
        return np.zeros_like(v), [first]
    forget_op = HvpOperator(lambda th: obj.loss_grad(th, forget), op.theta, cfg.eps_fd)
    second = _solve(obj, hvp(forget_op, v), cfg, op)
    return p / (1 - p) * (v - second.x), [first, second]


def loo_retrain_oracle(probe: ConvexProbe, z, tol=1e-10) -> np.ndarray:
    """``theta_LOO - theta_hat`` from an exact Newton refit without sample(s) ``z``."""
    w = np.ones(probe.n)
    w[_indices(z)] = 0.0
    theta = probe.fit(weights=w, tol=tol, params=probe.params)
    return theta - probe.params


# ---------------------------------------------------------------------------
# audits

@dataclass
class PairRecord:
    z_id: list
    zprime_id: list
    conflict: float
    conflict_projected: float
    loss_influence: float | None = None
    residual: float | None = None
    error: str | None = None


def influence_audit(obj, forget, retain, n_pairs=100, forget_batch=32, zprime_batch=1,
                    seed=0, cfg: InfluenceConfig | None = None) -> dict:
    """Sample (forget-batch, z') pairs and report group conflict before/after projection.

    With ``cfg`` given, a damped CG loss influence is also computed per pair;
    CG failures are recorded per pair instead of aborting the audit.
    """
    from .surgeon import project_gradient

    if n_pairs < 1:
        raise ValueError("pair budget must be >= 1")
    forget, retain = _indices(forget), _indices(retain)
    rng = np.random.default_rng([seed, 51])
    op = hessian_operator(obj, cfg.eps_fd) if cfg is not None else None
    records = []
    failures = 0
    for _ in range(n_pairs):
        fb = rng.choice(forget, min(forget_batch, forget.size), replace=False)
        zp = rng.choice(retain, min(zprime_batch, retain.size), replace=False)
        gsum = summed_gradient(obj, fb)
        gz = obj.loss_grad(obj.params, zp)
        rec = PairRecord(fb.tolist(), zp.tolist(), float(gz @ gsum),
                         float(gz @ project_gradient(gsum, gz)))
        if cfg is not None:
            try:
                res = _solve(obj, gsum, cfg, op)
                rec.loss_influence = float(gz @ res.x)
                rec.residual = res.residual
            except NumericalError as exc:
                failures += 1
                rec.error = str(exc)
        records.append(rec)
    before = np.array([abs(r.conflict) for r in records])
    after = np.array([abs(r.conflict_projected) for r in records])
    return {
        "n_pairs": n_pairs,
        "failures": failures,
        "mean_abs_conflict": float(before.mean()),
        "mean_abs_conflict_projected": float(after.mean()),
        "records": records,
    }


def probe_validation_suite(probe: ConvexProbe, n_pairs=50, n_param=20, seed=0,
                           cfg: InfluenceConfig | None = None) -> dict:
    """Leave-one-out checks of the influence estimates on a convex probe."""
    cfg = cfg or InfluenceConfig(damping=0.0, cg_tol=1e-10, cg_max_iter=500)
    rng = np.random.default_rng([seed, 61])
    n = probe.n
    predicted, actual = [], []
    for _ in range(n_pairs):
        z, zp = rng.choice(n, 2, replace=False)
        val, _ = influence_up_loss(probe, z, zp, cfg)
        shifted = probe.params + loo_retrain_oracle(probe, z)
        predicted.append(val / n)
        actual.append(probe.loss_value(shifted, zp) - probe.loss_value(probe.params, zp))
    cosines = []
    for z in rng.choice(n, n_param, replace=False):
        est = -influence_up_param(probe, z, cfg)[0] / n
        shift = loo_retrain_oracle(probe, z)
        cosines.append(float(est @ shift / (np.linalg.norm(est) * np.linalg.norm(shift))))
    forget = rng.choice(n, max(2, n // 10), replace=False)
    got, _ = second_order_group_influence(probe, forget, cfg)
    H = probe.risk_hessian(probe.params)
    v = np.linalg.solve(H, probe.loss_grad(probe.params, forget) * forget.size)
    p = forget.size / n
    dense = p / (1 - p) * (v - np.linalg.solve(H, probe.sample_hessian(probe.params, forget) @ v))
    return {
        "loss_pearson_r": float(np.corrcoef(predicted, actual)[0, 1]),
        "param_cosine_min": float(min(cosines)),
        "param_cosine_mean": float(np.mean(cosines)),
        "second_order_rel_err": float(np.linalg.norm(got - dense) / np.linalg.norm(dense)),
    }
