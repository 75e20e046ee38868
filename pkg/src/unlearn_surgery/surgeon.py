"""One-shot unlearning by gradient surgery, plus the ascent and retrain baselines.

Each step ascends the forget-batch loss, after removing from that gradient
its component along the gradient of a freshly sampled retain batch. To
first order, the step then leaves the retain loss where it was.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSplit
from .diffcore import Adam
from .errors import NumericalError
from .vae import TrainConfig, VaeArch, VaeModel, train

log = logging.getLogger(__name__)


class DegenerateRetainGradient(UserWarning):
    """Retain gradient norm below tolerance; projection skipped."""


@dataclass
class GradientPair:
    g_f: np.ndarray
    g_r: np.ndarray
    dot: float = field(init=False)
    cos: float = field(init=False)

    def __post_init__(self):
        self.dot = float(self.g_f @ self.g_r)
        denom = np.linalg.norm(self.g_f) * np.linalg.norm(self.g_r)
        self.cos = self.dot / denom if denom > 0 else 0.0


def project_gradient(g_f, g_r, projection: str = "always", tol_zero: float = 1e-12) -> np.ndarray:
    """Remove from ``g_f`` its component along ``g_r``.

    With ``projection="on_conflict"`` the projection only happens when
    ``g_f . g_r < 0``. A retain gradient with norm ``<= tol_zero`` leaves
    ``g_f`` unchanged and emits :class:`DegenerateRetainGradient`.
    """
    if projection not in ("always", "on_conflict", "none"):
        raise ValueError(f"unknown projection mode {projection!r}")
    g_f = np.asarray(g_f, dtype=np.float64)
    g_r = np.asarray(g_r, dtype=np.float64)
    if projection == "none":
        return g_f.copy()
    rr = g_r @ g_r
    if np.sqrt(rr) <= tol_zero:
        warnings.warn("retain gradient is degenerate; projection skipped", DegenerateRetainGradient,
                      stacklevel=2)
        return g_f.copy()
    dot = g_f @ g_r
    if projection == "on_conflict" and dot >= 0:
        return g_f.copy()
    out = g_f - (dot / rr) * g_r
    # one refinement pass cleans up cancellation error when g_f is nearly parallel to g_r
    out -= ((out @ g_r) / rr) * g_r
    return out


@dataclass
class UnlearnConfig:
    lr: float = 5e-4
    epochs: int = 1
    retain_batch: int = 256
    forget_batch: int = 64
    mode: str = "surgery"  # surgery | ascent
    projection: str = "always"  # always | on_conflict
    loss: str = "elbo"  # elbo | recon : the forget objective that is ascended
    optimizer: str = "sgd"  # sgd | adam
    params: str = "all"  # all | decoder : which parameters the update may touch
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("surgery", "ascent"):
            raise ValueError(f"mode must be surgery or ascent, got {self.mode!r}")
        if self.projection not in ("always", "on_conflict"):
            raise ValueError(f"projection must be always or on_conflict, got {self.projection!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.params not in ("all", "decoder"):
            raise ValueError(f"params must be all or decoder, got {self.params!r}")


@dataclass
class StepRecord:
    step: int
    dot_before: float
    dot_after: float
    gf_norm: float
    gr_norm: float
    loss_f: float
    loss_r: float
    wall_ms: float


@dataclass
class UnlearnTrace:
    method: str
    steps: list[StepRecord] = field(default_factory=list)
    wall_seconds: float = 0.0
    degenerate_steps: int = 0
    aborted: bool = False

    def to_jsonl(self, path, config_hash: str | None = None):
        with open(path, "w") as fh:
            for rec in self.steps:
                row = asdict(rec)
                if config_hash is not None:
                    row["config_hash"] = config_hash
                fh.write(json.dumps(row) + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def _unlearn(model: VaeModel, split: DatasetSplit, cfg: UnlearnConfig, project: bool):
    forget = split.forget_images
    retain = split.retain_images
    if forget.shape[0] == 0 or retain.shape[0] == 0:
        raise ValueError("forget and retain sets must be non-empty")
    out = model.copy()
    if cfg.lr == 0:
        return out, UnlearnTrace(cfg.mode)
    trace = UnlearnTrace("surgery" if project else "ascent")
    decoder_only = cfg.params == "decoder"
    # the update (and the projection) live on this slice of the parameter vector
    sl = slice(out.encoder.n_params, None) if decoder_only else slice(None)
    theta = out.params[sl]
    opt = Adam(theta.size, cfg.lr) if cfg.optimizer == "adam" else None
    rng = np.random.default_rng([cfg.seed, 11])
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(forget.shape[0])
        for start in range(0, forget.shape[0], cfg.forget_batch):
            ts = time.perf_counter()
            fb = forget[order[start:start + cfg.forget_batch]]
            rb = retain[rng.choice(retain.shape[0], min(cfg.retain_batch, retain.shape[0]),
                                   replace=False)]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is handled just below
                loss_f, grad_f = out.loss_and_grad(fb, cfg.loss, seed=[cfg.seed, 12, step],
                                                   decoder_only=decoder_only)
                loss_r, g_r = out.loss_and_grad(rb, "elbo", seed=[cfg.seed, 13, step],
                                                decoder_only=decoder_only)
            if not (np.isfinite(loss_r) and np.isfinite(loss_f)):
                log.warning("unlearning diverged at step %d; returning last finite model", step)
                trace.aborted = True
                break
            # descent on the negative forget loss == ascent on the forget loss
            g_f = -grad_f[sl]
            g_r = g_r[sl]
            dot_before = float(g_f @ g_r)
            if project:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", DegenerateRetainGradient)
                    g_f = project_gradient(g_f, g_r, cfg.projection)
                trace.degenerate_steps += len(caught)
            if opt is None:
                theta -= cfg.lr * g_f
            else:
                opt.step(theta, g_f)
            trace.steps.append(StepRecord(
                step=step,
                dot_before=dot_before,
                dot_after=float(g_f @ g_r),
                gf_norm=float(np.linalg.norm(g_f)),
                gr_norm=float(np.linalg.norm(g_r)),
                loss_f=float(loss_f),
                loss_r=float(loss_r),
                wall_ms=(time.perf_counter() - ts) * 1e3,
            ))
            step += 1
        if trace.aborted:
            break
    trace.wall_seconds = time.perf_counter() - t0
    if trace.aborted and not np.all(np.isfinite(out.params)):
        raise NumericalError("unlearning produced non-finite parameters")
    out.train_meta = dict(model.train_meta, unlearn={**asdict(cfg), "method": trace.method},
                          wall_seconds=trace.wall_seconds)
    return out, trace


def one_shot_unlearn(model: VaeModel, split: DatasetSplit, cfg: UnlearnConfig):
    """Gradient-surgery unlearning; returns ``(unlearned_model, trace)``.

    The ascent baseline is selected with ``cfg.mode="ascent"``.
    """
    return _unlearn(model, split, cfg, project=cfg.mode == "surgery")


def gradient_ascent_unlearn(model: VaeModel, split: DatasetSplit, cfg: UnlearnConfig):
    """Same loop and step size as :func:`one_shot_unlearn`, without projection."""
    return _unlearn(model, split, cfg, project=False)


def retrain_oracle(arch: VaeArch, split: DatasetSplit, train_cfg: TrainConfig) -> VaeModel:
    """Train from scratch on the retain set only."""
    model = train(arch, split.retain_images, train_cfg,
                  dataset_id=f"{split.all.source_id}/retain")
    model.train_meta["gold_standard"] = True
    return model
