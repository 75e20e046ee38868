"""Evaluation: feature ratio, Frechet distance and score proxies, reports.

The utility metrics reuse the task classifier in place of an Inception
network, so they are reported as ``fd_proxy`` / ``score_proxy`` and are not
comparable to published FID/IS numbers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import checkpoint
from .data import LabeledDataset
from .diffcore import Adam, Mlp, MlpModel, as_batch, softmax
from .errors import CheckpointError, ClassifierGateError, DataError, NumericalError
from .vae import VaeModel, generate

log = logging.getLogger(__name__)

ACCURACY_BAR = 0.95


@dataclass
class FeatureClassifier:
    net: Mlp
    params: np.ndarray
    classes: tuple[int, ...]
    target: int
    accuracy: float
    meta: dict = field(default_factory=dict)

    @property
    def feature_dim(self):
        return self.net.dims[-2]

    @property
    def target_index(self):
        return self.classes.index(self.target)

    def posterior(self, x):
        out, _ = self.net.forward(self.params, as_batch(x, self.net.in_dim))
        return softmax(out)

    def features(self, x):
        return self.net.features(self.params, as_batch(x, self.net.in_dim))

    def predict(self, x):
        """Predicted original class labels."""
        return np.asarray(self.classes)[self.posterior(x).argmax(axis=1)]

    def check_gate(self):
        if not self.accuracy >= ACCURACY_BAR:
            raise ClassifierGateError(self.accuracy, ACCURACY_BAR)

    def save(self, path, extra=None):
        desc = {
            "kind": "classifier",
            "dims": self.net.dims,
            "activation": self.net.activation,
            "classes": list(self.classes),
            "target": self.target,
            "accuracy": self.accuracy,
            "meta": self.meta,
        }
        if extra:
            desc.update(extra)
        return checkpoint.save(path, desc, self.params)

    @classmethod
    def load(cls, path):
        desc, params = checkpoint.load(path)
        if desc.get("kind") != "classifier":
            raise CheckpointError(f"{path} holds a {desc.get('kind')!r} checkpoint, not a classifier")
        clf = cls(Mlp(desc["dims"], desc["activation"]), params, tuple(desc["classes"]),
                  desc["target"], desc["accuracy"], desc.get("meta", {}))
        clf.descriptor = desc
        return clf


def train_feature_classifier(data: LabeledDataset, target: int, hidden=(128, 32), epochs=30,
                             lr=1e-3, batch_size=64, seed=0, restarts=3,
                             holdout=0.2) -> FeatureClassifier:
    """Train a dense softmax classifier over ``data``'s classes, with restarts until held-out accuracy >= 0.95."""
    classes = tuple(data.classes)
    if len(classes) < 2 or target not in classes:
        raise DataError(f"classifier needs >= 2 classes including target {target}; got {classes}")
    y_all = np.searchsorted(classes, data.labels)
    rng = np.random.default_rng([seed, 21])
    order = rng.permutation(len(data))
    n_hold = max(1, int(round(holdout * len(data))))
    hold, fit = order[:n_hold], order[n_hold:]
    if np.unique(y_all[hold]).size < len(classes) or np.unique(y_all[fit]).size < len(classes):
        raise DataError("every class must appear in both the fit and held-out splits")
    x = np.asarray(data.images, dtype=np.float64)
    net = Mlp([x.shape[1], *hidden, len(classes)], "relu")
    best = None
    for attempt in range(restarts):
        params = net.init_params(np.random.default_rng([seed, 22, attempt]))
        model = MlpModel(net, params, "xent")
        opt = Adam(params.size, lr)
        for epoch in range(epochs):
            perm = np.random.default_rng([seed, 23, attempt, epoch]).permutation(fit)
            for start in range(0, perm.size, batch_size):
                idx = perm[start:start + batch_size]
                _, grad = model.loss_and_grad((x[idx], y_all[idx]))
                opt.step(params, grad)
        out, _ = net.forward(params, x[hold])
        acc = float((out.argmax(axis=1) == y_all[hold]).mean())
        log.info("classifier attempt %d held-out accuracy %.4f", attempt, acc)
        if best is None or acc > best[1]:
            best = (params.copy(), acc)
        if acc >= ACCURACY_BAR:
            break
    params, acc = best
    clf = FeatureClassifier(net, params, classes, int(target), acc,
                            {"seed": seed, "epochs": epochs, "source_id": data.source_id})
    if acc < ACCURACY_BAR:
        err = ClassifierGateError(acc, ACCURACY_BAR)
        err.classifier = clf
        raise err
    return clf


# ---------------------------------------------------------------------------
# privacy

def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    res = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(res.low), float(res.high)


def target_fraction(samples, clf: FeatureClassifier) -> tuple[float, int]:
    clf.check_gate()
    hits = int((clf.predict(samples) == clf.target).sum())
    return hits / len(samples), hits


def feature_ratio(model: VaeModel, clf: FeatureClassifier, n: int = 10000, seed: int = 0) -> float:
    """Fraction of ``n`` generated samples classified as the target feature."""
    ratio, _ = target_fraction(generate(model, n, seed), clf)
    return ratio


# ---------------------------------------------------------------------------
# utility

def gaussian_stats(feats):
    feats = np.asarray(feats, dtype=np.float64)
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def _psd_sqrt(S, clamp):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    scale = max(abs(w).max(), 1e-300)
    if w.min() < -clamp * scale - 1e-12:
        raise NumericalError(f"covariance not PSD (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def frechet_distance(mu1, sigma1, mu2, sigma2, clamp: float = 1e-10) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``Tr((S1 S2)^{1/2})`` is computed as the sum of square roots of the
    eigenvalues of ``S1^{1/2} S2 S1^{1/2}``, which is symmetric PSD.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    s1 = _psd_sqrt(sigma1, clamp)
    M = s1 @ sigma2 @ s1
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    scale = max(abs(w).max(), 1e-300)
    if w.min() < -clamp * scale - 1e-12:
        raise NumericalError(f"S1^1/2 S2 S1^1/2 not PSD (min eigenvalue {w.min():.3e})")
    tr_covmean = np.sqrt(np.maximum(w, 0.0)).sum()
    diff = mu1 - mu2
    fd = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)
    return max(fd, 0.0)


def frechet_proxy(samples_a, samples_b, clf: FeatureClassifier) -> float:
    """Frechet distance between Gaussian fits of the classifier's penultimate features."""
    clf.check_gate()
    need = 2 * clf.feature_dim
    if len(samples_a) < need or len(samples_b) < need:
        raise ValueError(f"need at least {need} samples per set for a stable covariance")
    return frechet_distance(*gaussian_stats(clf.features(samples_a)),
                            *gaussian_stats(clf.features(samples_b)))


def inception_style_score(posteriors) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` over a matrix of class posteriors."""
    p = np.asarray(posteriors, dtype=np.float64)
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def score_proxy(samples, clf: FeatureClassifier) -> float:
    clf.check_gate()
    return inception_style_score(clf.posterior(samples))


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalConfig:
    n_samples: int = 10000
    seed: int = 0
    reference: str = "all"  # real images the fd proxy compares against: all | retain


@dataclass
class EvalReport:
    label: str
    fratio: float
    fratio_ci: tuple[float, float]
    fd_proxy: float
    score_proxy: float
    wall_seconds: float
    n_samples: int
    seed: int
    status: str = "ok"
    config_hash: str = ""

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["fratio_ci"] = tuple(d["fratio_ci"])
        return cls(**d)


CSV_COLUMNS = ("label", "fratio", "score_proxy", "fd_proxy", "time_s", "status", "config_hash")


def run_eval(model: VaeModel, clf: FeatureClassifier, cfg: EvalConfig, reference, label="model",
             wall_seconds: float | None = None) -> EvalReport:
    """Compute all metrics for one model. ``reference`` holds real images for the FD proxy."""
    if cfg.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if wall_seconds is None:
        wall_seconds = float(model.train_meta.get("wall_seconds", float("nan")))
    try:
        clf.check_gate()
    except ClassifierGateError:
        nan = float("nan")
        return EvalReport(label, nan, (nan, nan), nan, nan, wall_seconds, cfg.n_samples, cfg.seed,
                          status="(*) erroneous evaluation")
    samples = generate(model, cfg.n_samples, cfg.seed)
    ratio, hits = target_fraction(samples, clf)
    fd = frechet_proxy(samples, reference, clf)
    score = score_proxy(samples, clf)
    return EvalReport(label, ratio, binomial_ci(hits, cfg.n_samples), fd, score, wall_seconds,
                      cfg.n_samples, cfg.seed)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow([r.label, f"{r.fratio:.6f}", f"{r.score_proxy:.6f}", f"{r.fd_proxy:.6f}",
                         f"{r.wall_seconds:.3f}", r.status, r.config_hash])
    return buf.getvalue()

