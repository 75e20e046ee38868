"""Vanilla dense VAE: ELBO with analytic gradients, Adam training, sampling."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .diffcore import Adam, Mlp, as_batch, bernoulli_nll, gaussian_nll, sigmoid
from .errors import CheckpointError, NumericalError

log = logging.getLogger(__name__)

LOSSES = ("elbo", "recon", "kl")


@dataclass(frozen=True)
class VaeArch:
    input_dim: int = 784
    hidden_dims: tuple[int, ...] = (256, 64)
    latent_dim: int = 16
    activation: str = "tanh"
    likelihood: str = "bernoulli"
    obs_std: float = 1.0  # gaussian likelihood only

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.latent_dim, *self.hidden_dims)) < 1:
            raise ValueError("all VAE dims must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be tanh or relu, got {self.activation!r}")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"likelihood must be bernoulli or gaussian, got {self.likelihood!r}")

    @property
    def encoder_dims(self):
        return [self.input_dim, *self.hidden_dims, 2 * self.latent_dim]

    @property
    def decoder_dims(self):
        return [self.latent_dim, *reversed(self.hidden_dims), self.input_dim]

    @property
    def n_params(self):
        enc = Mlp(self.encoder_dims, self.activation)
        dec = Mlp(self.decoder_dims, self.activation)
        return enc.n_params + dec.n_params

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    lr: float = 5e-4
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.betas = tuple(self.betas)


class VaeModel:
    """Encoder/decoder pair sharing one flat parameter vector."""

    def __init__(self, arch: VaeArch, params=None, train_meta=None, seed=0):
        self.arch = arch
        self.encoder = Mlp(arch.encoder_dims, arch.activation)
        self.decoder = Mlp(arch.decoder_dims, arch.activation, offset=self.encoder.n_params)
        n = self.encoder.n_params + self.decoder.n_params
        if params is None:
            rng = np.random.default_rng([seed, 0])
            params = np.zeros(n)
            self.encoder.init_params(rng, params)
            self.decoder.init_params(rng, params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ValueError(f"parameter vector has length {params.size}, architecture needs {n}")
        self.params = params
        self.train_meta = dict(train_meta or {})

    def copy(self):
        return VaeModel(self.arch, self.params.copy(), dict(self.train_meta))

    # -- forward pieces -----------------------------------------------------
    def encode(self, x, params=None):
        params = self.params if params is None else params
        h, _ = self.encoder.forward(params, as_batch(x, self.arch.input_dim))
        L = self.arch.latent_dim
        return h[:, :L], h[:, L:]

    def decode(self, z, params=None):
        """Decoder head output: logits (bernoulli) or mean (gaussian)."""
        params = self.params if params is None else params
        out, _ = self.decoder.forward(params, as_batch(z, self.arch.latent_dim))
        return out

    def mean_output(self, z, params=None):
        out = self.decode(z, params)
        return sigmoid(out) if self.arch.likelihood == "bernoulli" else out

    def noise(self, n, seed):
        return np.random.default_rng(seed).standard_normal((n, self.arch.latent_dim))

    # -- loss ---------------------------------------------------------------
    def loss_and_grad(self, batch, loss="elbo", seed=0, params=None, eps=None, return_terms=False,
                      decoder_only=False):
        """Mean negative ELBO (or one of its terms) over ``batch`` and its gradient.

        ``eps`` fixes the reparameterization noise; otherwise it is drawn
        from ``seed``. With ``decoder_only`` the encoder backward pass is
        skipped and the encoder part of the gradient is left at zero.
        """
        loss = loss or "elbo"
        if loss not in LOSSES:
            raise ValueError(f"unknown loss selector {loss!r}; expected one of {LOSSES}")
        params = self.params if params is None else params
        x = as_batch(batch, self.arch.input_dim)
        n = x.shape[0]
        L = self.arch.latent_dim
        if eps is None:
            eps = self.noise(n, seed)

        h, enc_cache = self.encoder.forward(params, x)
        mu, logvar = h[:, :L], h[:, L:]
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        out, dec_cache = self.decoder.forward(params, z)

        if self.arch.likelihood == "bernoulli":
            recon, dout = bernoulli_nll(out, x)
        else:
            recon, dout = gaussian_nll(out, x, self.arch.obs_std)
        var = std * std
        kl = -0.5 * (1.0 + logvar - mu * mu - var).sum() / n

        w_rec = 0.0 if loss == "kl" else 1.0
        w_kl = 0.0 if loss == "recon" else 1.0
        value = w_rec * recon + w_kl * kl

        grad = np.zeros_like(params)
        dz = self.decoder.backward(params, dec_cache, w_rec * dout, grad)
        if decoder_only:
            return (value, grad, {"recon": recon, "kl": kl}) if return_terms else (value, grad)
        dmu = dz + w_kl * mu / n
        dlogvar = dz * eps * 0.5 * std + w_kl * 0.5 * (var - 1.0) / n
        self.encoder.backward(params, enc_cache, np.concatenate([dmu, dlogvar], axis=1), grad)
        if return_terms:
            return value, grad, {"recon": recon, "kl": kl}
        return value, grad

    @property
    def n_params(self):
        return self.params.size


def elbo_loss(model: VaeModel, batch, seed: int = 0):
    """Return ``(loss, gradient)`` of the mean negative ELBO; raises on non-finite loss."""
    value, grad = model.loss_and_grad(batch, "elbo", seed=seed)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite ELBO ({value})")
    return value, grad


def mean_elbo(model: VaeModel, data, seed=0, batch_size=1024) -> float:
    """Mean negative ELBO over ``data`` (no gradient), chunked."""
    data = as_batch(data, model.arch.input_dim)
    total = 0.0
    for i, start in enumerate(range(0, data.shape[0], batch_size)):
        chunk = data[start:start + batch_size]
        total += model.loss_and_grad(chunk, "elbo", seed=[seed, i])[0] * chunk.shape[0]
    return total / data.shape[0]


def train(arch: VaeArch, data, cfg: TrainConfig, dataset_id: str = "", init: VaeModel | None = None) -> VaeModel:
    """Fit a VAE with Adam on minibatches; returns the model with ``loss_trace`` metadata."""
    data = as_batch(data, arch.input_dim)
    n = data.shape[0]
    model = init.copy() if init is not None else VaeModel(arch, seed=cfg.seed)
    opt = Adam(model.n_params, cfg.lr, cfg.betas, cfg.adam_eps)
    epoch_losses = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            value, grad = model.loss_and_grad(data[idx], "elbo", seed=[cfg.seed, 2, epoch, step])
            if not np.isfinite(value):
                err = NumericalError(f"training diverged at epoch {epoch} step {step}")
                err.trace = epoch_losses
                raise err
            opt.step(model.params, grad)
            total += value * idx.size
        epoch_losses.append(total / n)
        log.debug("epoch %d loss %.4f", epoch, epoch_losses[-1])
    wall = time.perf_counter() - t0
    model.train_meta = {
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "dataset_id": dataset_id,
        "wall_seconds": wall,
        "loss_trace": epoch_losses,
    }
    return model


def generate(model: VaeModel, n: int, seed: int = 0) -> np.ndarray:
    """Decode ``n`` prior draws. Bernoulli models return pixel means in [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = np.random.default_rng(seed).standard_normal((n, model.arch.latent_dim))
    return model.mean_output(z).astype(np.float32)


def reconstruct(model: VaeModel, batch) -> np.ndarray:
    """Mean-path reconstruction (z = mu)."""
    mu, _ = model.encode(batch)
    return model.mean_output(mu).astype(np.float32)


def save_model(model: VaeModel, path, extra: dict | None = None):
    desc = {"kind": "vae", "arch": model.arch.to_dict(), "train_meta": model.train_meta}
    if extra:
        desc.update(extra)
    return checkpoint.save(path, desc, model.params)


def load_model(path) -> VaeModel:
    desc, params = checkpoint.load(path)
    if desc.get("kind") != "vae":
        raise CheckpointError(f"{path} holds a {desc.get('kind')!r} checkpoint, not a VAE")
    model = VaeModel(VaeArch.from_dict(desc["arch"]), params, desc.get("train_meta"))
    model.descriptor = desc
    return model
