import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unlearn_surgery.checkpoint import decode, encode
from unlearn_surgery.data import SynthConfig, synth_dataset
from unlearn_surgery.diffcore import finite_difference_gradient
from unlearn_surgery.errors import CheckpointError, DimensionError
from unlearn_surgery.vae import (
    TrainConfig,
    VaeArch,
    VaeModel,
    elbo_loss,
    generate,
    load_model,
    reconstruct,
    save_model,
    train,
)

TINY = VaeArch(input_dim=6, hidden_dims=(5,), latent_dim=2)


def zero_head(model, mlp, bias=0.0):
    W, b = mlp.layers[-1].unpack(model.params)
    W[...] = 0.0
    b[...] = bias


class TestElbo:
    def test_kl_vanishes_when_posterior_is_prior(self):
        model = VaeModel(TINY, seed=0)
        zero_head(model, model.encoder)
        x = np.random.default_rng(0).uniform(size=(4, 6))
        _, _, terms = model.loss_and_grad(x, return_terms=True)
        assert terms["kl"] == 0.0

    def test_gaussian_zero_residual(self):
        arch = VaeArch(input_dim=5, hidden_dims=(3,), latent_dim=2, likelihood="gaussian", obs_std=0.5)
        model = VaeModel(arch, seed=0)
        zero_head(model, model.decoder, bias=0.25)
        x = np.full((3, 5), 0.25)
        value, _ = model.loss_and_grad(x, loss="recon")
        assert value == pytest.approx(0.5 * np.log(2 * np.pi * 0.25) * 5, rel=1e-12)

    @pytest.mark.parametrize("likelihood", ["bernoulli", "gaussian"])
    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    @pytest.mark.parametrize("loss", ["elbo", "recon", "kl"])
    def test_gradient_matches_finite_differences(self, likelihood, activation, loss):
        arch = VaeArch(6, (5, 4), 2, activation, likelihood)
        model = VaeModel(arch, seed=1)
        x = np.random.default_rng(2).uniform(size=(4, 6))
        _, g = model.loss_and_grad(x, loss, seed=3)
        fd = finite_difference_gradient(lambda th: model.loss_and_grad(x, loss, seed=3, params=th)[0],
                                        model.params)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4

    def test_decoder_only_gradient_is_decoder_slice(self):
        model = VaeModel(TINY, seed=4)
        x = np.random.default_rng(5).uniform(size=(3, 6))
        _, full = model.loss_and_grad(x, seed=1)
        _, dec = model.loss_and_grad(x, seed=1, decoder_only=True)
        k = model.encoder.n_params
        np.testing.assert_array_equal(dec[:k], 0.0)
        np.testing.assert_allclose(dec[k:], full[k:], rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            elbo_loss(VaeModel(TINY), np.zeros((2, 7)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 3.0))
    def test_kl_non_negative(self, seed, scale):
        model = VaeModel(TINY, seed=seed)
        model.params *= scale
        x = np.random.default_rng(seed).uniform(size=(5, 6))
        _, _, terms = model.loss_and_grad(x, "kl", seed=seed, return_terms=True)
        assert terms["kl"] >= 0.0


SMALL = VaeArch(input_dim=784, hidden_dims=(32,), latent_dim=4)


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(SynthConfig(n=512, seed=0))


class TestTrain:
    def test_learning_happens(self, synth):
        model = train(SMALL, synth.images, TrainConfig(lr=2e-3, epochs=5, batch_size=64, seed=0))
        trace = model.train_meta["loss_trace"]
        assert trace[-1] < trace[0]
        assert model.train_meta["wall_seconds"] > 0

    def test_deterministic(self, synth):
        cfg = TrainConfig(lr=2e-3, epochs=2, batch_size=64, seed=3)
        a = train(SMALL, synth.images, cfg)
        b = train(SMALL, synth.images, cfg)
        assert a.params.tobytes() == b.params.tobytes()

    def test_reconstruction_error_decreases(self, synth):
        x = synth.images[:128]
        m0 = VaeModel(SMALL, seed=0)
        m1 = train(SMALL, synth.images, TrainConfig(lr=2e-3, epochs=5, batch_size=64, seed=0))
        mse0 = np.mean((reconstruct(m0, x) - x) ** 2)
        mse1 = np.mean((reconstruct(m1, x) - x) ** 2)
        assert mse1 < mse0

    def test_reconstruction_beats_noise_floor(self):
        cfg = SynthConfig(n=600, seed=1, noise_std=0.1)
        ds = synth_dataset(cfg)
        arch = VaeArch(784, (64,), 4)
        model = train(arch, ds.images, TrainConfig(lr=2e-3, epochs=40, batch_size=64, seed=0))
        mse = np.mean((reconstruct(model, ds.images) - ds.images) ** 2)
        assert mse < cfg.noise_floor()

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestGenerate:
    def test_shape_and_range(self):
        out = generate(VaeModel(SMALL, seed=0), 10000, seed=0)
        assert out.shape == (10000, 784)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.all(np.isfinite(out))

    def test_same_seed_same_samples(self):
        model = VaeModel(SMALL, seed=0)
        assert generate(model, 50, seed=9).tobytes() == generate(model, 50, seed=9).tobytes()

    def test_prior_spread_through_identity_decoder(self):
        arch = VaeArch(input_dim=1, hidden_dims=(), latent_dim=1, likelihood="gaussian")
        model = VaeModel(arch, seed=0)
        W, b = model.decoder.layers[0].unpack(model.params)
        W[...] = 1.0
        b[...] = 0.0
        out = generate(model, 100_000, seed=0)
        assert abs(out.std() - 1.0) <= 0.05

    def test_rejects_n_zero(self):
        with pytest.raises(ValueError):
            generate(VaeModel(TINY), 0)

    def test_reconstruct_zero_input_range(self):
        out = reconstruct(VaeModel(SMALL, seed=0), np.zeros((2, 784)))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = VaeModel(TINY, seed=7, train_meta={"epochs": 3, "lr": 5e-4, "seed": 7, "dataset_id": "x"})
        path = save_model(model, tmp_path / "m.vaeu")
        back = load_model(path)
        assert back.params.tobytes() == model.params.tobytes()
        assert back.arch == model.arch
        assert back.train_meta == model.train_meta
        save_model(back, tmp_path / "m2.vaeu")
        assert (tmp_path / "m.vaeu").read_bytes() == (tmp_path / "m2.vaeu").read_bytes()

    def test_layout(self):
        blob = encode({"kind": "vae"}, np.array([1.5, -2.0]))
        assert blob[:4] == b"VAEU"
        assert int.from_bytes(blob[4:8], "little") == 1
        dlen = int.from_bytes(blob[8:12], "little")
        assert int.from_bytes(blob[12 + dlen:20 + dlen], "little") == 2
        np.testing.assert_array_equal(np.frombuffer(blob[20 + dlen:36 + dlen], "<f8"), [1.5, -2.0])

    def test_rejects_wrong_magic(self):
        blob = encode({"kind": "vae"}, np.zeros(3))
        with pytest.raises(CheckpointError, match="magic"):
            decode(b"XXXX" + blob[4:])

    def test_rejects_corruption(self):
        blob = bytearray(encode({"kind": "vae"}, np.arange(4.0)))
        blob[-10] ^= 0xFF
        with pytest.raises(CheckpointError, match="CRC"):
            decode(bytes(blob))

    def test_rejects_version(self):
        blob = bytearray(encode({"kind": "vae"}, np.zeros(1)))
        blob[4] = 2
        with pytest.raises(CheckpointError, match="version"):
            decode(bytes(blob))
