"""Ladder VAE: Gaussian algebra, KL terms, objective and a short training run."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from cpgm.autodiff import Tensor, backward, finite_difference_check
from cpgm.autodiff import functional as F
from cpgm.data import gen_glyph_dataset, make_split, SplitSpec
from cpgm.errors import ContractError, DomainError, ShapeError
from cpgm.ladder_vae import (
    CPGMVae,
    VaeConfig,
    accuracy,
    class_mean,
    classification_loss,
    kl_conditional,
    kl_gaussian,
    merge_gaussian,
    train_cpgm_vae,
    vae_loss,
)

MC_SAMPLES = 200_000


def small_config(**kw):
    base = dict(num_classes=3, input_shape=(1, 8, 8), channels=(4, 6, 8), latent_dim=5, epochs=3)
    base.update(kw)
    return VaeConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(99)


class TestMerge:
    def test_anchor(self):
        q_mu, q_var = merge_gaussian(0.0, 1.0, 2.0, 1.0)
        assert abs(q_mu.item() - 1.0) < 1e-12
        assert abs(q_var.item() - 0.5) < 1e-12

    def test_equal_variance_midpoint(self, rng):
        mu, mt, var = rng.standard_normal(6), rng.standard_normal(6), rng.uniform(0.1, 3, 6)
        q_mu, _ = merge_gaussian(mu, var, mt, var)
        np.testing.assert_allclose(q_mu.data, (mu + mt) / 2, atol=1e-12)

    def test_infinite_top_down_variance(self, rng):
        mu, var = rng.standard_normal(4), rng.uniform(0.1, 3, 4)
        q_mu, q_var = merge_gaussian(mu, var, rng.standard_normal(4), np.full(4, 1e12))
        np.testing.assert_allclose(q_mu.data, mu, atol=1e-6)
        np.testing.assert_allclose(q_var.data, var, atol=1e-6)

    def test_merged_variance_smaller(self, rng):
        var, vt = rng.uniform(1e-3, 10, 1000), rng.uniform(1e-3, 10, 1000)
        _, q_var = merge_gaussian(rng.standard_normal(1000), var, rng.standard_normal(1000), vt)
        assert np.all(q_var.data < np.minimum(var, vt))

    def test_nonpositive_variance(self):
        with pytest.raises(DomainError):
            merge_gaussian(0.0, 0.0, 1.0, 1.0)


def mc_kl(q_mu, q_var, p_mu, p_var, rng):
    z = q_mu + np.sqrt(q_var) * rng.standard_normal((MC_SAMPLES, len(q_mu)))
    log_q = norm.logpdf(z, q_mu, np.sqrt(q_var)).sum(axis=1)
    log_p = norm.logpdf(z, p_mu, np.sqrt(p_var)).sum(axis=1)
    return float(np.mean(log_q - log_p))


class TestKL:
    def test_conditional_zero_and_half(self):
        assert kl_conditional(np.zeros(3), np.ones(3), np.zeros(3)).item() == 0.0
        assert abs(kl_conditional([1.0], [1.0], [0.0]).item() - 0.5) < 1e-12

    def test_gaussian_hand_value(self):
        got = kl_gaussian([1.0], [0.5], [0.0], [1.0]).item()
        assert abs(got - 0.5 * (np.log(2.0) + 0.5)) < 1e-12
        assert kl_gaussian([0.3], [2.0], [0.3], [2.0]).item() == 0.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_conditional_monte_carlo(self, seed):
        r = np.random.default_rng(seed)
        mu, var, mk = r.standard_normal(3), r.uniform(0.3, 2.0, 3), r.standard_normal(3)
        exact = kl_conditional(mu, var, mk).item()
        assert abs(mc_kl(mu, var, mk, np.ones(3), r) - exact) / exact < 0.01

    @pytest.mark.parametrize("seed", [3, 4, 5])
    def test_gaussian_monte_carlo(self, seed):
        r = np.random.default_rng(seed)
        qm, qv = r.standard_normal(3), r.uniform(0.3, 2.0, 3)
        pm, pv = r.standard_normal(3), r.uniform(0.5, 2.0, 3)
        exact = kl_gaussian(qm, qv, pm, pv).item()
        assert abs(mc_kl(qm, qv, pm, pv, r) - exact) / exact < 0.01

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 10), st.floats(-5, 5),
                              st.floats(0.01, 10)), min_size=1, max_size=6))
    def test_non_negative(self, rows):
        qm, qv, pm, pv = (np.array(c) for c in zip(*rows))
        assert kl_gaussian(qm, qv, pm, pv).item() >= -1e-12
        assert kl_conditional(qm, qv, pm).item() >= -1e-12

    def test_conditional_is_unit_variance_special_case(self, rng):
        mu, var, mk = rng.standard_normal(7), rng.uniform(0.1, 3, 7), rng.standard_normal(7)
        np.testing.assert_allclose(kl_conditional(mu, var, mk).item(),
                                   kl_gaussian(mu, var, mk, np.ones(7)).item(), atol=1e-12)

    def test_zero_centre_is_standard_vae_kl(self, rng):
        mu, var = rng.standard_normal(5), rng.uniform(0.1, 3, 5)
        standard = -0.5 * np.sum(1 + np.log(var) - mu ** 2 - var)
        np.testing.assert_allclose(kl_conditional(mu, var, np.zeros(5)).item(), standard, atol=1e-12)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            kl_conditional([0.0], [-1.0], [0.0])
        with pytest.raises(DomainError):
            kl_gaussian([0.0], [1.0], [0.0], [0.0])


class TestClassMean:
    def test_selects_row(self, rng):
        centers = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        np.testing.assert_array_equal(class_mean([0, 0, 1, 0], centers).data, centers.data[2])

    def test_gradient_only_in_selected_row(self, rng):
        centers = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        backward(class_mean([0, 1, 0, 0], centers).square().sum())
        assert np.all(centers.grad[[0, 2, 3]] == 0)
        assert np.all(centers.grad[1] != 0)

    def test_rejects_non_one_hot(self, rng):
        centers = Tensor(rng.standard_normal((3, 2)))
        with pytest.raises(ContractError):
            class_mean([0.5, 0.5, 0.0], centers)
        with pytest.raises(ContractError):
            class_mean([1, 0], centers)

    def test_initial_centres_distinct(self):
        c = CPGMVae(small_config()).centers.data
        assert len({tuple(row) for row in c}) == len(c)


class TestModel:
    def test_upward_stats(self, rng):
        model = CPGMVae(small_config())
        x = rng.uniform(size=(3, 1, 8, 8))
        stats = model.encode_upward(x)
        assert len(stats) == 3
        assert all(np.all(s.var.data > 0) for s in stats)

    def test_identical_inputs_identical_stats(self, rng):
        model = CPGMVae(small_config())
        x = np.repeat(rng.uniform(size=(1, 1, 8, 8)), 2, axis=0)
        for s in model.encode_upward(x):
            np.testing.assert_array_equal(s.mu.data[0], s.mu.data[1])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            CPGMVae(small_config()).encode_upward(np.zeros((2, 1, 9, 9)))

    def test_decode_shapes_and_merge_consistency(self, rng):
        model = CPGMVae(small_config())
        x = rng.uniform(size=(4, 1, 8, 8))
        out = model.forward(x, training=True, rng=np.random.default_rng(0))
        assert out.reconstruction.shape == x.shape
        assert len(out.ladder) == 2
        for layer in out.ladder:
            b, t, m = layer.bottom_up, layer.top_down, layer.merged
            q_var = 1 / (1 / b.var.data + 1 / t.var.data)
            q_mu = (t.mu.data / t.var.data + b.mu.data / b.var.data) * q_var
            np.testing.assert_allclose(m.var.data, q_var, atol=1e-12)
            np.testing.assert_allclose(m.mu.data, q_mu, atol=1e-12)

    def test_seeded_reconstruction_is_reproducible(self, rng):
        x = rng.uniform(size=(4, 1, 8, 8))
        a = CPGMVae(small_config()).forward(x, True, np.random.default_rng(5)).reconstruction.data
        b = CPGMVae(small_config()).forward(x, True, np.random.default_rng(5)).reconstruction.data
        np.testing.assert_array_equal(a, b)

    def test_classify_scores(self, rng):
        model = CPGMVae(small_config())
        s = model.classify(rng.standard_normal((5, 5))).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        logits = model.classify_logits(rng.standard_normal((5, 5))).data
        np.testing.assert_allclose(F.softmax(Tensor(logits + 3.0)).data, F.softmax(Tensor(logits)).data,
                                   atol=1e-12)

    def test_infer_is_deterministic(self, rng):
        model = CPGMVae(small_config())
        x = rng.uniform(size=(6, 1, 8, 8))
        a, b = model.infer(x), model.infer(x)
        np.testing.assert_array_equal(a.latent, b.latent)
        np.testing.assert_array_equal(a.recon_error, b.recon_error)
        assert a.latent.shape == (6, 5) and a.scores.shape == (6, 3)

    def test_cnn_has_no_decoder(self, rng):
        model = CPGMVae(small_config(architecture="cnn"))
        with pytest.raises(ContractError):
            model.infer(rng.uniform(size=(2, 1, 8, 8)))
        # decoder weights exist (same init as the other architectures) but stay unused
        total, parts = vae_loss(rng.uniform(size=(2, 1, 8, 8)), np.array([0, 1]), model, 1.0)
        assert parts["recon"].item() == 0.0
        backward(total)
        assert all(model.params[n].grad is None for n in model.params if n.startswith("dec."))


class TestConfig:
    def test_beta_schedule(self):
        c = small_config(epochs=5)
        assert c.beta(0) == 0.0 and c.beta(4) == 1.0
        np.testing.assert_allclose([c.beta(e) for e in range(5)], np.linspace(0, 1, 5))

    @pytest.mark.parametrize("kw", [dict(channels=(4,)), dict(latent_dim=0), dict(num_classes=1),
                                    dict(lam=0.0), dict(architecture="rnn"), dict(epochs=0)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            small_config(**kw)

    def test_defaults(self):
        c = VaeConfig(num_classes=4)
        assert (c.latent_dim, c.lam, c.learning_rate, c.batch_size) == (32, 100.0, 0.001, 64)
        assert c.num_layers == 3


class TestLoss:
    def test_total_recomputed_from_parts(self, rng):
        model = CPGMVae(small_config())
        x, y = rng.uniform(size=(4, 1, 8, 8)), np.array([0, 1, 2, 0])
        total, parts = vae_loss(x, y, model, 0.3, np.random.default_rng(0))
        lam = model.config.lam
        expect = parts["recon"].item() + 0.3 * parts["kl"].item() + lam * parts["cls"].item()
        assert abs(total.item() - expect) < 1e-12 * max(1.0, abs(expect))

    def test_cls_of_inverse_e(self):
        # logits giving S_c = e^-1 for the target class
        p = np.array([np.exp(-1.0), 1 - np.exp(-1.0)])
        loss = classification_loss(Tensor(np.log(p)[None]), np.array([0]))
        assert abs(loss.item() - 1.0) < 1e-12

    def test_zero_when_everything_matches(self):
        # zero reconstruction error, posterior equal to the prior and S_c = 1
        x = np.zeros((1, 4))
        recon = (x - x).__pow__(2).sum()
        kl = kl_conditional(np.zeros(3), np.ones(3), np.zeros(3)).item()
        cls = classification_loss(Tensor([[0.0, -800.0]]), np.array([0])).item()
        assert recon + kl + 100 * cls == 0.0

    def test_beta_zero_removes_kl_gradient(self, rng):
        model = CPGMVae(small_config())
        x, y = rng.uniform(size=(3, 1, 8, 8)), np.array([0, 1, 2])
        total, _ = vae_loss(x, y, model, 0.0, np.random.default_rng(0))
        backward(total)
        # the centres only enter through the KL term
        np.testing.assert_array_equal(model.centers.grad, 0.0)

    def test_beta_range(self, rng):
        model = CPGMVae(small_config())
        with pytest.raises(ContractError):
            vae_loss(np.zeros((2, 1, 8, 8)), np.array([0, 1]), model, 1.5)

    def test_plain_drops_ladder_terms(self, rng):
        x, y = rng.uniform(size=(3, 1, 8, 8)), np.array([0, 1, 2])
        plain = CPGMVae(small_config(architecture="plain"))
        out = plain.forward(x, training=True, rng=np.random.default_rng(0))
        _, parts = vae_loss(x, y, plain, 1.0, np.random.default_rng(0))
        mu_k = plain.centers.data[y]
        expect = kl_conditional(out.top.mu.data, out.top.var.data, mu_k).data.mean()
        np.testing.assert_allclose(parts["kl"].item(), expect, atol=1e-12)

    def test_ladder_kl_averages_layers(self, rng):
        x, y = rng.uniform(size=(3, 1, 8, 8)), np.array([0, 1, 2])
        model = CPGMVae(small_config())
        out = model.forward(x, training=True, rng=np.random.default_rng(0))
        _, parts = vae_loss(x, y, model, 1.0, np.random.default_rng(0))
        kl = kl_conditional(out.top.mu.data, out.top.var.data, model.centers.data[y]).data
        for layer in out.ladder:
            m, t = layer.merged, layer.top_down
            kl = kl + kl_gaussian(m.mu.data, m.var.data, t.mu.data, t.var.data).data
        np.testing.assert_allclose(parts["kl"].item(), (kl / 3).mean(), atol=1e-12)

    @pytest.mark.parametrize("arch", ["ladder", "plain", "cnn"])
    def test_full_model_gradcheck(self, rng, arch):
        model = CPGMVae(small_config(architecture=arch))
        x, y = rng.uniform(size=(2, 1, 8, 8)), np.array([0, 1])
        loss = lambda: vae_loss(x, y, model, 0.5, np.random.default_rng(0))[0]
        assert finite_difference_check(loss, model.params, n_coords=6) < 1e-4


@pytest.fixture(scope="module")
def glyph_split():
    ds = gen_glyph_dataset(60, [0, 1, 2, 3], 16, seed=0)
    return make_split(ds, SplitSpec([0, 1, 2, 3], seed=0))


class TestTraining:
    def test_empty_dataset(self, glyph_split):
        with pytest.raises(ContractError):
            train_cpgm_vae(glyph_split.train.subset(np.array([], dtype=int)), VaeConfig(4, epochs=1))

    def test_bad_labels(self, glyph_split):
        with pytest.raises(ContractError):
            train_cpgm_vae(glyph_split.train, VaeConfig(3, epochs=1))

    def test_short_run(self, glyph_split):
        cfg = VaeConfig(4, epochs=4, seed=1)
        result = train_cpgm_vae(glyph_split.train, cfg)
        assert len(result.trace) == 4
        assert all(np.isfinite(row["loss"]) for row in result.trace)
        assert [row["beta"] for row in result.trace] == [0.0, 1 / 3, 2 / 3, 1.0]
        assert accuracy(result.model, glyph_split.known_test) >= 0.9

    def test_determinism(self, glyph_split):
        small = glyph_split.train.subset(np.arange(0, len(glyph_split.train), 4))
        a = train_cpgm_vae(small, VaeConfig(4, epochs=1, seed=3)).model
        b = train_cpgm_vae(small, VaeConfig(4, epochs=1, seed=3)).model
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        for name in a.buffers:
            np.testing.assert_array_equal(a.buffers[name], b.buffers[name])
