"""Prediction-error estimators, their reductions and closed-form oracles."""

import json

import numpy as np
import pytest

from noise2boost import autograd as ag
from noise2boost import estimators as est
from noise2boost import network as nw
from noise2boost import tensor_core as tc
from noise2boost.attention import AttentionNet, GraphAttention, attention_weights, zero_attention
from noise2boost.sampling import BoostConfig, draw_bernoulli_mask, draw_masks, ones_mask
from noise2boost.verify import draw_with_margin, monotone_network, prop3_ratio

SMALL = nw.NetworkConfig(stages=2, channels=(1, 4, 8), taps=3, spatial=(8, 8))


@pytest.fixture
def net():
    return nw.init_network(SMALL, seed=21)


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    return est.Dataset(rng.standard_normal((3,) + SMALL.input_shape),
                       rng.standard_normal((2,) + SMALL.input_shape))


def zero_network(cfg=SMALL):
    return nw.Network(cfg, {k: np.zeros(s) for k, s in nw.parameter_shapes(cfg).items()})


class TestTypes:
    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            est.NoiseModel(-1.0)

    def test_dataset_shape_check(self):
        with pytest.raises(tc.DimensionError):
            est.Dataset(np.zeros((2, 1, 4)), np.zeros((1, 1, 5)))

    def test_empty_dataset(self):
        d = est.Dataset(np.zeros((0, 1, 4)))
        assert d.P == 0 and d.Q == 0

    def test_report_decomposition(self):
        r = est._report("sure", 3.0, 5.0, "exact", 0.5)
        assert r.total == 3.0 + 2 * 0.25 * 5.0
        assert est._report("n2v", 3.0, 5.0, "omitted", 0.5).total == 3.0
        assert json.loads(r.to_json())["divergence_method"] == "exact"


class TestErrHat:
    def test_examples(self):
        assert est.err_hat([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert est.err_hat([1.0, 2.0], [1.0, 0.0]) == 4.0

    def test_shape_mismatch(self):
        with pytest.raises(tc.DimensionError):
            est.err_hat(np.zeros(2), np.zeros(3))

    def test_expectation_matches_closed_form(self):
        n, sigma, trials = 12, 0.2, 10_000
        A = est.circulant_smoother(n, [0.25, 0.5, 0.25])
        mu = np.sin(np.linspace(0, 3, n))
        rng = np.random.default_rng(1)
        errs = [est.err_hat(mu + sigma * rng.standard_normal(n), A(mu + sigma * rng.standard_normal(n)))
                for _ in range(trials)]
        ref = est.closed_form_prediction_error(A, mu, sigma)
        assert abs(np.mean(errs) - ref) <= 3 * np.std(errs, ddof=1) / np.sqrt(trials)


class TestN2N:
    def test_perfect_target(self, net):
        x = np.random.default_rng(2).standard_normal(SMALL.input_shape)
        assert est.loss_n2n(est.Dataset(x[None], net(x)[None]), net) == 0.0

    def test_identical_targets_average(self, net):
        rng = np.random.default_rng(3)
        x, t = rng.standard_normal((2,) + SMALL.input_shape)
        d = est.Dataset(x[None], np.stack([t, t]))
        assert est.loss_n2n(d, net) == pytest.approx(est.err_hat(t, net(x)), rel=1e-14)

    def test_double_loop(self, net, data):
        ref = sum(est.err_hat(t, net(x)) for x in data.inputs for t in data.targets) / 6
        assert est.loss_n2n(data, net) == pytest.approx(ref, rel=1e-13)

    def test_missing_targets(self, net):
        with pytest.raises(ValueError):
            est.loss_n2n(est.Dataset(np.zeros((1,) + SMALL.input_shape)), net)


class TestSure:
    @pytest.mark.parametrize("sigma", [0.05, 0.1])
    def test_identity_network(self, sigma):
        net = nw.identity_network((4, 4))
        x = np.random.default_rng(4).uniform(0.1, 1, (1, 4, 4))
        r = est.sure_point(x, net, sigma)
        assert (r.fidelity, r.divergence) == (0.0, 16.0)
        assert abs(r.total - 2 * sigma ** 2 * 16) <= 1e-10

    def test_zero_network(self):
        x = np.random.default_rng(5).standard_normal(SMALL.input_shape)
        r = est.sure_point(x, zero_network(), 0.1)
        assert r.divergence == 0.0 and r.total == pytest.approx(np.sum(x ** 2), rel=1e-14)

    def test_unbiased_for_linear_smoother(self):
        n, sigma, draws = 16, 0.1, 10_000
        A = est.circulant_smoother(n, [0.2, 0.5, 0.3])
        mu = np.linspace(0, 1, n)
        rng = np.random.default_rng(6)
        totals = [est.sure_point(mu + sigma * rng.standard_normal(n), A, sigma).total
                  for _ in range(draws)]
        ref = est.closed_form_prediction_error(A, mu, sigma)
        assert abs(np.mean(totals) - ref) <= 3 * np.std(totals, ddof=1) / np.sqrt(draws)

    def test_hutchinson_close_to_exact(self, net):
        x = draw_with_margin(net, np.random.default_rng(7))
        exact = est.sure_point(x, net, 0.1).divergence
        mc = est.sure_point(x, net, 0.1, "hutchinson", n_probes=4000, seed=1)
        assert mc.divergence == pytest.approx(exact, rel=0.1)
        assert mc.seed == 1

    def test_pn_constant_and_omitted(self, net):
        x = np.ones(SMALL.input_shape)
        assert est.sure_point(x, net, 0.1, "pn_constant").divergence == 64
        r = est.sure_point(x, net, 0.1, "omitted")
        assert r.total == r.fidelity

    def test_exact_needs_frame_config(self):
        cfg = nw.NetworkConfig(stages=2, channels=(1, 4, 8), spatial=(8, 8), bias_free=False)
        with pytest.raises(nw.FrameModeError):
            est.sure_point(np.ones(cfg.input_shape), nw.init_network(cfg, 0), 0.1)

    def test_unknown_method(self, net):
        with pytest.raises(ValueError):
            est.sure_point(np.ones(SMALL.input_shape), net, 0.1, "magic")

    def test_loss_sure_reductions(self, net, data):
        totals = [est.sure_point(x, net, 0.2).total for x in data.inputs]
        assert est.loss_sure(data.subset(slice(0, 1)), net, 0.2) == totals[0]
        assert est.loss_sure(data.subset(slice(0, 2)), net, 0.2) == pytest.approx(np.mean(totals[:2]))
        assert est.loss_sure(data, net, 0.2) == pytest.approx(sum(totals) / 3, rel=1e-14)


class TestSureMasked:
    def test_ones_mask_reduces_to_sure(self, net):
        x = np.random.default_rng(8).standard_normal(SMALL.input_shape)
        a = est.sure_masked(x, net, ones_mask(x.shape), 0.1)
        b = est.sure_point(x, net, 0.1)
        assert (a.fidelity, a.divergence) == pytest.approx((b.fidelity, b.divergence), rel=1e-12)

    def test_zero_mask(self, net):
        x = np.random.default_rng(9).standard_normal(SMALL.input_shape)
        r = est.sure_masked(x, net, np.zeros_like(x), 0.1)
        assert r.fidelity == pytest.approx(np.sum(x ** 2)) and r.divergence == 0.0

    def test_divergence_matches_finite_differences(self, net):
        rng = np.random.default_rng(10)
        L = draw_bernoulli_mask(SMALL.input_shape, 0.7, seed=3)
        for _ in range(100):
            x = rng.standard_normal(SMALL.input_shape)
            if nw.preactivation_margin(net, x * L.values) >= 1e-3:
                break
        div = est.sure_masked(x, net, L, 0.1).divergence
        fd = np.trace(tc.numerical_jacobian(lambda z: net(z * L.values), x))
        assert abs(div - fd) <= 1e-6 * max(1.0, abs(div))

    def test_linear_map_divergence(self):
        A = est.circulant_smoother(8, [0.3, 0.4, 0.3])
        L = np.array([1, 0, 1, 1, 0, 0, 1, 1.0])
        r = est.sure_masked(np.ones(8), A, L, 0.1)
        assert r.divergence == pytest.approx(np.trace(A.matrix @ np.diag(L)))


class TestN2V:
    def test_single_ones_mask_is_autoencoder_mse(self, net, data):
        ref = np.mean([est.err_hat(x, net(x)) for x in data.inputs])
        assert est.loss_n2v(data, [ones_mask(SMALL.input_shape)], net) == pytest.approx(ref, rel=1e-13)

    def test_divergence_flag_identity_net(self):
        net = nw.identity_network(16)
        x = np.random.default_rng(11).uniform(0.1, 1, (1, 16))
        masks = draw_masks(BoostConfig(K=3, p=0.6, base_seed=2), x.shape)
        sigma = 0.1
        got = est.loss_n2v(est.Dataset(x[None]), masks, net, sigma, include_divergence=True)
        ref = np.mean([np.sum((x - x * m.values) ** 2) + 2 * sigma ** 2 * m.values.sum()
                       for m in masks])
        assert got == pytest.approx(ref, rel=1e-13)

    def test_reference_loop(self, net, data):
        masks = draw_masks(BoostConfig(K=4, base_seed=5), SMALL.input_shape)
        ref = np.mean([est.err_hat(x, net(x * m.values)) for x in data.inputs for m in masks])
        assert est.loss_n2v(data, masks, net) == pytest.approx(ref, rel=1e-13)

    def test_graph_loss_matches(self, net, data):
        M = np.stack([m.values for m in draw_masks(BoostConfig(K=3), SMALL.input_shape)])
        g = est.n2v_graph(nw.GraphNetwork(net, requires_grad=False), data.inputs, M)
        assert float(g.value) == pytest.approx(est.loss_n2v(data, list(M), net), rel=1e-12)


class TestBagging:
    def test_ones_masks_give_forward(self, net):
        x = np.random.default_rng(12).standard_normal(SMALL.input_shape)
        out = est.bagged_mean(net, x, [ones_mask(x.shape)] * 4)
        np.testing.assert_allclose(out, net(x), atol=1e-15)

    def test_identity_net_tends_to_px(self):
        net = nw.identity_network(10)
        x = np.linspace(0.1, 1, 10)[None]
        K, p = 10_000, 0.7
        out = est.bagged_mean(net, x, draw_masks(BoostConfig(K=K, p=p), x.shape))
        se = x * np.sqrt(p * (1 - p) / K)
        assert np.all(np.abs(out - p * x) <= 4 * se)

    def test_jensen_gap_pointwise(self, net):
        rng = np.random.default_rng(13)
        for i in range(50):
            x, x_star = rng.standard_normal((2,) + SMALL.input_shape)
            masks = draw_masks(BoostConfig(K=8, base_seed=i), x.shape)
            per_mask = np.mean([est.err_hat(x_star, net(x * m.values)) for m in masks])
            assert per_mask >= est.err_hat(x_star, est.bagged_mean(net, x, masks))


class TestBoosting:
    def test_ones_masks_reduce_to_sure(self, net, data):
        masks = [ones_mask(SMALL.input_shape)] * 3
        assert est.loss_boosting(data, net, masks, 0.1) == pytest.approx(est.loss_sure(data, net, 0.1),
                                                                          rel=1e-12)

    def test_pn_constant_value(self, net):
        x = np.ones(SMALL.input_shape)
        masks = draw_masks(BoostConfig(K=2, p=0.8), x.shape)
        assert est.boosting_point(x, net, masks, 0.1, "pn_constant").divergence == pytest.approx(0.8 * 64)

    def test_pn_constant_term_has_zero_gradient(self, net, data):
        M = np.stack([m.values for m in draw_masks(BoostConfig(K=3), SMALL.input_shape)])

        def fid(F, b):
            Y = est._branches(F, b, M)
            return est._sq_err(b, ag.mul(ag.reduce_sum(Y, axis=1), 1.0 / 3))
        g_full = nw.gradient(net, lambda F, b: est.boosting_graph(F, b, M, 0.3, 0.9), data.inputs)
        g_fid = nw.gradient(net, fid, data.inputs)
        for k in g_full:
            np.testing.assert_array_equal(g_full[k], g_fid[k])

    def test_exact_divergence_averages_masks(self, net):
        x = np.random.default_rng(14).standard_normal(SMALL.input_shape)
        masks = draw_masks(BoostConfig(K=4, p=0.7), x.shape)
        r = est.boosting_point(x, net, masks, 0.1)
        ref = np.mean([est.sure_masked(x, net, m, 0.1).divergence for m in masks])
        assert r.divergence == pytest.approx(ref, rel=1e-12)

    def test_monotone_net_p_scaling(self):
        cfg = nw.NetworkConfig(stages=2, channels=(1, 2, 4), taps=3, spatial=(8, 8))
        net = monotone_network(cfg, 3)
        x = np.random.default_rng(15).uniform(0.1, 1, cfg.input_shape)
        r = prop3_ratio(net, x, 0.7, 2000, seed=4)
        assert abs(r["ratio"] - 0.7) <= 3 * r["stderr"]

    def test_unsupported_method(self, net):
        with pytest.raises(ValueError):
            est.boosting_point(np.ones(SMALL.input_shape), net, [ones_mask(SMALL.input_shape)], 0.1,
                               "hutchinson")


class TestN2B:
    def test_uniform_attention_equals_boosting_fidelity(self, net, data):
        masks = draw_masks(BoostConfig(K=4, kind="weights"), SMALL.input_shape)
        ref = np.mean([est.err_hat(x, est.bagged_mean(net, x, masks)) for x in data.inputs])
        assert est.loss_n2b(data, net, zero_attention(4), masks) == pytest.approx(ref, rel=1e-12)

    def test_single_branch(self, net, data):
        masks = [ones_mask(SMALL.input_shape)]
        rng = np.random.default_rng(16)
        att = AttentionNet(rng.standard_normal((64, 1)), rng.standard_normal(64),
                           rng.standard_normal((1, 64)), rng.standard_normal(1))
        ref = np.mean([est.err_hat(x, net(x)) for x in data.inputs])
        assert est.loss_n2b(data, net, att, masks) == pytest.approx(ref, rel=1e-12)

    def test_reference_loop(self, net, data):
        rng = np.random.default_rng(17)
        att = AttentionNet(rng.standard_normal((64, 3)), rng.standard_normal(64),
                           rng.standard_normal((3, 64)), rng.standard_normal(3))
        masks = draw_masks(BoostConfig(K=3), SMALL.input_shape)
        terms = []
        for x in data.inputs:
            ys = [net(x * m.values) for m in masks]
            w = attention_weights([y.mean() for y in ys], att)
            terms.append(est.err_hat(x, sum(w[k] * ys[k] for k in range(3))))
        assert est.loss_n2b(data, net, att, masks) == pytest.approx(np.mean(terms), rel=1e-12)

    def test_linear_model_path(self, data):
        A = est.LinearDenoiser(np.eye(64) * 0.5, SMALL.input_shape)
        ref = np.mean([est.err_hat(x, 0.5 * x) for x in data.inputs])
        assert est.loss_n2b(data, A, zero_attention(1), [ones_mask(SMALL.input_shape)]) == \
            pytest.approx(ref)

    def test_k_mismatch(self, net, data):
        with pytest.raises(tc.DimensionError):
            est.loss_n2b(data, net, zero_attention(3), [ones_mask(SMALL.input_shape)] * 2)

    def test_graph_with_frozen_branches(self, net, data):
        M = np.stack([m.values for m in draw_masks(BoostConfig(K=2), SMALL.input_shape)])
        F = nw.GraphNetwork(net)
        A = GraphAttention(zero_attention(2))
        Y = ag.lift(est._branches(F, data.inputs, M).value)
        ag.backward(est.n2b_graph(F, A, data.inputs, data.inputs, M, branches=Y))
        assert all(np.all(g == 0) for g in F.grads().values())


class TestOracle:
    def test_identity_closed_form(self):
        mu = np.arange(5.0)
        val, se = est.oracle_prediction_error(np.eye(5), est.NoiseModel(0.3, mu))
        assert val == pytest.approx(2 * 5 * 0.09) and se == 0.0

    def test_zero_closed_form(self):
        mu = np.arange(5.0)
        val, _ = est.oracle_prediction_error(np.zeros((5, 5)), est.NoiseModel(0.3, mu))
        assert val == pytest.approx(np.sum(mu ** 2) + 5 * 0.09)

    def test_monte_carlo_matches_closed_form(self):
        n = 16
        A = est.circulant_smoother(n, [1 / 3, 1 / 3, 1 / 3])
        noise = est.NoiseModel(0.1, np.linspace(0, 1, n))
        mc, se = est.oracle_prediction_error(A, noise, trials=10_000, seed=3, closed_form=False)
        ref, _ = est.oracle_prediction_error(A, noise)
        assert abs(mc - ref) <= 3 * se

    def test_network_uses_monte_carlo(self, net):
        noise = est.NoiseModel(0.1, np.zeros(SMALL.input_shape))
        val, se = est.oracle_prediction_error(net, noise, trials=200)
        assert se > 0 and val > 0

    def test_needs_mu(self):
        with pytest.raises(ValueError):
            est.oracle_prediction_error(np.eye(2), est.NoiseModel(0.1))
