import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sobolev_proxy.problems import PenalizedProblem, get_problem
from sobolev_proxy.proxy import (
    ACTIVATIONS,
    PortfolioProjection,
    ProxyModel,
    forward,
    init_model,
    input_jacobian,
    load_model,
    loss_and_gradient,
    make_batch,
    project_portfolio,
    raw_forward,
    save_model,
)

from conftest import central_diff, fd_loss_gradient, gradient_mismatch, random_records

SMOOTH = ["tanh", "softplus", "sigmoid"]


def softplus_reference(model, p):
    h = np.asarray(p, dtype=float)
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        z = W @ h + b
        h = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0)
    return model.weights[-1] @ h + model.biases[-1]


class TestForward:
    def test_zero_network(self):
        m = init_model(3, [8, 8], 2, "tanh")
        m.set_flat(np.zeros(m.flat().size))
        assert np.array_equal(forward(m, np.array([1.0, -2.0, 0.5])), np.zeros(2))

    def test_single_affine_layer(self, rng):
        m = init_model(3, [], 2)
        m.biases[0][:] = rng.normal(size=2)
        p = rng.normal(size=3)
        np.testing.assert_allclose(forward(m, p), m.weights[0] @ p + m.biases[0], rtol=1e-15)
        assert np.array_equal(input_jacobian(m, p), m.weights[0])

    def test_softplus_matches_reimplementation(self, rng):
        m = init_model(4, [7, 5], 3, "softplus", seed=2)
        for b in m.biases:
            b[:] = rng.normal(size=b.size)
        for _ in range(10):
            p = rng.normal(size=4)
            np.testing.assert_allclose(forward(m, p), softplus_reference(m, p), rtol=1e-13, atol=1e-14)

    def test_batch_matches_pointwise(self, rng):
        m = init_model(3, [6], 2, "sigmoid")
        P = rng.normal(size=(5, 3))
        np.testing.assert_allclose(forward(m, P), np.array([forward(m, p) for p in P]), rtol=1e-14)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            init_model(2, [3], 1, "gelu")


class TestInputJacobian:
    @pytest.mark.parametrize("act", SMOOTH)
    def test_against_central_differences(self, act, rng):
        m = init_model(3, [10, 6], 4, act, seed=1)
        for _ in range(100):
            p = rng.normal(size=3)
            fd = central_diff(lambda v: raw_forward(m, v), p)
            np.testing.assert_allclose(input_jacobian(m, p), fd, rtol=1e-5, atol=1e-9)

    @pytest.mark.parametrize("act", ["relu", "leaky_relu"])
    def test_piecewise_linear_away_from_kinks(self, act, rng):
        m = init_model(3, [10], 2, act, seed=4)
        checked = 0
        for _ in range(50):
            p = rng.normal(size=3)
            if np.min(np.abs(m.weights[0] @ p + m.biases[0])) < 1e-6:
                continue
            checked += 1
            fd = central_diff(lambda v: raw_forward(m, v), p)
            np.testing.assert_allclose(input_jacobian(m, p), fd, rtol=1e-5, atol=1e-9)
        assert checked > 0

    def test_batched_shape(self, rng):
        m = init_model(3, [5], 2)
        assert input_jacobian(m, rng.normal(size=(7, 3))).shape == (7, 2, 3)

    @pytest.mark.parametrize("name", list(ACTIVATIONS))
    def test_activation_derivatives(self, name, rng):
        x = rng.uniform(-3, 3, 200)
        x = x[np.abs(x) > 1e-3]
        f, d1, d2 = ACTIVATIONS[name](x)
        h = 1e-6
        np.testing.assert_allclose(d1, (ACTIVATIONS[name](x + h)[0] - ACTIVATIONS[name](x - h)[0]) / (2 * h), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(d2, (ACTIVATIONS[name](x + h)[1] - ACTIVATIONS[name](x - h)[1]) / (2 * h), rtol=1e-5, atol=1e-8)


class TestLossGradient:
    @pytest.mark.parametrize("act", SMOOTH)
    @pytest.mark.parametrize("mode", ["value", "sobolev", "selfsup", "selfsup_sobolev"])
    def test_against_finite_differences(self, act, mode, rng):
        prob = get_problem("toy-qp-3")
        pen = PenalizedProblem(prob, 10.0, 5.0) if mode.startswith("selfsup") else None
        m = init_model(3, [8, 5], 3, act, seed=int(rng.integers(100)))
        for b in m.biases:
            b[:] = 0.3 * rng.normal(size=b.size)
        batch = make_batch(random_records(3, 3, 4, rng), 3, 3)
        res = loss_and_gradient(m, batch, 0.3, mode, pen)
        assert gradient_mismatch(res.flat_grad(), fd_loss_gradient(m, batch, 0.3, mode, pen)) <= 1e-4

    def test_through_projection_head(self, rng):
        prob = get_problem("markowitz-3")
        head = PortfolioProjection(prob.sigma_half, prob.budget)
        m = init_model(4, [6], 3, "tanh", seed=3, projection=head)
        recs = random_records(3, 4, 4, rng)
        for r in recs:
            r.p = rng.uniform(prob.p_lo, prob.p_hi)
        batch = make_batch(recs, 3, 4)
        for mode in ("sobolev", "selfsup_sobolev"):
            pen = PenalizedProblem(prob) if mode.startswith("selfsup") else None
            res = loss_and_gradient(m, batch, 0.3, mode, pen)
            assert gradient_mismatch(res.flat_grad(), fd_loss_gradient(m, batch, 0.3, mode, pen)) <= 1e-4

    def test_through_active_scaling_stages(self, rng):
        prob = get_problem("markowitz-3")
        head = PortfolioProjection(prob.sigma_half, prob.budget)
        m = init_model(4, [6], 3, "tanh", seed=5, projection=head)
        m.biases[-1][:] = [1.5, 0.9, 1.2]
        recs = random_records(3, 4, 3, rng)
        for r in recs:
            r.p = rng.uniform(prob.p_lo, prob.p_hi)
        y = raw_forward(m, np.array([r.p for r in recs]))
        assert np.all(y.sum(axis=1) > 1.0)
        batch = make_batch(recs, 3, 4)
        for mode in ("value", "selfsup"):
            pen = PenalizedProblem(prob) if mode == "selfsup" else None
            res = loss_and_gradient(m, batch, 0.0, mode, pen)
            assert gradient_mismatch(res.flat_grad(), fd_loss_gradient(m, batch, 0.0, mode, pen)) <= 1e-4

    def test_zero_weight_equals_value_loss(self, rng):
        m = init_model(3, [6], 2, "tanh")
        batch = make_batch(random_records(2, 3, 5, rng), 2, 3)
        a = loss_and_gradient(m, batch, 0.0, "sobolev")
        b = loss_and_gradient(m, batch, 0.0, "value")
        assert a.loss == b.loss and np.array_equal(a.flat_grad(), b.flat_grad())

    def test_empty_masks_equal_zero_weight(self, rng):
        m = init_model(3, [6], 2, "tanh")
        batch = make_batch(random_records(2, 3, 5, rng, empty_masks=True), 2, 3)
        a = loss_and_gradient(m, batch, 0.7, "sobolev")
        b = loss_and_gradient(m, batch, 0.0, "sobolev")
        assert a.loss == b.loss and np.array_equal(a.flat_grad(), b.flat_grad())

    def test_relu_under_sobolev_loss_warns(self, rng):
        m = init_model(3, [6], 2, "relu")
        batch = make_batch(random_records(2, 3, 3, rng), 2, 3)
        with pytest.warns(RuntimeWarning):
            res = loss_and_gradient(m, batch, 0.3, "sobolev")
        assert res.warning
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert loss_and_gradient(m, batch, 0.3, "value").warning is None

    def test_selfsup_without_penalty_rejected(self, rng):
        m = init_model(3, [6], 3)
        batch = make_batch(random_records(3, 3, 2, rng), 3, 3)
        with pytest.raises(ValueError):
            loss_and_gradient(m, batch, 0.0, "selfsup")


class TestProjection:
    def head(self, n=2, sigma=None, budget=1.0):
        sigma = np.eye(n) if sigma is None else sigma
        return PortfolioProjection(np.linalg.cholesky(sigma), budget)

    def test_feasible_input_unchanged(self):
        x = np.array([0.2, 0.3])
        assert np.array_equal(project_portfolio(self.head(), x, np.array([0.1, 0.1, 1.0])), x)

    def test_clip_only(self):
        out = project_portfolio(self.head(), np.array([-1.0, 0.5]), np.array([0.1, 0.1, 1e6]))
        assert np.array_equal(out, [0.0, 0.5])

    def test_all_three_stages(self):
        out = project_portfolio(self.head(), np.array([2.0, 2.0]), np.array([0.1, 0.1, 0.1]))
        np.testing.assert_allclose(out, [0.1 / np.sqrt(2)] * 2, rtol=1e-15)

    def test_random_inputs_feasible_and_idempotent(self, rng):
        prob = get_problem("markowitz-5")
        head = PortfolioProjection(prob.sigma_half, prob.budget)
        for _ in range(2000):
            x = rng.normal(size=5) * 10.0 ** rng.uniform(-3, 6)
            p = rng.uniform(prob.p_lo, prob.p_hi)
            y = head(x, p)
            assert np.all(y >= 0)
            assert y.sum() <= prob.budget + 1e-9
            assert prob.risk_soc(y) <= p[-1] + 1e-9
            np.testing.assert_allclose(head(y, p), y, rtol=0, atol=1e-12)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), st.floats(0.01, 2.0))
    def test_feasibility_property(self, x, smax):
        sigma = np.array([[0.04, 0.01, 0.0], [0.01, 0.09, 0.02], [0.0, 0.02, 0.16]])
        head = self.head(3, sigma)
        y = head(np.array(x), np.array([0.1, 0.1, 0.1, smax]))
        assert np.all(y >= 0) and y.sum() <= 1 + 1e-9
        assert np.linalg.norm(head.sigma_half.T @ y) <= smax + 1e-9

    def test_forward_applies_head_last(self, rng):
        prob = get_problem("markowitz-3")
        head = PortfolioProjection(prob.sigma_half, prob.budget)
        m = init_model(4, [5], 3, seed=1, projection=head)
        p = rng.uniform(prob.p_lo, prob.p_hi)
        np.testing.assert_array_equal(forward(m, p), head(raw_forward(m, p), p))


class TestPersistence:
    def test_round_trip(self, rng):
        prob = get_problem("markowitz-3")
        m = init_model(4, [5, 3], 3, "softplus", seed=8, projection=PortfolioProjection(prob.sigma_half, 1.0))
        back = load_model(save_model(m))
        assert back.widths == m.widths and back.activation == m.activation
        assert np.array_equal(back.flat(), m.flat())
        assert np.array_equal(back.projection.sigma_half, m.projection.sigma_half)
        assert isinstance(back, ProxyModel)
