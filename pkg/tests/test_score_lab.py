import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssdlab.numerics import RngStream
from ssdlab.score_lab import (
    DiffusedState,
    Gaussian2DConfig,
    GridSpec,
    draw_training_points,
    empirical_score,
    kde_weights,
    masked_score,
    population_score,
    score_error_field,
)

CFG = Gaussian2DConfig(rho=0.7, t=0.1, n_points=10)
NONEMPTY_2D = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])


def closed_form_inverse_2x2(m):
    a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    return np.array([[d, -b], [-c, a]]) / (a * d - b * c)


def per_mask_score(cfg, data, x, m):
    """Oracle for a single fixed mask, written with explicit loops."""
    delta = 1.0 - math.exp(-2.0 * cfg.t)
    disp = [m * (math.exp(-cfg.t) * np.asarray(p) - x) for p in data]
    logits = np.array([-0.5 * float(d @ d) / delta for d in disp])
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return sum(wi * d for wi, d in zip(w, disp)) / delta


class TestConfig:
    def test_rejects_bad_rho(self):
        with pytest.raises(ValueError):
            Gaussian2DConfig(rho=1.0)

    def test_rejects_bad_t(self):
        with pytest.raises(ValueError):
            Gaussian2DConfig(t=0.0)

    def test_diffused_state(self):
        s = DiffusedState.at(CFG)
        assert s.delta_t == pytest.approx(1 - math.exp(-0.2), rel=1e-15)
        assert s.shrink == pytest.approx(math.exp(-0.1), rel=1e-15)
        assert 0 < s.delta_t < 1


class TestPopulationScore:
    def test_zero_at_mode(self):
        np.testing.assert_array_equal(population_score(CFG, [0.0, 0.0]), [0.0, 0.0])

    def test_closed_form_example(self):
        e = math.exp(-0.2)
        sig_t = e * np.array([[1.0, 0.7], [0.7, 1.0]]) + (1 - e) * np.eye(2)
        expected = -closed_form_inverse_2x2(sig_t) @ np.array([1.0, 0.0])
        np.testing.assert_allclose(population_score(CFG, [1.0, 0.0]), expected, rtol=1e-13)

    def test_frozen_value(self):
        # -inv([[1, 0.7e], [0.7e, 1]]) @ (1, 0) with e = exp(-0.2)
        e = math.exp(-0.2)
        r = 0.7 * e
        np.testing.assert_allclose(population_score(CFG, [1.0, 0.0]), [-1 / (1 - r * r), r / (1 - r * r)], rtol=1e-13)

    def test_standard_normal_limit(self):
        cfg = Gaussian2DConfig(rho=0.0, t=50.0)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(population_score(cfg, x), -x, rtol=1e-12)

    def test_batch_matches_single(self):
        x = np.array([[1.0, 2.0], [-0.5, 0.1]])
        batch = population_score(CFG, x)
        for i in range(2):
            np.testing.assert_array_equal(batch[i], population_score(CFG, x[i]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.floats(-3, 3))
def test_population_score_linear(alpha, x1, x2):
    x = np.array([x1, x2])
    np.testing.assert_allclose(population_score(CFG, alpha * x), alpha * population_score(CFG, x), atol=1e-12)


class TestEmpiricalScore:
    def test_single_point_at_origin(self):
        delta = DiffusedState.at(CFG).delta_t
        np.testing.assert_allclose(empirical_score(CFG, [[0.0, 0.0]], [1.0, 1.0]), [-1 / delta, -1 / delta], rtol=1e-14)

    def test_at_dominant_point(self):
        data = np.array([[0.5, -0.5], [30.0, 30.0], [-30.0, 20.0]])
        x = math.exp(-CFG.t) * data[0]
        np.testing.assert_allclose(empirical_score(CFG, data, x), [0.0, 0.0], atol=1e-12)

    def test_matches_loop_oracle(self):
        data = draw_training_points(CFG, 3)
        x = np.array([0.4, -1.1])
        np.testing.assert_allclose(empirical_score(CFG, data, x), per_mask_score(CFG, data, x, np.ones(2)), rtol=1e-12)

    def test_bounded_by_largest_displacement(self):
        data = draw_training_points(CFG, 5)
        delta = DiffusedState.at(CFG).delta_t
        grid = GridSpec().points()
        s = empirical_score(CFG, data, grid)
        xt = math.exp(-CFG.t) * data
        bound = np.max(np.linalg.norm(xt[None] - grid[:, None], axis=-1), axis=1) / delta
        assert np.all(np.linalg.norm(s, axis=1) <= bound * (1 + 1e-12))

    def test_far_from_data_error_grows(self):
        data = draw_training_points(CFG, 0)
        grid = GridSpec().points()
        err = np.linalg.norm(empirical_score(CFG, data, grid) - population_score(CFG, grid), axis=1)
        dist = np.min(np.linalg.norm(math.exp(-CFG.t) * data[None] - grid[:, None], axis=-1), axis=1)
        near, far = dist < np.quantile(dist, 0.25), dist > np.quantile(dist, 0.75)
        assert err[far].mean() > err[near].mean()

    def test_large_sample_approaches_population(self):
        # many KDE centres from the true distribution: error shrinks near the bulk
        cfg = Gaussian2DConfig(rho=0.7, t=0.5, n_points=20000)
        data = draw_training_points(cfg, 1)
        x = np.array([[0.2, 0.1], [-0.5, -0.3], [0.6, 0.4]])
        np.testing.assert_allclose(empirical_score(cfg, data, x), population_score(cfg, x), atol=0.1)


class TestKdeWeights:
    def test_sum_to_one(self):
        w = kde_weights(np.array([[1.0, 5.0, 0.2], [1e4, 1e4 + 1, 3e4]]), 0.1)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-15)
        assert np.all(np.isfinite(w))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=1, max_size=8), st.floats(-1e3, 1e3))
    def test_shift_invariance(self, d, c):
        d = np.array(d)
        np.testing.assert_allclose(kde_weights(d + c, 0.3), kde_weights(d, 0.3), atol=1e-10)


class TestMaskedScore:
    def test_eta_zero_is_empirical_bitwise(self):
        data = draw_training_points(CFG, 2)
        x = np.array([0.7, -0.2])
        a = masked_score(CFG, data, x, 0.0, 5, RngStream(1))
        assert a.tobytes() == empirical_score(CFG, data, x).tobytes()

    def test_three_mask_enumeration(self):
        data = draw_training_points(CFG, 4)
        x = np.array([1.0, -0.5])
        exact = np.mean([per_mask_score(CFG, data, x, m) for m in NONEMPTY_2D], axis=0)
        mc = masked_score(CFG, data, x, 0.5, 10**5, RngStream(8))
        np.testing.assert_allclose(mc, exact, rtol=0.01)

    def test_single_point_shrinks_by_two_thirds(self):
        # each coordinate is observed in 2 of the 3 equally likely nonempty masks
        delta = DiffusedState.at(CFG).delta_t
        x = np.array([1.0, 2.0])
        mc = masked_score(CFG, [[0.0, 0.0]], x, 0.5, 10**5, RngStream(9))
        np.testing.assert_allclose(mc, -(2 / 3) * x / delta, rtol=0.01)

    def test_per_point_masks_enumeration(self):
        data = draw_training_points(CFG, 4)[:2]
        x = np.array([0.3, 0.3])
        delta = DiffusedState.at(CFG).delta_t
        xt = math.exp(-CFG.t) * data
        exact = np.zeros(2)
        for ma in NONEMPTY_2D:
            for mb in NONEMPTY_2D:
                disp = np.stack([ma * (xt[0] - x), mb * (xt[1] - x)])
                w = kde_weights(np.sum(disp**2, axis=1), delta)
                exact += w @ disp / delta / 9
        mc = masked_score(CFG, data, x, 0.5, 10**5, RngStream(2), per_point=True)
        np.testing.assert_allclose(mc, exact, rtol=0.01)

    def test_deterministic(self):
        data = draw_training_points(CFG, 1)
        a = masked_score(CFG, data, [0.1, 0.2], 0.5, 64, RngStream(3, 1))
        b = masked_score(CFG, data, [0.1, 0.2], 0.5, 64, RngStream(3, 1))
        assert a.tobytes() == b.tobytes()


class TestErrorField:
    def test_grid_layout(self):
        g = GridSpec(resolution=3).points()
        np.testing.assert_array_equal(g[:3], [[-3, -3], [0, -3], [3, -3]])
        assert g.shape == (9, 2)

    def test_mean_below_max(self):
        data = draw_training_points(CFG, 0)
        res = score_error_field(CFG, data, 0.5, GridSpec(resolution=10), seed=0)
        for e in (res.empirical_error, res.masked_error):
            assert 0 <= e.mean_error <= e.max_error
            assert np.all(e.abs_error >= 0)

    def test_l1_flag(self):
        data = draw_training_points(CFG, 0)
        spec = GridSpec(resolution=6)
        l2 = score_error_field(CFG, data, 0.5, spec, n_masks=8, error_norm="l2")
        l1 = score_error_field(CFG, data, 0.5, spec, n_masks=8, error_norm="l1")
        assert np.all(l1.masked_error.abs_error >= l2.masked_error.abs_error - 1e-12)
        with pytest.raises(ValueError):
            score_error_field(CFG, data, 0.5, spec, error_norm="huber")

    def test_executor_invariant(self):
        data = draw_training_points(CFG, 6)
        spec = GridSpec(resolution=8)
        serial = score_error_field(CFG, data, 0.5, spec, seed=4)
        with ThreadPoolExecutor(4) as ex:
            threaded = score_error_field(CFG, data, 0.5, spec, seed=4, executor=ex)
        assert serial.masked.vectors.tobytes() == threaded.masked.vectors.tobytes()

    def test_masked_beats_empirical_ordering(self):
        wins = 0
        for seed in range(10):
            data = draw_training_points(CFG, seed)
            res = score_error_field(CFG, data, 0.5, GridSpec(), n_masks=64, seed=seed)
            wins += res.masked_error.mean_error < res.empirical_error.mean_error
        assert wins >= 8
