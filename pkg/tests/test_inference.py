from __future__ import annotations

import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ragppi.inference import (InsufficientControlSampleError, PpiInputs, UndefinedEstimateError,
                              agreement, norm_ppf, power_tune_lambda, ppi_interval, ppi_point,
                              ppi_variance, wald_interval)


def oracle_variance(judge_all, judge_ctrl, human_ctrl, lam, ddof=1):
    """Estimated PPI variance written out with the statistics module."""
    var = statistics.variance if ddof == 1 else statistics.pvariance
    resid = [lam * f - y for f, y in zip(judge_ctrl, human_ctrl)]
    return lam * lam * var(judge_all) / len(judge_all) + var(resid) / len(human_ctrl)


def grid_lambda(judge_all, judge_ctrl, human_ctrl, step=1e-4, ddof=1):
    grid = np.arange(0.0, 1.0 + step / 2, step)
    fa, fc, y = (np.asarray(v, float) for v in (judge_all, judge_ctrl, human_ctrl))
    d = ddof
    s_all = fa.var(ddof=d) if fa.size > d else 0.0
    # residual variance evaluated directly for every grid point
    resid = grid[:, None] * fc[None, :] - y[None, :]
    s_res = resid.var(axis=1, ddof=d)
    v = grid ** 2 * s_all / fa.size + s_res / y.size
    return float(grid[int(np.argmin(v))])


@st.composite
def ppi_samples(draw, min_n=2, max_n=60):
    n = draw(st.integers(min_n, max_n))
    N = draw(st.integers(1, 300))
    human = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    judge = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    pool = draw(st.lists(st.integers(0, 1), min_size=N, max_size=N))
    return pool, judge, human


class TestNormPpf:
    @pytest.mark.parametrize("p", [1e-10, 1e-4, 0.01, 0.02425, 0.2, 0.5, 0.8, 0.975, 0.995, 1 - 1e-9])
    def test_matches_scipy(self, p):
        assert norm_ppf(p) == pytest.approx(norm.ppf(p), abs=1e-9)

    def test_z_975(self):
        assert norm_ppf(0.975) == pytest.approx(1.959963984540054, abs=1e-12)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            norm_ppf(p)


class TestWald:
    def test_classical_uncertainty(self):
        est = wald_interval(112, 140, 0.05)
        assert est.theta_hat == 0.8
        assert est.half_width == pytest.approx(0.0663, abs=5e-5)

    def test_degenerate(self):
        est = wald_interval(0, 50)
        assert est.theta_hat == 0 and est.half_width == 0
        assert est.diagnostics

    def test_half(self):
        assert wald_interval(50, 100).half_width == pytest.approx(1.959964 * 0.05, abs=1e-6)

    def test_zero_trials(self):
        with pytest.raises(UndefinedEstimateError):
            wald_interval(0, 0)

    def test_n_effective_is_trials(self):
        est = wald_interval(7, 23)
        assert est.n_effective == 23 and est.lam == 0 and est.method == "classical_wald"


class TestPoint:
    def test_lambda_zero_is_human_mean(self):
        inp = PpiInputs([1, 1, 1, 0], [1, 0, 1], [0, 1, 1])
        assert ppi_point(inp, 0.0) == np.mean([0, 1, 1])

    def test_identical_control_is_judge_mean(self):
        inp = PpiInputs([1, 1, 0, 1, 0], [1, 0, 1], [1, 0, 1])
        assert ppi_point(inp, 1.0) == 0.6

    def test_hand_example(self):
        inp = PpiInputs([1, 1, 0, 1], [1, 0], [0, 0])
        assert ppi_point(inp, 1.0) == 0.25

    @given(ppi_samples())
    def test_lambda_zero_bit_exact(self, s):
        pool, judge, human = s
        inp = PpiInputs(pool, judge, human)
        assert ppi_point(inp, 0.0) == sum(human) / len(human)


class TestPowerTuning:
    def test_independent_labels(self):
        # covariance exactly zero: judge constant on the human-1 half
        inp = PpiInputs([0, 1] * 10, [1, 0, 1, 0], [1, 1, 0, 0])
        assert power_tune_lambda(inp) == 0.0

    def test_identical_control_small(self):
        # population (ddof=0) variances equal on both pools: 0.25 / (0.25 (1 + 2/8))
        inp = PpiInputs([0, 1] * 4, [0, 1], [0, 1], ddof=0)
        assert power_tune_lambda(inp) == pytest.approx(0.8, abs=1e-12)
        assert grid_lambda([0, 1] * 4, [0, 1], [0, 1], ddof=0) == pytest.approx(0.8, abs=1e-4)

    def test_zero_judge_variance(self):
        inp = PpiInputs([0, 1, 1], [1, 1, 1], [0, 1, 1])
        est = ppi_interval(inp)
        assert est.lam == 0.0
        assert any("zero judge variance" in d for d in est.diagnostics)

    def test_clamp_diagnostic(self):
        # anti-correlated judge: negative slope, clamped to 0
        inp = PpiInputs([0, 1] * 10, [1, 0, 1, 0], [0, 1, 0, 1])
        est = ppi_interval(inp)
        assert est.lam == 0.0
        assert any("clamped" in d for d in est.diagnostics)

    @given(ppi_samples(min_n=3))
    def test_binary_slope_never_exceeds_one(self, s):
        pool, judge, human = s
        assert power_tune_lambda(PpiInputs(pool, judge, human)) <= 1.0

    @settings(max_examples=150, deadline=None)
    @given(ppi_samples(min_n=3))
    def test_matches_grid_search(self, s):
        pool, judge, human = s
        lam = power_tune_lambda(PpiInputs(pool, judge, human))
        assert abs(lam - grid_lambda(pool, judge, human)) <= 1e-3

    @settings(max_examples=150, deadline=None)
    @given(ppi_samples())
    def test_dominance(self, s):
        pool, judge, human = s
        inp = PpiInputs(pool, judge, human)
        lam = power_tune_lambda(inp)
        v = ppi_variance(inp, lam)
        assert 0.0 <= lam <= 1.0
        assert v <= min(ppi_variance(inp, 0.0), ppi_variance(inp, 1.0)) + 1e-12


class TestInterval:
    @pytest.mark.filterwarnings("ignore::ragppi.inference.SmallSampleWarning")
    @given(ppi_samples(), st.one_of(st.none(), st.floats(0, 1)))
    def test_invariants(self, s, lam):
        pool, judge, human = s
        est = ppi_interval(PpiInputs(pool, judge, human, lam=lam))
        assert est.ci[0] <= est.theta_hat <= est.ci[1]
        assert est.half_width >= 0.0
        assert 0.0 <= est.lam <= 1.0
        assert est.n_effective >= 0.0

    @given(ppi_samples())
    def test_variance_matches_oracle(self, s):
        pool, judge, human = s
        if len(pool) < 2:
            return
        inp = PpiInputs(pool, judge, human)
        for lam in (0.0, 0.37, 1.0):
            assert ppi_variance(inp, lam) == pytest.approx(oracle_variance(pool, judge, human, lam),
                                                           rel=1e-9, abs=1e-15)

    def test_identical_control_vanishing_term(self):
        pool = [1, 0, 1, 1, 0, 1, 1, 1]
        inp = PpiInputs(pool, [1, 0, 1], [1, 0, 1], lam=1.0)
        est = ppi_interval(inp)
        assert est.theta_hat == np.mean(pool)
        assert est.half_width ** 2 == pytest.approx(norm.ppf(0.975) ** 2 * np.var(pool, ddof=1) / 8,
                                                    rel=1e-12)

    def test_lambda_zero_equals_wald_population_convention(self):
        human = [1] * 30 + [0] * 10
        inp = PpiInputs([1, 0] * 50, [1] * 40, human, lam=0.0, ddof=0)
        ppi = ppi_interval(inp)
        wald = wald_interval(30, 40)
        assert ppi.theta_hat == wald.theta_hat
        assert ppi.half_width == pytest.approx(wald.half_width, rel=1e-12)
        assert ppi.n_effective == pytest.approx(40)

    def test_lambda_zero_unbiased_convention(self):
        human = [1] * 30 + [0] * 10
        ppi = ppi_interval(PpiInputs([1, 0] * 50, [1] * 40, human, lam=0.0))
        assert ppi.half_width == pytest.approx(wald_interval(30, 40).half_width * math.sqrt(40 / 39))
        assert ppi.n_effective == pytest.approx(39)

    def test_errors(self):
        with pytest.raises(InsufficientControlSampleError):
            PpiInputs([1, 0], [1], [1])
        with pytest.raises(ValueError):
            PpiInputs([1, 0], [1, 0], [1])
        with pytest.raises(ValueError):
            PpiInputs([1, 2], [1, 0], [1, 0])
        with pytest.raises(ValueError):
            PpiInputs([1, 0], [1, 0], [1, 0], lam=1.5)


class TestAgreement:
    def test_identical(self):
        assert agreement([1, 0, 1], [1, 0, 1]).observed_agreement == 1.0

    def test_random_formula(self):
        r = agreement([1, 1, 1, 1, 0], [1, 1, 1, 0, 1])
        assert r.p_human == r.p_judge == 0.8
        assert r.random_agreement == pytest.approx(0.68)
        assert r.observed_agreement == pytest.approx(0.6)

    def test_half(self):
        assert agreement([1, 0], [0, 1]).random_agreement == 0.5

    def test_empty(self):
        with pytest.raises(UndefinedEstimateError):
            agreement([], [])


def _draw(rng, n, N, cells, q):
    cell = rng.choice(4, size=n, p=cells)
    human = (cell <= 1).astype(float)
    judge = ((cell == 0) | (cell == 2)).astype(float)
    pool = (rng.random(N) < q).astype(float)
    return pool, judge, human


@pytest.mark.slow
@pytest.mark.filterwarnings("ignore::ragppi.inference.SmallSampleWarning")
@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, None])
def test_unbiasedness_monte_carlo(lam):
    # p = q = 0.8, agreement 0.9 -> p11 = 0.75
    cells = [0.75, 0.05, 0.05, 0.15]
    rng = np.random.default_rng(20240)
    thetas = []
    for _ in range(10_000):
        pool, judge, human = _draw(rng, 140, 3985, cells, 0.8)
        thetas.append(ppi_interval(PpiInputs(pool, judge, human, lam=lam)).theta_hat)
    thetas = np.array(thetas)
    se = thetas.std(ddof=1) / math.sqrt(thetas.size)
    assert abs(thetas.mean() - 0.8) <= 3 * se


@pytest.mark.slow
def test_coverage_synthetic():
    cells = [0.75, 0.05, 0.05, 0.15]
    rng = np.random.default_rng(7)
    hits = 0
    trials = 3000
    for _ in range(trials):
        pool, judge, human = _draw(rng, 140, 3985, cells, 0.8)
        est = ppi_interval(PpiInputs(pool, judge, human))
        hits += est.ci[0] <= 0.8 <= est.ci[1]
    assert hits / trials >= 0.93
