"""Sensitivity of the prediction-powered interval to human/judge agreement.

A :class:`JointLabelModel` fixes the human rate ``p``, the judge rate ``q``
and the agreement rate ``a``; the four cells of the joint Bernoulli law follow.
The analytic sweep plugs population moments into the estimator's variance;
the Monte Carlo sweep draws samples and runs :func:`ragppi.inference.ppi_interval`
exactly as production code does.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .inference import PpiInputs, norm_ppf, ppi_interval

_EPS = 1e-12


class InfeasibleAgreementError(ValueError):
    pass


def agreement_bounds(p: float, q: float) -> tuple[float, float]:
    """Feasible agreement range for marginals ``p`` and ``q``."""
    for name, v in (("p", p), ("q", q)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be a probability, got {v}")
    lo = 2.0 * max(0.0, p + q - 1.0) + 1.0 - p - q
    hi = 2.0 * min(p, q) + 1.0 - p - q
    return lo, hi


@dataclass(frozen=True)
class JointLabelModel:
    p: float
    q: float
    a: float

    def __post_init__(self) -> None:
        for name in ("p", "q", "a"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = agreement_bounds(self.p, self.q)
        if not lo - _EPS <= self.a <= hi + _EPS:
            raise InfeasibleAgreementError(
                f"agreement {self.a} infeasible for p={self.p}, q={self.q}; "
                f"feasible range is [{lo:.6g}, {hi:.6g}]"
            )

    @property
    def p11(self) -> float:
        return (self.a - 1.0 + self.p + self.q) / 2.0

    @property
    def p10(self) -> float:
        return self.p - self.p11

    @property
    def p01(self) -> float:
        return self.q - self.p11

    @property
    def p00(self) -> float:
        return 1.0 - self.p - self.q + self.p11

    @property
    def cells(self) -> np.ndarray:
        """Probabilities of (human, judge) = (1,1), (1,0), (0,1), (0,0), clipped at 0."""
        c = np.array([self.p11, self.p10, self.p01, self.p00])
        c = np.clip(c, 0.0, 1.0)
        return c / c.sum()

    @property
    def covariance(self) -> float:
        return self.p11 - self.p * self.q

    @property
    def random_agreement(self) -> float:
        return self.p * self.q + (1.0 - self.p) * (1.0 - self.q)

    def sample(self, n: int, N: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw ``(judge_all, judge_ctrl, human_ctrl)``."""
        cell = rng.choice(4, size=n, p=self.cells)
        human = (cell <= 1).astype(float)
        judge = ((cell == 0) | (cell == 2)).astype(float)
        judge_all = (rng.random(N) < self.q).astype(float)
        return judge_all, judge, human


@dataclass
class SweepPoint:
    a: float
    lam: float
    half_width: float
    n_effective: float
    gain: float
    theta_true: float
    mc_trials: int = 0
    mc_mean_half_width: float | None = None
    mc_sd_half_width: float | None = None
    mc_mean_n_effective: float | None = None
    mc_mean_lambda: float | None = None
    mc_mean_theta: float | None = None
    mc_se_theta: float | None = None
    coverage: float | None = None
    mc_max_correction: float | None = None


@dataclass
class SimulationResult:
    p: float
    q: float
    n: int
    N: int
    alpha: float
    points: list[SweepPoint] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "n": self.n,
            "N": self.N,
            "alpha": self.alpha,
            "points": [
                {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in vars(pt).items()}
                for pt in self.points
            ],
        }

    def point_at(self, a: float) -> SweepPoint:
        for pt in self.points:
            if abs(pt.a - a) < 1e-9:
                return pt
        raise KeyError(a)

    def to_csv(self) -> str:
        cols = ["a", "lambda", "half_width", "n_eff", "gain", "coverage",
                "mc_mean_half_width", "mc_mean_n_effective"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for pt in self.points:
            w.writerow([
                _fmt(pt.a), _fmt(pt.lam), _fmt(pt.half_width), _fmt(pt.n_effective),
                _fmt(pt.gain), _fmt(pt.coverage), _fmt(pt.mc_mean_half_width),
                _fmt(pt.mc_mean_n_effective),
            ])
        return buf.getvalue()


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return repr(round(float(v), 10))


def default_grid(p: float, q: float, step: float = 0.01) -> list[float]:
    """Agreement values from the independence level up to the feasible maximum."""
    if step <= 0:
        raise ValueError("step must be positive")
    hi = agreement_bounds(p, q)[1]
    start = p * q + (1.0 - p) * (1.0 - q)
    count = int(math.floor((hi - start) / step + 1e-9))
    grid = [round(start + i * step, 10) for i in range(count + 1)]
    if hi - grid[-1] > 1e-9:
        grid.append(hi)
    return grid


def analytic_point(model: JointLabelModel, n: int, N: int, alpha: float = 0.05,
                   lam: float | None = None) -> SweepPoint:
    """Population-moment version of the power-tuned interval."""
    var_y = model.p * (1.0 - model.p)
    var_f = model.q * (1.0 - model.q)
    cov = model.covariance
    if lam is None:
        lam = 0.0 if var_f == 0.0 else cov / (var_f * (1.0 + n / N))
        lam = min(1.0, max(0.0, lam))
        if abs(cov) < _EPS:
            lam = 0.0
    var = lam * lam * var_f / N + (lam * lam * var_f - 2.0 * lam * cov + var_y) / n
    var = max(var, 0.0)
    z = norm_ppf(1.0 - alpha / 2.0)
    n_eff = var_y / var if var > 0.0 else math.inf
    return SweepPoint(
        a=model.a, lam=lam, half_width=z * math.sqrt(var), n_effective=n_eff,
        gain=n_eff / n, theta_true=model.p,
    )


def analytic_sweep(p: float, q: float, n: int, N: int, alpha: float = 0.05,
                   agreement_grid: Iterable[float] | None = None) -> SimulationResult:
    grid = default_grid(p, q) if agreement_grid is None else list(agreement_grid)
    models = [JointLabelModel(p, q, a) for a in grid]
    return SimulationResult(
        p=p, q=q, n=n, N=N, alpha=alpha,
        points=[analytic_point(m, n, N, alpha) for m in models],
    )


def monte_carlo_point(model: JointLabelModel, n: int, N: int, alpha: float, trials: int,
                      seed: int | np.random.SeedSequence, lam: float | None = None) -> SweepPoint:
    if trials < 100:
        raise ValueError("Monte Carlo needs at least 100 trials")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    hw = np.empty(trials)
    neff = np.empty(trials)
    lams = np.empty(trials)
    theta = np.empty(trials)
    covered = 0
    max_corr = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t, child in enumerate(ss.spawn(trials)):
            rng = np.random.default_rng(child)
            judge_all, judge_ctrl, human_ctrl = model.sample(n, N, rng)
            est = ppi_interval(PpiInputs(judge_all, judge_ctrl, human_ctrl, alpha=alpha, lam=lam))
            hw[t], neff[t], lams[t], theta[t] = est.half_width, est.n_effective, est.lam, est.theta_hat
            covered += est.ci[0] <= model.p <= est.ci[1]
            if lam == 1.0:
                max_corr = max(max_corr, abs(float(np.mean(judge_ctrl - human_ctrl))))
    base = analytic_point(model, n, N, alpha, lam=lam)
    finite = neff[np.isfinite(neff)]
    base.mc_trials = trials
    base.mc_mean_half_width = float(hw.mean())
    base.mc_sd_half_width = float(hw.std(ddof=1))
    base.mc_mean_n_effective = float(finite.mean()) if finite.size else math.inf
    base.mc_mean_lambda = float(lams.mean())
    base.mc_mean_theta = float(theta.mean())
    base.mc_se_theta = float(theta.std(ddof=1) / math.sqrt(trials))
    base.coverage = covered / trials
    base.mc_max_correction = max_corr if lam == 1.0 else None
    return base


def monte_carlo_sweep(p: float, q: float, n: int, N: int, alpha: float = 0.05,
                      agreement_grid: Sequence[float] | None = None, trials: int = 1000,
                      seed: int = 0, lam: float | None = None) -> SimulationResult:
    """Monte Carlo estimate of interval width, effective size and coverage per agreement."""
    grid = default_grid(p, q) if agreement_grid is None else list(agreement_grid)
    children = np.random.SeedSequence(seed).spawn(len(grid))
    points = [
        monte_carlo_point(JointLabelModel(p, q, a), n, N, alpha, trials, child, lam=lam)
        for a, child in zip(grid, children)
    ]
    return SimulationResult(p=p, q=q, n=n, N=N, alpha=alpha, points=points)
