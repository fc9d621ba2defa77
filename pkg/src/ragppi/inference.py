"""Wald intervals, prediction-powered mean estimation and agreement diagnostics.

All estimators here target the mean of a binary label. The prediction-powered
estimator combines judge labels on a large pool (``judge_all``) with a small
control sample carrying both judge and human labels::

    theta = lam * mean(judge_all) - (lam * mean(judge_ctrl) - mean(human_ctrl))

with standard error::

    se^2 = lam^2 * var(judge_all) / N + var(lam * judge_ctrl - human_ctrl) / n
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "AgreementReport",
    "InsufficientControlSampleError",
    "MetricEstimate",
    "PpiInputs",
    "UndefinedEstimateError",
    "agreement",
    "norm_ppf",
    "power_tune_lambda",
    "ppi_interval",
    "ppi_point",
    "ppi_variance",
    "wald_interval",
]


class UndefinedEstimateError(ValueError):
    """Raised when an estimate has no data to be computed from."""


class InsufficientControlSampleError(ValueError):
    """Raised when the control sample is too small to estimate a variance."""


class SmallSampleWarning(UserWarning):
    pass


# Acklam's rational approximation, refined with one Halley step on erfc.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Inverse CDF of the standard normal distribution."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def _z(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return norm_ppf(1.0 - alpha / 2.0)


@dataclass(frozen=True)
class MetricEstimate:
    """Point estimate of a rate with its confidence interval.

    ``theta_hat`` is not clipped; clip for display with :meth:`clipped_ci`.
    ``N`` is 0 for classical estimates that use no judge-only pool.
    """

    theta_hat: float
    ci: tuple[float, float]
    half_width: float
    lam: float
    n: int
    N: int
    n_effective: float
    method: str
    alpha: float = 0.05
    diagnostics: tuple[str, ...] = ()

    def clipped_ci(self) -> tuple[float, float]:
        lo, hi = self.ci
        return max(0.0, lo), min(1.0, hi)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta_hat": self.theta_hat,
            "ci_low": self.ci[0],
            "ci_high": self.ci[1],
            "half_width": self.half_width,
            "lambda": self.lam,
            "n": self.n,
            "N": self.N,
            "n_effective": self.n_effective if math.isfinite(self.n_effective) else None,
            "alpha": self.alpha,
            "diagnostics": list(self.diagnostics),
        }


def wald_interval(successes: int, trials: int, alpha: float = 0.05) -> MetricEstimate:
    """Normal-approximation interval ``p +/- z * sqrt(p (1 - p) / t)``.

    >>> round(wald_interval(112, 140).half_width, 4)
    0.0663
    """
    if trials < 1:
        raise UndefinedEstimateError("rate undefined for zero trials")
    if not 0 <= successes <= trials:
        raise ValueError(f"successes must lie in [0, {trials}], got {successes}")
    theta = successes / trials
    hw = _z(alpha) * math.sqrt(theta * (1.0 - theta) / trials)
    notes = ("degenerate sample: zero variance",) if successes in (0, trials) else ()
    return MetricEstimate(
        theta_hat=theta,
        ci=(theta - hw, theta + hw),
        half_width=hw,
        lam=0.0,
        n=trials,
        N=0,
        n_effective=float(trials),
        method="classical_wald",
        alpha=alpha,
        diagnostics=notes,
    )


def _as_labels(values: Sequence[int] | np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and not np.all((arr == 0.0) | (arr == 1.0)):
        raise ValueError(f"{name} must contain only 0/1 labels")
    return arr


@dataclass(frozen=True)
class PpiInputs:
    """Inputs of the prediction-powered estimator.

    ``lam=None`` selects power tuning; a float in [0, 1] fixes the weight.
    """

    judge_all: np.ndarray
    judge_ctrl: np.ndarray
    human_ctrl: np.ndarray
    alpha: float = 0.05
    lam: float | None = None
    ddof: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "judge_all", _as_labels(self.judge_all, "judge_all"))
        object.__setattr__(self, "judge_ctrl", _as_labels(self.judge_ctrl, "judge_ctrl"))
        object.__setattr__(self, "human_ctrl", _as_labels(self.human_ctrl, "human_ctrl"))
        if self.judge_ctrl.size != self.human_ctrl.size:
            raise ValueError(
                f"control vectors differ in length: {self.judge_ctrl.size} judge "
                f"vs {self.human_ctrl.size} human"
            )
        if self.n < 2:
            raise InsufficientControlSampleError(
                f"control sample needs at least 2 units, got {self.n}"
            )
        if self.N < 1:
            raise ValueError("judge_all must contain at least one label")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.ddof not in (0, 1):
            raise ValueError("ddof must be 0 or 1")

    @property
    def n(self) -> int:
        return int(self.human_ctrl.size)

    @property
    def N(self) -> int:
        return int(self.judge_all.size)


def _var(x: np.ndarray, ddof: int) -> float:
    if x.size <= ddof:
        return 0.0
    return float(np.var(x, ddof=ddof))


def ppi_point(inputs: PpiInputs, lam: float) -> float:
    return lam * float(np.mean(inputs.judge_all)) - (
        lam * float(np.mean(inputs.judge_ctrl)) - float(np.mean(inputs.human_ctrl))
    )


def ppi_variance(inputs: PpiInputs, lam: float) -> float:
    """Estimated variance of :func:`ppi_point` at weight ``lam``."""
    residual = lam * inputs.judge_ctrl - inputs.human_ctrl
    return (
        lam * lam * _var(inputs.judge_all, inputs.ddof) / inputs.N
        + _var(residual, inputs.ddof) / inputs.n
    )


def _tuned_lambda(inputs: PpiInputs) -> tuple[float, list[str]]:
    # Minimiser of ppi_variance, which is quadratic in lam:
    #   lam^2 (s_all / N + s_ctrl / n) - 2 lam cov / n + s_y / n
    d = inputs.ddof
    s_ctrl = _var(inputs.judge_ctrl, d)
    if s_ctrl == 0.0:
        return 0.0, ["zero judge variance on control sample: lambda set to 0"]
    n, N = inputs.n, inputs.N
    cov = float(
        np.sum((inputs.judge_ctrl - inputs.judge_ctrl.mean()) * (inputs.human_ctrl - inputs.human_ctrl.mean()))
        / (n - d)
    )
    s_all = _var(inputs.judge_all, d)
    raw = cov / (s_ctrl + (n / N) * s_all)
    notes: list[str] = []
    if raw < 0.0 or raw > 1.0:
        notes.append(f"lambda clamped to [0, 1] (unclamped {raw:.6g})")
    return min(1.0, max(0.0, raw)), notes


def power_tune_lambda(inputs: PpiInputs) -> float:
    """Variance-minimising judge weight, clamped to [0, 1]."""
    return _tuned_lambda(inputs)[0]


def ppi_interval(inputs: PpiInputs) -> MetricEstimate:
    """Prediction-powered estimate of the human-label mean with its interval."""
    if inputs.lam is None:
        lam, notes = _tuned_lambda(inputs)
    else:
        lam, notes = float(inputs.lam), []
    theta = ppi_point(inputs, lam)
    se2 = ppi_variance(inputs, lam)
    hw = _z(inputs.alpha) * math.sqrt(se2)
    p_hat = float(np.mean(inputs.human_ctrl))
    base = p_hat * (1.0 - p_hat)
    if se2 > 0.0:
        n_eff = base / se2
    elif base > 0.0:
        n_eff = math.inf
    else:
        n_eff = float(inputs.n)
    if p_hat in (0.0, 1.0):
        notes.append("degenerate human control sample: all labels equal")
        warnings.warn("human control labels are all equal", SmallSampleWarning, stacklevel=2)
    return MetricEstimate(
        theta_hat=theta,
        ci=(theta - hw, theta + hw),
        half_width=hw,
        lam=lam,
        n=inputs.n,
        N=inputs.N,
        n_effective=n_eff,
        method="ppi",
        alpha=inputs.alpha,
        diagnostics=tuple(notes),
    )


@dataclass(frozen=True)
class AgreementReport:
    observed_agreement: float
    random_agreement: float
    p_human: float
    p_judge: float
    n_ctrl: int

    def to_dict(self) -> dict:
        return {
            "observed_agreement": self.observed_agreement,
            "random_agreement": self.random_agreement,
            "p_human": self.p_human,
            "p_judge": self.p_judge,
            "n_ctrl": self.n_ctrl,
        }


def agreement(judge_ctrl: Sequence[int], human_ctrl: Sequence[int]) -> AgreementReport:
    """Observed agreement and the agreement expected under independent labelling."""
    f = _as_labels(judge_ctrl, "judge_ctrl")
    y = _as_labels(human_ctrl, "human_ctrl")
    if f.size != y.size:
        raise ValueError("judge and human vectors differ in length")
    if f.size == 0:
        raise UndefinedEstimateError("agreement undefined on an empty control sample")
    ph, pj = float(y.mean()), float(f.mean())
    return AgreementReport(
        observed_agreement=float(np.mean(f == y)),
        random_agreement=ph * pj + (1.0 - ph) * (1.0 - pj),
        p_human=ph,
        p_judge=pj,
        n_ctrl=int(f.size),
    )
