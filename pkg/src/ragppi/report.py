"""Per-theme estimation tables and the evaluation report.

Every CSV is derived from the report dictionary, so the figure tables and
``report.json`` always agree.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .dataset import DIFFICULTIES, METRIC_UNIT_KIND, THEMES, Answer, Corpus
from .inference import (AgreementReport, MetricEstimate, PpiInputs, UndefinedEstimateError,
                        agreement, ppi_interval, wald_interval)


class MissingAnnotationsError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedRow:
    metric: str
    theme: str
    difficulty: str | None
    human: MetricEstimate
    judge: MetricEstimate
    ppi: MetricEstimate
    agreement: AgreementReport

    @property
    def stratum(self) -> str:
        return self.theme if self.difficulty is None else f"{self.theme}/{self.difficulty}"

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "stratum": self.stratum, "theme": self.theme,
            "difficulty": self.difficulty,
            "estimates": {"human": self.human.to_dict(), "judge": self.judge.to_dict(),
                          "ppi": self.ppi.to_dict()},
            "agreement": self.agreement.to_dict(),
        }


def estimate_metric(corpus: Corpus, metric: str, *, alpha: float = 0.05, lam: float | None = None,
                    level: str = "theme", pool: str = "all", themes: Sequence[str] | None = None,
                    difficulties: Sequence[str] | None = None,
                    answer_filter: Callable[[Answer], bool] | None = None,
                    ddof: int = 1) -> list[AnnotatedRow]:
    """Human-only, judge-only and prediction-powered estimates per stratum.

    The control sample is the set of units carrying both a human and a judge
    label. ``pool="all"`` feeds every judge label to the large-sample term;
    ``pool="complement"`` keeps only judge labels outside the control sample.
    """
    if metric not in METRIC_UNIT_KIND:
        raise ValueError(f"unknown metric {metric!r}")
    if pool not in ("all", "complement"):
        raise ValueError(f"unknown pool {pool!r}")
    if level not in ("theme", "theme_difficulty"):
        raise ValueError(f"unknown level {level!r}")
    human = corpus.labels(metric, "human")
    judge = corpus.labels(metric, "judge")
    groups: dict[tuple, list[str]] = {}
    for uid in sorted(set(human) | set(judge)):
        q = corpus.question_of(uid)
        if themes and q.theme not in themes:
            continue
        if difficulties and q.difficulty not in difficulties:
            continue
        if answer_filter is not None and not answer_filter(corpus.answer_of(uid)):
            continue
        key = (q.theme, q.difficulty if level == "theme_difficulty" else None)
        groups.setdefault(key, []).append(uid)

    rows = []
    for theme, diff in sorted(groups, key=lambda k: (THEMES.index(k[0]),
                                                     -1 if k[1] is None else DIFFICULTIES.index(k[1]))):
        ids = groups[(theme, diff)]
        ctrl = [u for u in ids if u in human and u in judge]
        where = theme if diff is None else f"{theme}/{diff}"
        if len(ctrl) < 2:
            raise MissingAnnotationsError(
                f"{metric} in {where}: {len(ctrl)} units carry both human and judge labels, need >= 2")
        h = [human[u] for u in ids if u in human]
        j_all = [judge[u] for u in ids if u in judge]
        pool_ids = [u for u in ids if u in judge and (pool == "all" or u not in human)]
        if not pool_ids:
            raise MissingAnnotationsError(f"{metric} in {where}: no judge-only labels")
        inputs = PpiInputs(
            judge_all=[judge[u] for u in pool_ids],
            judge_ctrl=[judge[u] for u in ctrl],
            human_ctrl=[human[u] for u in ctrl],
            alpha=alpha, lam=lam, ddof=ddof,
        )
        rows.append(AnnotatedRow(
            metric=metric, theme=theme, difficulty=diff,
            human=wald_interval(sum(h), len(h), alpha),
            judge=wald_interval(sum(j_all), len(j_all), alpha),
            ppi=ppi_interval(inputs),
            agreement=agreement(inputs.judge_ctrl, inputs.human_ctrl),
        ))
    if not rows:
        raise MissingAnnotationsError(f"no {metric} annotations in scope")
    return rows


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def build_report(config: dict, auto_metrics: Iterable | None = None,
                 annotated: dict[str, list[AnnotatedRow]] | None = None,
                 simulation=None) -> dict:
    report = {"config": config}
    if auto_metrics is not None:
        report["auto_metrics"] = [r.to_dict() for r in auto_metrics]
    if annotated is not None:
        report["annotated"] = {m: [r.to_dict() for r in rows] for m, rows in annotated.items()}
    if simulation is not None:
        report["simulation"] = simulation.to_dict()
    return _clean(report)


def dumps_report(report: dict) -> str:
    return json.dumps(report, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def _csv(cols: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def figure_csvs(report: dict) -> dict[str, str]:
    """Plot-ready tables keyed by file name, all read from ``report``."""
    out = {}
    if "auto_metrics" in report:
        cols = ["stratum", "theme", "difficulty", "metric", "numerator", "denominator", "rate",
                "ci_low", "ci_high", "ci_low_clipped", "ci_high_clipped", "half_width"]
        out["auto_metrics.csv"] = _csv(cols, ([r[c] for c in cols] for r in report["auto_metrics"]))
    for metric, rows in report.get("annotated", {}).items():
        est_cols = ["metric", "stratum", "method", "theta_hat", "ci_low", "ci_high", "half_width",
                    "lambda", "n", "N", "n_effective"]
        est_rows = []
        for r in rows:
            for column in ("human", "judge", "ppi"):
                e = r["estimates"][column]
                est_rows.append([metric, r["stratum"], column, e["theta_hat"], e["ci_low"],
                                 e["ci_high"], e["half_width"], e["lambda"], e["n"], e["N"],
                                 e["n_effective"]])
        out[f"annotated_{metric}.csv"] = _csv(est_cols, est_rows)
        agr_cols = ["stratum", "random_agreement", "observed_agreement", "n_human",
                    "n_human_effective", "n_judge"]
        out[f"agreement_{metric}.csv"] = _csv(agr_cols, (
            [r["stratum"], r["agreement"]["random_agreement"], r["agreement"]["observed_agreement"],
             r["estimates"]["ppi"]["n"], r["estimates"]["ppi"]["n_effective"],
             r["estimates"]["ppi"]["N"]]
            for r in rows))
    if "simulation" in report:
        cols = ["a", "lam", "half_width", "n_effective", "gain", "coverage",
                "mc_mean_half_width", "mc_mean_n_effective"]
        out["simulation.csv"] = _csv(
            ["a", "lambda", "half_width", "n_eff", "gain", "coverage", "mc_mean_half_width",
             "mc_mean_n_effective"],
            ([p.get(c) for c in cols] for p in report["simulation"]["points"]))
    return out


__all__ = ["AnnotatedRow", "MissingAnnotationsError", "UndefinedEstimateError", "build_report",
           "dumps_report", "estimate_metric", "figure_csvs"]
