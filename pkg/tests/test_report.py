import csv
import io
import json

import pytest

from conftest import table_scale_corpus
from published_tables import TABLES
from ragppi.dataset import AnnotationRecord, Corpus
from ragppi.report import (MissingAnnotationsError, build_report, dumps_report, estimate_metric,
                           figure_csvs)
from ragppi.simulation import analytic_sweep


@pytest.fixture(scope="module")
def big():
    return table_scale_corpus(seed=0)


@pytest.mark.parametrize("metric", ["relevance", "veracity"])
def test_published_counts(big, metric):
    rows = estimate_metric(big, metric)
    assert [r.theme for r in rows] == ["Finance", "RH", "IT"]
    for r in rows:
        _, a_obs, n, _, N = TABLES[metric][r.theme]
        assert (r.ppi.n, r.ppi.N) == (n, N)
        assert r.human.n == n and r.judge.n == N
        assert r.agreement.n_ctrl == n
        assert r.agreement.observed_agreement == pytest.approx(a_obs, abs=0.15)
        assert r.human.ci[0] <= r.ppi.theta_hat <= r.human.ci[1]


def test_complement_pool(big):
    (fin, *_) = estimate_metric(big, "veracity", pool="complement")
    assert fin.ppi.N == 3985 - 140


def test_inapproprie_filter(big):
    with pytest.raises(MissingAnnotationsError):
        estimate_metric(big, "relevance", difficulties=["Difficile"])


def test_perfect_judge_beats_human():
    corpus = table_scale_corpus(seed=1)
    human = {r.unit_id: r.label for r in corpus.annotations if r.annotator == "human"}
    fixed = [AnnotationRecord(r.unit_id, r.unit_kind, r.metric, r.annotator,
                              human.get(r.unit_id, r.label), r.provenance)
             for r in corpus.annotations]
    mirror = Corpus(corpus.questions.values(), corpus.answers.values(), corpus.sentences.values(), fixed)
    for r in estimate_metric(mirror, "veracity"):
        assert r.agreement.observed_agreement == 1.0
        assert r.ppi.half_width < r.human.half_width
        assert r.ppi.n_effective > r.ppi.n


def test_lambda_zero_matches_human_point(big):
    for r in estimate_metric(big, "relevance", lam=0.0):
        assert r.ppi.theta_hat == r.human.theta_hat


def test_missing_human_labels(big):
    judge_only = Corpus(big.questions.values(), big.answers.values(), big.sentences.values(),
                        [r for r in big.annotations if r.annotator == "judge"])
    with pytest.raises(MissingAnnotationsError):
        estimate_metric(judge_only, "relevance")


@pytest.fixture(scope="module")
def report(big):
    annotated = {m: estimate_metric(big, m) for m in ("relevance", "veracity")}
    sim = analytic_sweep(0.8, 0.8, 140, 3985, 0.05)
    return build_report({"alpha": 0.05}, annotated=annotated, simulation=sim)


class TestReport:
    def test_deterministic_bytes(self, big, report):
        annotated = {m: estimate_metric(big, m) for m in ("relevance", "veracity")}
        again = build_report({"alpha": 0.05}, annotated=annotated,
                             simulation=analytic_sweep(0.8, 0.8, 140, 3985, 0.05))
        assert dumps_report(again) == dumps_report(report)

    def test_strict_json(self, report):
        json.loads(dumps_report(report), parse_constant=lambda c: pytest.fail(f"emitted {c}"))

    def test_csvs_cross_foot(self, report):
        files = figure_csvs(report)
        assert set(files) == {"annotated_relevance.csv", "agreement_relevance.csv",
                              "annotated_veracity.csv", "agreement_veracity.csv", "simulation.csv"}
        rows = list(csv.DictReader(io.StringIO(files["annotated_veracity.csv"])))
        assert len(rows) == 9
        for r in rows:
            src = next(x for x in report["annotated"]["veracity"] if x["stratum"] == r["stratum"])
            assert float(r["theta_hat"]) == src["estimates"][r["method"]]["theta_hat"]
        agr = list(csv.DictReader(io.StringIO(files["agreement_veracity.csv"])))
        assert [int(a["n_judge"]) for a in agr] == [3985, 2408, 3799]
        sim = list(csv.DictReader(io.StringIO(files["simulation.csv"])))
        at = next(s for s in sim if abs(float(s["a"]) - 0.93) < 1e-9)
        assert float(at["half_width"]) == pytest.approx(0.04, abs=0.003)
