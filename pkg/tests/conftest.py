from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

EXAMPLE_QUESTION = "Comment DataCorp évalue-t-elle la satisfaction et l'expérience des salariés ?"
EXAMPLE_ANSWER = (
    "DataCorp utilise des enquêtes de satisfaction pour obtenir des commentaires sur "
    "l'engagement, le moral et la satisfaction des employés au travail. Ces enquêtes sont "
    "menées dans le cadre des dispositifs convenus avec ComeToMyCorp, une entreprise "
    "spécialisée dans l'évaluation de la satisfaction des employés [^5f7cce^]. Il est à noter "
    "que la direction de DataCorp a également mis en place des actions pour répondre aux "
    "commentaires laissés sur la plateforme JobReview, afin de gérer l'e-réputation de "
    "l'entreprise [^4ca822^][^63fadb^]."
)
EXAMPLE_RETRIEVED = ["5f7cce", "4ca822", "63fadb"]

THEME_DIFFICULTY_COUNTS = {
    ("Finance", "Simple"): 16, ("Finance", "Intermediaire"): 16,
    ("Finance", "Difficile"): 16, ("Finance", "Inapproprie"): 15,
    ("RH", "Simple"): 7, ("RH", "Intermediaire"): 7, ("RH", "Difficile"): 7, ("RH", "Inapproprie"): 3,
    ("IT", "Simple"): 10, ("IT", "Intermediaire"): 10, ("IT", "Difficile"): 10, ("IT", "Inapproprie"): 4,
}


def write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def write_corpus(root: Path, **entities) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    for name, rows in entities.items():
        write_jsonl(root / f"{name}.jsonl", rows)
    return root


def example_corpus_rows():
    return dict(
        questions=[{"question_id": "q1", "theme": "RH", "difficulty": "Simple", "text": EXAMPLE_QUESTION}],
        answers=[{"answer_id": "a1", "question_id": "q1", "repetition_index": 0, "text": EXAMPLE_ANSWER,
                  "retrieved_source_ids": EXAMPLE_RETRIEVED}],
        sentences=[
            {"sentence_id": "a1:0", "answer_id": "a1", "index": 0,
             "text": EXAMPLE_ANSWER[:EXAMPLE_ANSWER.index("[^5f7cce^].") + len("[^5f7cce^].")],
             "cited_source_ids": ["5f7cce"]},
            {"sentence_id": "a1:1", "answer_id": "a1", "index": 1,
             "text": EXAMPLE_ANSWER[EXAMPLE_ANSWER.index("Il est"):],
             "cited_source_ids": ["4ca822", "63fadb"]},
        ],
        sources=[
            {"source_id": "5f7cce", "text": "Enquêtes annuelles menées avec ComeToMyCorp."},
            {"source_id": "4ca822", "text": "Plan d'action e-réputation JobReview."},
            {"source_id": "63fadb", "text": "Réponses de la direction aux avis JobReview."},
        ],
    )


@pytest.fixture
def example_dir(tmp_path):
    return write_corpus(tmp_path / "example", **example_corpus_rows())


def synthetic_corpus_rows(n_per_theme=None, *, n_questions=4, reps=5, seed=0,
                          human_frac=0.3, agreement=0.9, dim=8):
    """Small annotated corpus with embeddings, one sentence per answer.

    Human labels on a random ``human_frac`` of units; judge labels everywhere,
    agreeing with the human label with probability ``agreement``.
    """
    rng = np.random.default_rng(seed)
    rows = {k: [] for k in ("questions", "answers", "sentences", "annotations", "embeddings", "sources")}
    rows["sources"].append({"source_id": "abc123", "text": "Source de référence."})
    themes = ("Finance", "RH", "IT")
    for t_i, theme in enumerate(themes):
        for qi in range(n_questions):
            qid = f"{theme}-q{qi}"
            rows["questions"].append({"question_id": qid, "theme": theme, "difficulty": "Simple",
                                      "text": f"Question {qi} ?"})
            for r in range(reps):
                aid = f"{qid}-r{r}"
                text = f"Réponse {r} pour {qid} [^abc123^]."
                rows["answers"].append({"answer_id": aid, "question_id": qid, "repetition_index": r,
                                        "text": text, "retrieved_source_ids": ["abc123"]})
                sid = f"{aid}:0"
                rows["sentences"].append({"sentence_id": sid, "answer_id": aid, "index": 0,
                                          "text": text, "cited_source_ids": ["abc123"]})
                center = np.eye(dim)[(t_i * 3 + qi) % dim]
                for uid in (aid, sid):
                    rows["embeddings"].append({"unit_id": uid,
                                               "vector": (center + 0.05 * rng.normal(size=dim)).tolist()})
                for uid, kind, metric in ((aid, "answer", "relevance"), (sid, "sentence", "veracity")):
                    y = int(rng.random() < 0.7)
                    f = y if rng.random() < agreement else 1 - y
                    rows["annotations"].append({"unit_id": uid, "unit_kind": kind, "metric": metric,
                                                "annotator": "judge", "label": f, "provenance": "mock"})
                    if rng.random() < human_frac:
                        rows["annotations"].append({"unit_id": uid, "unit_kind": kind, "metric": metric,
                                                    "annotator": "human", "label": y, "provenance": "h1"})
    return rows


@pytest.fixture
def synthetic_dir(tmp_path):
    return write_corpus(tmp_path / "synthetic", **synthetic_corpus_rows())


def table_scale_corpus(seed=0, p=0.8):
    """In-memory corpus with the published per-theme unit and annotation counts.

    Every unit carries a judge label; the first ``n`` units of each theme also
    carry a human label agreeing with the judge at the published rate.
    """
    from published_tables import RELEVANCE, VERACITY
    from ragppi.dataset import AnnotationRecord, Answer, Corpus, Question, Sentence

    rng = np.random.default_rng(seed)
    questions, answers, sentences, ann = [], [], [], []

    def label_pair(a_obs):
        y = int(rng.random() < p)
        return y, (y if rng.random() < a_obs else 1 - y)

    for theme in RELEVANCE:
        _, a_rel, n_rel, _, n_ans = RELEVANCE[theme]
        _, a_ver, n_ver, _, n_sent = VERACITY[theme]
        qid = f"{theme}-q"
        questions.append(Question(qid, theme, "Simple", "Question ?"))
        per, extra = divmod(n_sent, n_ans)
        s_count = 0
        for i in range(n_ans):
            aid = f"{theme}-a{i:04d}"
            k = per + (i < extra)
            parts = [f"Phrase {j} [^abc123^]." for j in range(k)]
            answers.append(Answer(aid, qid, i, " ".join(parts), ("abc123",)))
            y, f = label_pair(a_rel)
            ann.append(AnnotationRecord(aid, "answer", "relevance", "judge", f, "mock"))
            if i < n_rel:
                ann.append(AnnotationRecord(aid, "answer", "relevance", "human", y, "h"))
            for j, text in enumerate(parts):
                sid = f"{aid}:{j}"
                sentences.append(Sentence(sid, aid, j, text, ("abc123",)))
                y, f = label_pair(a_ver)
                ann.append(AnnotationRecord(sid, "sentence", "veracity", "judge", f, "mock"))
                if s_count < n_ver:
                    ann.append(AnnotationRecord(sid, "sentence", "veracity", "human", y, "h"))
                s_count += 1
    return Corpus(questions, answers, sentences, ann)


ACCEPTANCE_LOG: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)
