import json

import pytest

from conftest import THEME_DIFFICULTY_COUNTS, example_corpus_rows, synthetic_corpus_rows, write_corpus, write_jsonl
from ragppi.dataset import (AnnotationRecord, Corpus, DanglingReferenceError, DuplicateIdError,
                            EnumViolationError, FieldMap, InvariantError, MalformedLineError,
                            dump_corpus, load_annotations, load_corpus, strata)


def counts_rows():
    questions = []
    for (theme, diff), count in THEME_DIFFICULTY_COUNTS.items():
        for i in range(count):
            questions.append({"question_id": f"{theme}-{diff}-{i}", "theme": theme,
                              "difficulty": diff, "text": f"Q{i} ?"})
    return {"questions": questions}


class TestLoad:
    def test_theme_difficulty_counts(self, tmp_path):
        corpus = load_corpus(write_corpus(tmp_path / "c", **counts_rows()))
        assert corpus.table() == THEME_DIFFICULTY_COUNTS
        assert len(corpus.questions) == 121
        assert len(strata(corpus, "theme_difficulty", unit_kinds=())) == 0

    def test_theme_difficulty_strata(self, tmp_path):
        rows = counts_rows()
        rows["answers"] = [{"answer_id": f"a-{q['question_id']}", "question_id": q["question_id"],
                            "repetition_index": 0, "text": "Oui.", "retrieved_source_ids": []}
                           for q in rows["questions"]]
        corpus = load_corpus(write_corpus(tmp_path / "c", **rows))
        st = strata(corpus, "theme_difficulty", unit_kinds=("answer",))
        assert len(st) == 12
        assert {s.key: len(s) for s in st}["Finance/Inapproprie/answer"] == 15
        assert len(strata(corpus, "theme", unit_kinds=("answer",))) == 3

    def test_empty_files(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        for name in ("questions", "answers", "sentences", "annotations", "embeddings"):
            (root / f"{name}.jsonl").write_text("")
        corpus = load_corpus(root)
        assert len(corpus.questions) == 0 and corpus.annotations == ()
        assert strata(corpus) == []

    def test_example(self, example_dir):
        corpus = load_corpus(example_dir)
        assert [s.cited_source_ids for s in corpus.sentences_of("a1")] == [("5f7cce",),
                                                                           ("4ca822", "63fadb")]
        assert corpus.question_of("a1:1").theme == "RH"

    def test_accent_folding(self, tmp_path):
        rows = {"questions": [{"question_id": "q", "theme": "IT", "difficulty": "Intermédiaire",
                               "text": "?"}]}
        corpus = load_corpus(write_corpus(tmp_path / "c", **rows))
        assert corpus.questions["q"].difficulty == "Intermediaire"

    def test_unknown_fields_preserved(self, tmp_path):
        rows = {"questions": [{"question_id": "q", "theme": "IT", "difficulty": "Simple",
                               "text": "?", "author": "x"}]}
        root = write_corpus(tmp_path / "c", **rows)
        corpus = load_corpus(root)
        assert corpus.questions["q"].extra == {"author": "x"}
        out = tmp_path / "out"
        dump_corpus(corpus, out)
        assert json.loads((out / "questions.jsonl").read_text())["author"] == "x"

    def test_round_trip(self, tmp_path):
        root = write_corpus(tmp_path / "src", **synthetic_corpus_rows())
        corpus = load_corpus(root)
        dump_corpus(corpus, tmp_path / "dst")
        again = load_corpus(tmp_path / "dst")
        assert again.questions == corpus.questions
        assert again.answers == corpus.answers
        assert again.sentences == corpus.sentences
        assert again.annotations == corpus.annotations
        assert again.embeddings.keys() == corpus.embeddings.keys()

    def test_explicit_mapping(self, example_dir):
        corpus = load_corpus({"questions": example_dir / "questions.jsonl"})
        assert list(corpus.questions) == ["q1"]


def _with(rows, entity, **changes):
    rows = {k: [dict(r) for r in v] for k, v in rows.items()}
    rows[entity][0].update(changes)
    return rows


class TestErrors:
    def test_dangling_question(self, tmp_path):
        rows = _with(example_corpus_rows(), "answers", question_id="q999")
        with pytest.raises(DanglingReferenceError) as exc:
            load_corpus(write_corpus(tmp_path / "c", **rows))
        assert exc.value.ref == "q999"
        assert "answers.jsonl:1" in str(exc.value)

    def test_malformed_json(self, tmp_path):
        root = write_corpus(tmp_path / "c", **example_corpus_rows())
        with (root / "questions.jsonl").open("a") as fh:
            fh.write("{not json\n")
        with pytest.raises(MalformedLineError, match="questions.jsonl:2"):
            load_corpus(root)

    def test_duplicate_id(self, tmp_path):
        rows = example_corpus_rows()
        rows["questions"].append(dict(rows["questions"][0]))
        with pytest.raises(DuplicateIdError):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_duplicate_repetition(self, tmp_path):
        rows = example_corpus_rows()
        rows["answers"].append(dict(rows["answers"][0], answer_id="a2"))
        with pytest.raises(DuplicateIdError, match="repetition"):
            load_corpus(write_corpus(tmp_path / "c", **{k: rows[k] for k in ("questions", "answers")}))

    def test_bad_theme(self, tmp_path):
        rows = _with(example_corpus_rows(), "questions", theme="Legal")
        with pytest.raises(EnumViolationError):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_bad_source_id(self, tmp_path):
        rows = _with(example_corpus_rows(), "answers", retrieved_source_ids=["XYZ"])
        with pytest.raises(InvariantError):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_sentence_gap(self, tmp_path):
        rows = _with(example_corpus_rows(), "sentences", index=3)
        with pytest.raises(InvariantError):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_sentences_must_reproduce_answer(self, tmp_path):
        rows = _with(example_corpus_rows(), "sentences", text="Autre chose.")
        with pytest.raises(InvariantError, match="reproduce"):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    @pytest.mark.parametrize("change,err", [
        ({"metric": "veracity"}, InvariantError),
        ({"label": 2}, EnumViolationError),
        ({"label": True}, EnumViolationError),
        ({"unit_id": "nope"}, DanglingReferenceError),
        ({"annotator": "robot"}, EnumViolationError),
    ])
    def test_annotation_errors(self, tmp_path, change, err):
        rows = example_corpus_rows()
        rec = {"unit_id": "a1", "unit_kind": "answer", "metric": "relevance", "annotator": "human",
               "label": 1, "provenance": "h"}
        rows["annotations"] = [dict(rec, **change)]
        with pytest.raises(err):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_duplicate_annotation(self, tmp_path):
        rows = example_corpus_rows()
        rec = {"unit_id": "a1", "unit_kind": "answer", "metric": "relevance", "annotator": "human",
               "label": 1, "provenance": "h"}
        rows["annotations"] = [rec, dict(rec, label=0)]
        with pytest.raises(DuplicateIdError):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_embedding_dims(self, tmp_path):
        rows = example_corpus_rows()
        rows["embeddings"] = [{"unit_id": "a1", "vector": [1.0, 0.0]},
                              {"unit_id": "a1:0", "vector": [1.0]}]
        with pytest.raises(InvariantError, match="dimensions"):
            load_corpus(write_corpus(tmp_path / "c", **rows))

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "absent")


class TestFieldMap:
    def test_rename(self, tmp_path):
        root = tmp_path / "pub"
        root.mkdir()
        write_jsonl(root / "qs.jsonl", [{"id": "q1", "thème": "RH", "niveau": "Simple",
                                         "question": "?"}])
        fmap = {"files": {"questions": "qs.jsonl"},
                "fields": {"questions": {"question_id": "id", "theme": "thème",
                                         "difficulty": "niveau", "text": "question"}}}
        (tmp_path / "map.json").write_text(json.dumps(fmap))
        corpus = load_corpus(root, field_map=FieldMap.from_json(tmp_path / "map.json"))
        assert corpus.questions["q1"].theme == "RH"


def test_with_annotations_validates(example_dir):
    corpus = load_corpus(example_dir)
    rec = AnnotationRecord("a1", "answer", "relevance", "judge", 1, "mock")
    merged = corpus.with_annotations([rec])
    assert merged.labels("relevance", "judge") == {"a1": 1}
    with pytest.raises(DuplicateIdError):
        merged.with_annotations([rec])
    assert isinstance(merged, Corpus)


def test_load_annotations(tmp_path):
    path = tmp_path / "ann.jsonl"
    write_jsonl(path, [{"unit_id": "a1", "unit_kind": "answer", "metric": "relevance",
                        "annotator": "judge", "label": "1", "provenance": "m"}])
    with pytest.raises(EnumViolationError):
        load_annotations(path)
