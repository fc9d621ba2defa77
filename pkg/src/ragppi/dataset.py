"""Corpus data model and JSONL ingestion.

A corpus lives in one directory with one JSONL file per entity::

    questions.jsonl  answers.jsonl  sentences.jsonl
    annotations.jsonl  embeddings.jsonl  sources.jsonl

Missing files are treated as empty. Every record is validated and cross
referenced at load time, so a :class:`Corpus` never exists in a violated
state. Unknown JSON fields are kept in ``extra`` and written back unchanged.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

THEMES = ("Finance", "RH", "IT")
DIFFICULTIES = ("Simple", "Intermediaire", "Difficile", "Inapproprie")
UNIT_KINDS = ("answer", "sentence")
METRICS = ("relevance", "veracity")
ANNOTATORS = ("human", "judge")
LANGUAGES = ("fr", "en", "other")

METRIC_UNIT_KIND = {"relevance": "answer", "veracity": "sentence"}

DEFAULT_SOURCE_ID_PATTERN = r"[0-9a-f]{6}"

FILE_NAMES = {
    "questions": "questions.jsonl",
    "answers": "answers.jsonl",
    "sentences": "sentences.jsonl",
    "annotations": "annotations.jsonl",
    "embeddings": "embeddings.jsonl",
    "sources": "sources.jsonl",
}


class CorpusError(ValueError):
    """Base class for ingestion errors; ``location`` is ``file:line`` when known."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class MalformedLineError(CorpusError):
    pass


class DanglingReferenceError(CorpusError):
    def __init__(self, message: str, ref: str, location: str | None = None):
        self.ref = ref
        super().__init__(message, location)


class DuplicateIdError(CorpusError):
    pass


class EnumViolationError(CorpusError):
    pass


class InvariantError(CorpusError):
    pass


class MissingEmbeddingError(CorpusError):
    def __init__(self, unit_ids: Iterable[str]):
        self.unit_ids = sorted(unit_ids)
        shown = ", ".join(self.unit_ids[:20])
        more = f" (+{len(self.unit_ids) - 20} more)" if len(self.unit_ids) > 20 else ""
        super().__init__(f"missing embeddings for {len(self.unit_ids)} units: {shown}{more}")


def _fold(s: str) -> str:
    return "".join(c for c in unicodedata.normalize("NFKD", s) if not unicodedata.combining(c))


def _enum(value: Any, allowed: tuple[str, ...], name: str, loc: str) -> str:
    if isinstance(value, str):
        if value in allowed:
            return value
        # accept accented spellings such as "Intermédiaire"
        folded = _fold(value)
        if folded in allowed:
            return folded
    raise EnumViolationError(f"{name} must be one of {list(allowed)}, got {value!r}", loc)


def _str(rec: Mapping, key: str, loc: str, *, non_empty: bool = False) -> str:
    if key not in rec:
        raise MalformedLineError(f"missing field {key!r}", loc)
    v = rec[key]
    if not isinstance(v, str):
        raise MalformedLineError(f"field {key!r} must be a string", loc)
    if non_empty and not v.strip():
        raise InvariantError(f"field {key!r} must be non-empty", loc)
    return v


def _int(rec: Mapping, key: str, loc: str) -> int:
    v = rec.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise MalformedLineError(f"field {key!r} must be an integer", loc)
    return v


def _ids(rec: Mapping, key: str, loc: str, pattern: re.Pattern) -> tuple[str, ...]:
    v = rec.get(key, [])
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise MalformedLineError(f"field {key!r} must be a list of strings", loc)
    for x in v:
        if not pattern.fullmatch(x):
            raise InvariantError(f"source id {x!r} does not match {pattern.pattern!r}", loc)
    if len(set(v)) != len(v):
        raise InvariantError(f"field {key!r} has repeated ids", loc)
    return tuple(v)


def _extra(rec: Mapping, known: Iterable[str]) -> dict:
    known = set(known)
    return {k: v for k, v in rec.items() if k not in known}


@dataclass(frozen=True)
class Question:
    question_id: str
    theme: str
    difficulty: str
    text: str
    extra: dict = field(default_factory=dict, compare=False)

    FIELDS = ("question_id", "theme", "difficulty", "text")

    def to_dict(self) -> dict:
        return {"question_id": self.question_id, "theme": self.theme,
                "difficulty": self.difficulty, "text": self.text, **self.extra}


@dataclass(frozen=True)
class Answer:
    answer_id: str
    question_id: str
    repetition_index: int
    text: str
    retrieved_source_ids: tuple[str, ...]
    language: str | None = None
    extra: dict = field(default_factory=dict, compare=False)

    FIELDS = ("answer_id", "question_id", "repetition_index", "text",
              "retrieved_source_ids", "language")

    def to_dict(self) -> dict:
        d = {"answer_id": self.answer_id, "question_id": self.question_id,
             "repetition_index": self.repetition_index, "text": self.text,
             "retrieved_source_ids": list(self.retrieved_source_ids)}
        if self.language is not None:
            d["language"] = self.language
        d.update(self.extra)
        return d


@dataclass(frozen=True)
class Sentence:
    sentence_id: str
    answer_id: str
    index: int
    text: str
    cited_source_ids: tuple[str, ...]
    extra: dict = field(default_factory=dict, compare=False)

    FIELDS = ("sentence_id", "answer_id", "index", "text", "cited_source_ids")

    def to_dict(self) -> dict:
        return {"sentence_id": self.sentence_id, "answer_id": self.answer_id,
                "index": self.index, "text": self.text,
                "cited_source_ids": list(self.cited_source_ids), **self.extra}


@dataclass(frozen=True)
class AnnotationRecord:
    unit_id: str
    unit_kind: str
    metric: str
    annotator: str
    label: int
    provenance: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    FIELDS = ("unit_id", "unit_kind", "metric", "annotator", "label", "provenance")

    def to_dict(self) -> dict:
        return {"unit_id": self.unit_id, "unit_kind": self.unit_kind, "metric": self.metric,
                "annotator": self.annotator, "label": self.label,
                "provenance": self.provenance, **self.extra}


@dataclass(frozen=True)
class EmbeddingRecord:
    unit_id: str
    vector: tuple[float, ...]
    extra: dict = field(default_factory=dict, compare=False)

    FIELDS = ("unit_id", "vector")

    def to_dict(self) -> dict:
        return {"unit_id": self.unit_id, "vector": list(self.vector), **self.extra}


@dataclass(frozen=True)
class Source:
    """Retrieved passage; needed only to render veracity prompts."""

    source_id: str
    text: str
    extra: dict = field(default_factory=dict, compare=False)

    FIELDS = ("source_id", "text")

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "text": self.text, **self.extra}


@dataclass(frozen=True)
class Stratum:
    theme: str
    difficulty: str | None
    unit_kind: str
    unit_ids: tuple[str, ...]

    @property
    def key(self) -> str:
        parts = [self.theme] if self.difficulty is None else [self.theme, self.difficulty]
        return "/".join(parts + [self.unit_kind])

    def __len__(self) -> int:
        return len(self.unit_ids)


class Corpus:
    """Immutable, cross-validated collection of corpus entities."""

    def __init__(self, questions=(), answers=(), sentences=(), annotations=(),
                 embeddings=(), sources=()):
        self.questions: dict[str, Question] = {q.question_id: q for q in questions}
        self.answers: dict[str, Answer] = {a.answer_id: a for a in answers}
        self.sentences: dict[str, Sentence] = {s.sentence_id: s for s in sentences}
        self.annotations: tuple[AnnotationRecord, ...] = tuple(annotations)
        self.embeddings: dict[str, EmbeddingRecord] = {e.unit_id: e for e in embeddings}
        self.sources: dict[str, Source] = {s.source_id: s for s in sources}
        by_answer: dict[str, list[Sentence]] = defaultdict(list)
        for s in self.sentences.values():
            by_answer[s.answer_id].append(s)
        self._sentences_by_answer = {k: tuple(sorted(v, key=lambda s: s.index)) for k, v in by_answer.items()}

    def __repr__(self) -> str:
        return (f"Corpus({len(self.questions)} questions, {len(self.answers)} answers, "
                f"{len(self.sentences)} sentences, {len(self.annotations)} annotations)")

    def sentences_of(self, answer_id: str) -> tuple[Sentence, ...]:
        return self._sentences_by_answer.get(answer_id, ())

    def question_of(self, unit_id: str) -> Question:
        if unit_id in self.sentences:
            unit_id = self.sentences[unit_id].answer_id
        return self.questions[self.answers[unit_id].question_id]

    def answer_of(self, unit_id: str) -> Answer:
        if unit_id in self.sentences:
            return self.answers[self.sentences[unit_id].answer_id]
        return self.answers[unit_id]

    def units(self, unit_kind: str) -> list[str]:
        return list(self.answers) if unit_kind == "answer" else list(self.sentences)

    def labels(self, metric: str, annotator: str) -> dict[str, int]:
        return {r.unit_id: r.label for r in self.annotations
                if r.metric == metric and r.annotator == annotator}

    def table(self) -> dict[tuple[str, str], int]:
        """Question counts per (theme, difficulty)."""
        return dict(Counter((q.theme, q.difficulty) for q in self.questions.values()))

    def with_annotations(self, records: Iterable[AnnotationRecord]) -> "Corpus":
        """New corpus with ``records`` appended, validated like loaded ones."""
        merged = list(self.annotations) + list(records)
        _check_annotations(merged, self)
        return Corpus(self.questions.values(), self.answers.values(), self.sentences.values(),
                      merged, self.embeddings.values(), self.sources.values())


def strata(corpus: Corpus, level: str = "theme_difficulty",
           unit_kinds: Iterable[str] = UNIT_KINDS) -> list[Stratum]:
    """Partition the corpus units by theme (and difficulty) and unit kind.

    Empty strata are omitted; strata come back sorted by theme, difficulty
    and kind in enum order, units in corpus order.
    """
    if level not in ("theme", "theme_difficulty"):
        raise ValueError(f"unknown strata level {level!r}")
    groups: dict[tuple, list[str]] = defaultdict(list)
    for kind in unit_kinds:
        for uid in corpus.units(kind):
            q = corpus.question_of(uid)
            diff = q.difficulty if level == "theme_difficulty" else None
            groups[(q.theme, diff, kind)].append(uid)

    def order(key):
        theme, diff, kind = key
        return (THEMES.index(theme), -1 if diff is None else DIFFICULTIES.index(diff),
                UNIT_KINDS.index(kind))

    return [Stratum(k[0], k[1], k[2], tuple(groups[k])) for k in sorted(groups, key=order)]


@dataclass
class FieldMap:
    """Renames fields of externally published files into the canonical schema.

    ``fields`` maps entity name to ``{canonical_name: file_name}``;
    ``files`` maps entity name to a file name inside the corpus directory.
    """

    fields: dict[str, dict[str, str]] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path: str | Path) -> "FieldMap":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(fields=data.get("fields", {}), files=data.get("files", {}))

    def apply(self, entity: str, rec: dict) -> dict:
        mapping = self.fields.get(entity)
        if not mapping:
            return rec
        inverse = {src: dst for dst, src in mapping.items()}
        return {inverse.get(k, k): v for k, v in rec.items()}


def _read_jsonl(path: Path) -> Iterator[tuple[str, dict]]:
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            loc = f"{path}:{lineno}"
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(f"invalid JSON ({exc.msg})", loc) from None
            if not isinstance(rec, dict):
                raise MalformedLineError("each line must hold a JSON object", loc)
            yield loc, rec


def _parse_question(rec, loc, _pat):
    return Question(
        question_id=_str(rec, "question_id", loc, non_empty=True),
        theme=_enum(rec.get("theme"), THEMES, "theme", loc),
        difficulty=_enum(rec.get("difficulty"), DIFFICULTIES, "difficulty", loc),
        text=_str(rec, "text", loc, non_empty=True),
        extra=_extra(rec, Question.FIELDS),
    )


def _parse_answer(rec, loc, pat):
    lang = rec.get("language")
    return Answer(
        answer_id=_str(rec, "answer_id", loc, non_empty=True),
        question_id=_str(rec, "question_id", loc),
        repetition_index=_int(rec, "repetition_index", loc),
        text=_str(rec, "text", loc),
        retrieved_source_ids=_ids(rec, "retrieved_source_ids", loc, pat),
        language=None if lang is None else _enum(lang, LANGUAGES, "language", loc),
        extra=_extra(rec, Answer.FIELDS),
    )


def _parse_sentence(rec, loc, pat):
    return Sentence(
        sentence_id=_str(rec, "sentence_id", loc, non_empty=True),
        answer_id=_str(rec, "answer_id", loc),
        index=_int(rec, "index", loc),
        text=_str(rec, "text", loc),
        cited_source_ids=_ids(rec, "cited_source_ids", loc, pat),
        extra=_extra(rec, Sentence.FIELDS),
    )


def _parse_annotation(rec, loc, _pat):
    label = rec.get("label")
    if label not in (0, 1) or isinstance(label, bool) or not isinstance(label, int):
        raise EnumViolationError(f"label must be 0 or 1, got {label!r}", loc)
    prov = rec.get("provenance", "")
    if not isinstance(prov, str):
        raise MalformedLineError("field 'provenance' must be a string", loc)
    return AnnotationRecord(
        unit_id=_str(rec, "unit_id", loc),
        unit_kind=_enum(rec.get("unit_kind"), UNIT_KINDS, "unit_kind", loc),
        metric=_enum(rec.get("metric"), METRICS, "metric", loc),
        annotator=_enum(rec.get("annotator"), ANNOTATORS, "annotator", loc),
        label=label,
        provenance=prov,
        extra=_extra(rec, AnnotationRecord.FIELDS),
    )


def _parse_embedding(rec, loc, _pat):
    vec = rec.get("vector")
    if not isinstance(vec, list) or not vec:
        raise MalformedLineError("field 'vector' must be a non-empty list", loc)
    out = []
    for x in vec:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise InvariantError("embedding values must be finite numbers", loc)
        out.append(float(x))
    return EmbeddingRecord(unit_id=_str(rec, "unit_id", loc), vector=tuple(out),
                           extra=_extra(rec, EmbeddingRecord.FIELDS))


def _parse_source(rec, loc, pat):
    sid = _str(rec, "source_id", loc)
    if not pat.fullmatch(sid):
        raise InvariantError(f"source id {sid!r} does not match {pat.pattern!r}", loc)
    return Source(source_id=sid, text=_str(rec, "text", loc), extra=_extra(rec, Source.FIELDS))


_PARSERS = {
    "questions": (_parse_question, "question_id"),
    "answers": (_parse_answer, "answer_id"),
    "sentences": (_parse_sentence, "sentence_id"),
    "annotations": (_parse_annotation, None),
    "embeddings": (_parse_embedding, "unit_id"),
    "sources": (_parse_source, "source_id"),
}


def _squash(text: str) -> str:
    return "".join(text.split())


def _check_annotations(records, corpus: Corpus, locs=None) -> None:
    seen: dict[tuple, str] = {}
    for i, r in enumerate(records):
        loc = locs[i] if locs else None
        if r.metric == "relevance" and r.unit_kind != "answer":
            raise InvariantError("relevance labels apply to answers only", loc)
        if r.metric == "veracity" and r.unit_kind != "sentence":
            raise InvariantError("veracity labels apply to sentences only", loc)
        pool = corpus.answers if r.unit_kind == "answer" else corpus.sentences
        if r.unit_id not in pool:
            raise DanglingReferenceError(f"annotation references unknown {r.unit_kind} {r.unit_id!r}",
                                         r.unit_id, loc)
        key = (r.unit_id, r.metric, r.annotator)
        if key in seen:
            raise DuplicateIdError(
                f"second {r.annotator} {r.metric} label for {r.unit_id!r} (first at {seen[key]})", loc)
        seen[key] = loc or "?"


def load_corpus(path: str | Path | Mapping[str, str | Path], *,
                source_id_pattern: str = DEFAULT_SOURCE_ID_PATTERN,
                field_map: FieldMap | None = None) -> Corpus:
    """Load and cross-validate a corpus.

    ``path`` is either a directory holding the standard file names or a
    mapping from entity name (``"questions"``, ``"answers"``...) to file path.
    """
    pattern = re.compile(source_id_pattern)
    field_map = field_map or FieldMap()
    if isinstance(path, Mapping):
        unknown = set(path) - set(FILE_NAMES)
        if unknown:
            raise ValueError(f"unknown corpus entities: {sorted(unknown)}")
        files = {k: Path(v) for k, v in path.items()}
    else:
        root = Path(path)
        if not root.is_dir():
            raise FileNotFoundError(f"corpus directory not found: {root}")
        files = {k: root / field_map.files.get(k, name) for k, name in FILE_NAMES.items()}
        files = {k: p for k, p in files.items() if p.exists()}

    parsed: dict[str, list] = {k: [] for k in FILE_NAMES}
    locs: dict[str, list[str]] = {k: [] for k in FILE_NAMES}
    for entity, fpath in files.items():
        if not fpath.exists():
            raise FileNotFoundError(f"{entity} file not found: {fpath}")
        parse, key = _PARSERS[entity]
        seen: dict[str, str] = {}
        for loc, rec in _read_jsonl(fpath):
            obj = parse(field_map.apply(entity, rec), loc, pattern)
            if key is not None:
                ident = getattr(obj, key)
                if ident in seen:
                    raise DuplicateIdError(f"duplicate {key} {ident!r} (first at {seen[ident]})", loc)
                seen[ident] = loc
            parsed[entity].append(obj)
            locs[entity].append(loc)

    corpus = Corpus(**parsed)
    _cross_validate(corpus, locs)
    return corpus


def _cross_validate(corpus: Corpus, locs: dict[str, list[str]]) -> None:
    loc_of = {a.answer_id: l for a, l in zip(corpus.answers.values(), locs["answers"])}
    reps: dict[tuple[str, int], str] = {}
    for a in corpus.answers.values():
        loc = loc_of[a.answer_id]
        if a.question_id not in corpus.questions:
            raise DanglingReferenceError(f"answer references unknown question {a.question_id!r}",
                                         a.question_id, loc)
        if a.repetition_index < 0:
            raise InvariantError("repetition_index must be >= 0", loc)
        k = (a.question_id, a.repetition_index)
        if k in reps:
            raise DuplicateIdError(
                f"repetition {a.repetition_index} of question {a.question_id!r} appears twice "
                f"(first at {reps[k]})", loc)
        reps[k] = loc

    sloc = {s.sentence_id: l for s, l in zip(corpus.sentences.values(), locs["sentences"])}
    for s in corpus.sentences.values():
        if s.answer_id not in corpus.answers:
            raise DanglingReferenceError(f"sentence references unknown answer {s.answer_id!r}",
                                         s.answer_id, sloc[s.sentence_id])
    for answer_id in {s.answer_id for s in corpus.sentences.values()}:
        sents = corpus.sentences_of(answer_id)
        indices = [s.index for s in sents]
        if indices != list(range(len(sents))):
            raise InvariantError(
                f"sentence indices of answer {answer_id!r} must be 0..{len(sents) - 1}, got {indices}",
                sloc[sents[0].sentence_id])
        joined = _squash("".join(s.text for s in sents))
        if joined != _squash(corpus.answers[answer_id].text):
            raise InvariantError(f"sentences of answer {answer_id!r} do not reproduce its text",
                                 sloc[sents[0].sentence_id])

    _check_annotations(corpus.annotations, corpus, locs["annotations"])

    dims = set()
    eloc = dict(zip(corpus.embeddings, locs["embeddings"]))
    for uid, e in corpus.embeddings.items():
        if uid not in corpus.answers and uid not in corpus.sentences:
            raise DanglingReferenceError(f"embedding references unknown unit {uid!r}", uid, eloc[uid])
        dims.add(len(e.vector))
        if len(dims) > 1:
            raise InvariantError(f"embedding dimensions differ: {sorted(dims)}", eloc[uid])


def load_annotations(path: str | Path, field_map: FieldMap | None = None) -> list[AnnotationRecord]:
    """Parse a standalone annotations file; cross-checks happen in :meth:`Corpus.with_annotations`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotations file not found: {path}")
    field_map = field_map or FieldMap()
    return [_parse_annotation(field_map.apply("annotations", rec), loc, None)
            for loc, rec in _read_jsonl(path)]


def write_jsonl(path: str | Path, records: Iterable[Any]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            d = r.to_dict() if hasattr(r, "to_dict") else r
            fh.write(json.dumps(d, ensure_ascii=False) + "\n")


def dump_corpus(corpus: Corpus, directory: str | Path) -> None:
    """Write ``corpus`` back to the standard file layout."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_jsonl(root / FILE_NAMES["questions"], corpus.questions.values())
    write_jsonl(root / FILE_NAMES["answers"], corpus.answers.values())
    write_jsonl(root / FILE_NAMES["sentences"], corpus.sentences.values())
    write_jsonl(root / FILE_NAMES["annotations"], corpus.annotations)
    write_jsonl(root / FILE_NAMES["embeddings"], corpus.embeddings.values())
    write_jsonl(root / FILE_NAMES["sources"], corpus.sources.values())
