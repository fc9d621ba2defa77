"""Rule-based answer measurements: sentences, citations, abstentions, language.

Citation markers have the form ``[^5f7cce^]``. Near misses (upper-case hex,
wrong length) are not markers.
"""

from __future__ import annotations

import csv
import io
import re
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .dataset import (DEFAULT_SOURCE_ID_PATTERN, DIFFICULTIES, THEMES, Answer, Corpus,
                      Sentence)
from .inference import MetricEstimate, wald_interval

AUTO_METRICS = ("language_correct", "effective_response", "functional_citation")

_TERMINATORS = ".!?:"
_CLOSERS = "\"»)’”"
_OPENERS = "\"«(“‘"

# Lower-cased words that end with a period without ending a sentence.
ABBREVIATIONS = frozenset({
    "m", "mm", "mme", "mmes", "mlle", "dr", "pr", "me", "mr", "mrs", "ms", "st", "ste",
    "cf", "ex", "p", "pp", "art", "al", "vol", "no", "env", "av", "apr", "inc", "ltd",
    "co", "corp", "vs", "fig", "chap", "sect", "ed", "éd", "approx", "resp", "etc.",
    "réf", "ref", "tél", "tel", "n°",
})


@dataclass(frozen=True)
class CitationMarker:
    raw: str
    source_id: str
    char_span: tuple[int, int]


@lru_cache(maxsize=8)
def _marker_re(id_pattern: str) -> re.Pattern:
    return re.compile(r"\[\^(" + id_pattern + r")\^\]")


@lru_cache(maxsize=8)
def _trailing_markers_re(id_pattern: str) -> re.Pattern:
    return re.compile(r"\s*(?:\[\^" + id_pattern + r"\^\])+[.!?]*")


def extract_citations(text: str, id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> list[CitationMarker]:
    """All citation markers in ``text``, left to right.

    Offsets in ``char_span`` index the Python string.
    """
    return [CitationMarker(m.group(0), m.group(1), m.span())
            for m in _marker_re(id_pattern).finditer(text)]


def cited_ids(text: str, id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> tuple[str, ...]:
    """Distinct cited ids in order of first appearance."""
    return tuple(dict.fromkeys(c.source_id for c in extract_citations(text, id_pattern)))


def strip_citations(text: str, id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> str:
    return _marker_re(id_pattern).sub(" ", text)


@dataclass(frozen=True)
class SplitSentence:
    text: str
    span: tuple[int, int]
    source_ids: tuple[str, ...]


def _is_abbreviation(text: str, dot: int) -> bool:
    m = re.search(r"([^\W\d_]+°?)$", text[:dot])
    if not m:
        return False
    word = m.group(1)
    if len(word) == 1 and word.isupper():
        return True  # initial, as in "A. B. Dupont"
    return word.lower() in ABBREVIATIONS


def _grammatical_spans(text: str, id_pattern: str) -> list[tuple[int, int]]:
    trailing = _trailing_markers_re(id_pattern)
    spans: list[tuple[int, int]] = []
    L = len(text)
    start = i = 0
    while i < L:
        ch = text[i]
        if ch not in _TERMINATORS:
            i += 1
            continue
        end = i + 1
        while end < L and text[end] in ".!?":
            end += 1
        m = trailing.match(text, end)
        if m and m.end() > end:
            end = m.end()
        while end < L and text[end] in _CLOSERS:
            end += 1
        boundary = end == L
        if not boundary and text[end].isspace():
            k = end
            while k < L and text[k].isspace():
                k += 1
            while k < L and text[k] in _OPENERS:
                k += 1
            boundary = k == L or text[k].isupper() or text[k].isdigit()
        if boundary and ch == "." and _is_abbreviation(text, i):
            boundary = False
        if boundary:
            if text[start:end].strip():
                spans.append((start, end))
            start = i = end
        else:
            i += 1
    if text[start:].strip():
        spans.append((start, L))
    return spans


def _trimmed(text: str, span: tuple[int, int]) -> tuple[int, int]:
    s, e = span
    while s < e and text[s].isspace():
        s += 1
    while e > s and text[e - 1].isspace():
        e -= 1
    return s, e


def split_sentences(text: str, mode: str = "cited",
                    id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> list[SplitSentence]:
    """Split an answer into sentences carrying their citation markers.

    Boundaries are a terminator among ``. ! ? :`` followed by whitespace and a
    capital letter or digit; initials and common abbreviations do not end a
    sentence. Markers right after a terminator stay with the sentence before.

    In ``"grammatical"`` mode every such sentence is returned. In ``"cited"``
    mode (the default) sentences without markers are merged into the next
    sentence that has some, so each unit carries the sources that support it;
    uncited sentences after the last citation form a final unit.
    """
    if mode not in ("cited", "grammatical"):
        raise ValueError(f"unknown split mode {mode!r}")
    spans = _grammatical_spans(text, id_pattern)
    marker = _marker_re(id_pattern)
    if mode == "cited":
        merged: list[tuple[int, int]] = []
        pending: int | None = None
        for s, e in spans:
            first = s if pending is None else pending
            if marker.search(text, s, e):
                merged.append((first, e))
                pending = None
            else:
                pending = first
        if pending is not None:
            merged.append((pending, spans[-1][1]))
        spans = merged
    out = []
    for span in spans:
        s, e = _trimmed(text, span)
        piece = text[s:e]
        out.append(SplitSentence(piece, (s, e), cited_ids(piece, id_pattern)))
    return out


def sentences_from_answer(answer: Answer, mode: str = "cited",
                          id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> list[Sentence]:
    """Sentence records for ``answer`` with ids ``<answer_id>:<index>``."""
    return [
        Sentence(sentence_id=f"{answer.answer_id}:{i}", answer_id=answer.answer_id, index=i,
                 text=s.text, cited_source_ids=s.source_ids)
        for i, s in enumerate(split_sentences(answer.text, mode, id_pattern))
    ]


_FR_WORDS = frozenset("""
le la les l un une des du de d et est sont pour dans par sur avec ce cette ces qui que qu
il elle ils elles nous vous je j leur leurs au aux ne n pas plus se s sa son ses été être
ont avait fait mais ou où donc aussi comme entre sans sous très peut afin également dont
lors ainsi notamment c y en
""".split())

_EN_WORDS = frozenset("""
the of and to is are for with this that these those which who it its they them their we
you he she his her be been being was were has have had not but from by at than also can
will would should could into about such there here what when where while use uses used
""".split())


def detect_language(text: str, margin: float = 0.25,
                    id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> str:
    """Return ``"fr"``, ``"en"`` or ``"other"`` from function-word frequencies.

    The winning language needs ``(1 + margin)`` times the other one's hits;
    otherwise, or when neither list matches, the answer is ``"other"``.
    """
    tokens = re.findall(r"[^\W\d_]+", strip_citations(text, id_pattern).lower())
    fr = sum(t in _FR_WORDS for t in tokens)
    en = sum(t in _EN_WORDS for t in tokens)
    if fr == en:
        return "other"
    if fr > en * (1.0 + margin):
        return "fr"
    if en > fr * (1.0 + margin):
        return "en"
    return "other"


LanguageDetector = Callable[[str], str]


def answer_language(answer: Answer, detector: LanguageDetector = detect_language) -> str:
    """Language of ``answer``; its precomputed ``language`` field wins."""
    if answer.language is not None:
        return answer.language
    return detector(answer.text)


def _normalize(text: str) -> str:
    return " ".join(text.replace("’", "'").lower().split())


def load_abstention_phrases(path: str | Path | None = None) -> tuple[str, ...]:
    if path is None:
        raw = resources.files("ragppi").joinpath("data/abstentions.txt").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    phrases = []
    for line in raw.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            phrases.append(_normalize(line))
    return tuple(phrases)


def is_abstention(text: str, phrases: Sequence[str] | None = None) -> bool:
    phrases = load_abstention_phrases() if phrases is None else phrases
    norm = _normalize(text)
    return any(_normalize(p) in norm for p in phrases)


def is_effective_response(answer: Answer | str, phrases: Sequence[str] | None = None,
                          id_pattern: str = DEFAULT_SOURCE_ID_PATTERN) -> int:
    """1 when the answer cites at least one source and is not a manifest abstention."""
    text = answer if isinstance(answer, str) else answer.text
    if not extract_citations(text, id_pattern):
        return 0
    return 0 if is_abstention(text, phrases) else 1


def functional_citation_label(sentence: Sentence, answer: Answer) -> int | None:
    """1 when every id cited by the sentence was retrieved; None if it cites nothing."""
    if not sentence.cited_source_ids:
        return None
    return int(set(sentence.cited_source_ids) <= set(answer.retrieved_source_ids))


@dataclass(frozen=True)
class AutoMetricReport:
    theme: str
    difficulty: str | None
    metric: str
    numerator: int
    denominator: int
    estimate: MetricEstimate

    @property
    def stratum(self) -> str:
        return self.theme if self.difficulty is None else f"{self.theme}/{self.difficulty}"

    @property
    def rate(self) -> float:
        return self.numerator / self.denominator

    @property
    def ci(self) -> tuple[float, float]:
        return self.estimate.ci

    def to_dict(self) -> dict:
        lo, hi = self.estimate.clipped_ci()
        return {
            "stratum": self.stratum, "theme": self.theme, "difficulty": self.difficulty,
            "metric": self.metric, "numerator": self.numerator,
            "denominator": self.denominator, "rate": self.rate,
            "ci_low": self.ci[0], "ci_high": self.ci[1],
            "ci_low_clipped": lo, "ci_high_clipped": hi,
            "half_width": self.estimate.half_width,
        }


def auto_rates(corpus: Corpus, alpha: float = 0.05, level: str = "theme_difficulty",
               detector: LanguageDetector = detect_language,
               phrases: Sequence[str] | None = None,
               id_pattern: str = DEFAULT_SOURCE_ID_PATTERN,
               answer_filter: Callable[[Answer], bool] | None = None) -> list[AutoMetricReport]:
    """Automatic rates per stratum with Wald intervals, sorted by stratum then metric."""
    phrases = load_abstention_phrases() if phrases is None else phrases
    counts: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])

    def key(question, metric):
        return (question.theme, question.difficulty if level == "theme_difficulty" else None, metric)

    for a in corpus.answers.values():
        if answer_filter is not None and not answer_filter(a):
            continue
        q = corpus.questions[a.question_id]
        for metric, value in (("language_correct", int(answer_language(a, detector) == "fr")),
                              ("effective_response", is_effective_response(a, phrases, id_pattern))):
            c = counts[key(q, metric)]
            c[0] += value
            c[1] += 1
        for s in corpus.sentences_of(a.answer_id):
            label = functional_citation_label(s, a)
            if label is None:
                continue
            c = counts[key(q, "functional_citation")]
            c[0] += label
            c[1] += 1

    def order(k):
        theme, diff, metric = k
        return (THEMES.index(theme), -1 if diff is None else DIFFICULTIES.index(diff),
                AUTO_METRICS.index(metric))

    return [
        AutoMetricReport(k[0], k[1], k[2], num, den, wald_interval(num, den, alpha))
        for k in sorted(counts, key=order)
        for num, den in [counts[k]]
        if den > 0
    ]


def reports_to_csv(reports: Iterable[AutoMetricReport]) -> str:
    cols = ["stratum", "theme", "difficulty", "metric", "numerator", "denominator", "rate",
            "ci_low", "ci_high", "ci_low_clipped", "ci_high_clipped", "half_width"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in reports:
        d = r.to_dict()
        d["difficulty"] = d["difficulty"] or ""
        w.writerow(d)
    return buf.getvalue()
