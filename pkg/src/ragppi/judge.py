"""LLM-judge annotation: prompt rendering, strict verdict parsing, corpus runs.

Backends take a :class:`ChatRequest` and return a :class:`ChatResponse`.
:class:`HttpChatBackend` speaks the chat-completions JSON wire format;
:class:`MockBackend` is deterministic and offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

from .dataset import METRIC_UNIT_KIND, Answer, AnnotationRecord, Corpus, Sentence

logger = logging.getLogger(__name__)


class RenderError(ValueError):
    pass


class MissingSourceError(RenderError):
    pass


class VerdictError(ValueError):
    """Base class for rejected judge responses; the unit is retried."""


class InvalidJSONError(VerdictError):
    pass


class MissingVerdictsError(VerdictError):
    pass


class VerdictShapeError(VerdictError):
    pass


class VerdictCountError(VerdictError):
    pass


class LabelDomainError(VerdictError):
    pass


class TransientBackendError(RuntimeError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class PermanentBackendError(RuntimeError):
    pass


# --------------------------------------------------------------------------- prompts


@dataclass(frozen=True)
class PromptTemplate:
    metric: str
    text: str
    examples: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, metric: str, template_path: str | Path | None = None,
             examples_path: str | Path | None = None) -> "PromptTemplate":
        """Load the shipped template for ``metric``, or user-supplied files."""
        if metric not in METRIC_UNIT_KIND:
            raise ValueError(f"unknown metric {metric!r}")
        pkg = resources.files("ragppi").joinpath("prompts")
        text = (Path(template_path).read_text(encoding="utf-8") if template_path
                else pkg.joinpath(f"{metric}.txt").read_text(encoding="utf-8"))
        raw = (Path(examples_path).read_text(encoding="utf-8") if examples_path
               else pkg.joinpath("examples.json").read_text(encoding="utf-8"))
        examples = json.loads(raw).get(metric, {})
        return cls(metric=metric, text=text, examples=examples)

    @property
    def placeholders(self) -> set[str]:
        names = set()
        for m in string.Template.pattern.finditer(self.text):
            name = m.group("named") or m.group("braced")
            if name:
                names.add(name)
        return names

    def render(self, **values: str) -> str:
        merged = {**self.examples, **values}
        missing = self.placeholders - set(merged)
        if missing:
            raise RenderError(f"unfilled placeholders: {sorted(missing)}")
        try:
            return string.Template(self.text).substitute(merged)
        except (KeyError, ValueError) as exc:
            raise RenderError(f"cannot render {self.metric} template: {exc}") from None

    @property
    def sha256(self) -> str:
        blob = json.dumps({"text": self.text, "examples": dict(self.examples)},
                          sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def format_sources(source_ids: Sequence[str], texts: Mapping[str, str]) -> str:
    missing = [s for s in source_ids if s not in texts]
    if missing:
        raise MissingSourceError(f"no text for cited sources {missing}")
    if not source_ids:
        raise MissingSourceError("no cited sources: veracity cannot be judged")
    return "\n\n".join(f"[{sid}] {texts[sid]}" for sid in source_ids)


def render_veracity(template: PromptTemplate, sentences: Sequence[str], paragraph: str,
                    source_ids: Sequence[str], source_texts: Mapping[str, str]) -> str:
    if template.metric != "veracity":
        raise RenderError("veracity prompt requires the veracity template")
    phrases = sentences[0] if len(sentences) == 1 else "\n".join(
        f"{i}. {s}" for i, s in enumerate(sentences, 1))
    return template.render(sources=format_sources(source_ids, source_texts),
                           paragraphe=paragraph, phrases=phrases)


def render_relevance(template: PromptTemplate, question: str, answer: str) -> str:
    if template.metric != "relevance":
        raise RenderError("relevance prompt requires the relevance template")
    return template.render(question=question, reponse=answer)


def render_prompt(template: PromptTemplate, units: Sequence[Sentence] | Answer,
                  corpus: Corpus) -> str:
    """Prompt for one answer (relevance) or sentences of one answer (veracity)."""
    if isinstance(units, Answer):
        if template.metric != "relevance":
            raise RenderError("answers are judged for relevance only")
        return render_relevance(template, corpus.questions[units.question_id].text, units.text)
    sentences = list(units)
    if not sentences or not all(isinstance(s, Sentence) for s in sentences):
        raise RenderError("veracity prompts take one or more sentences")
    if len({s.answer_id for s in sentences}) != 1:
        raise RenderError("sentences of one veracity prompt must share their answer")
    answer = corpus.answers[sentences[0].answer_id]
    ids = list(dict.fromkeys(i for s in sentences for i in s.cited_source_ids))
    texts = {sid: src.text for sid, src in corpus.sources.items()}
    return render_veracity(template, [s.text for s in sentences], answer.text, ids, texts)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- verdicts


@dataclass(frozen=True)
class JudgeVerdict:
    unit_id: str
    label: int
    raw_response: str
    model_id: str = ""
    temperature: float = 0.0


_FENCE = re.compile(r"^\s*```(?:json|JSON)?\s*\n?(.*?)\n?\s*```\s*$", re.DOTALL)


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        raise InvalidJSONError(f"duplicate keys in object: {keys}")
    return dict(pairs)


def _reject_constant(name):
    raise InvalidJSONError(f"non-standard JSON constant {name}")


def _label(value) -> int:
    if isinstance(value, bool):
        raise LabelDomainError(f"label must be 0 or 1, got {value!r}")
    if isinstance(value, int) and value in (0, 1):
        return value
    if isinstance(value, str) and value in ("0", "1"):
        return int(value)
    raise LabelDomainError(f"label must be 0 or 1, got {value!r}")


def parse_verdicts(raw_response: str, expected_unit_ids: Sequence[str], *, lenient: bool = False,
                   model_id: str = "", temperature: float = 0.0) -> list[JudgeVerdict]:
    """Parse a ``{"verdicts": [{"label": ...}, ...]}`` response.

    Exactly one verdict per expected unit, in order. Items may carry an
    ``"id"`` key, which must then match the expected unit id. With
    ``lenient=True`` a single surrounding markdown code fence is stripped.
    """
    text = raw_response
    if lenient:
        m = _FENCE.match(text)
        if m:
            text = m.group(1)
    try:
        obj = json.loads(text, object_pairs_hook=_no_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise InvalidJSONError(f"response is not strict JSON: {exc.msg} at char {exc.pos}") from None
    if json.loads(json.dumps(obj)) != obj:
        raise InvalidJSONError("response does not survive a JSON round trip")
    if not isinstance(obj, dict) or "verdicts" not in obj:
        raise MissingVerdictsError("top-level object with a 'verdicts' key expected")
    items = obj["verdicts"]
    if not isinstance(items, list):
        raise VerdictShapeError("'verdicts' must be a list")
    if len(items) != len(expected_unit_ids):
        raise VerdictCountError(f"expected {len(expected_unit_ids)} verdicts, got {len(items)}")
    out = []
    for uid, item in zip(expected_unit_ids, items):
        if not isinstance(item, dict):
            raise VerdictShapeError("each verdict must be a JSON object")
        if "label" not in item:
            raise VerdictShapeError("verdict without 'label'")
        if "id" in item and str(item["id"]) != uid:
            raise VerdictShapeError(f"verdict id {item['id']!r} does not match unit {uid!r}")
        out.append(JudgeVerdict(uid, _label(item["label"]), raw_response, model_id, temperature))
    return out


# --------------------------------------------------------------------------- backends


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    model: str
    temperature: float = 0.0
    unit_ids: tuple[str, ...] = ()

    def payload(self) -> dict:
        return {"model": self.model, "temperature": self.temperature,
                "messages": [{"role": "user", "content": self.prompt}]}


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class MockBackend:
    """Offline backend answering with valid verdicts.

    ``label`` is a constant or a callable of the unit id. ``fail_first``
    makes the first attempts of every request fail; ``failure_rate`` fails
    attempts pseudo-randomly but reproducibly, keyed on the request units
    and attempt number, independent of thread scheduling.
    """

    def __init__(self, label: int | Callable[[str], int] = 1, *, failure_rate: float = 0.0,
                 fail_first: int = 0, seed: int = 0, response: Callable[[ChatRequest], str] | None = None):
        self.label = label
        self.failure_rate = failure_rate
        self.fail_first = fail_first
        self.seed = seed
        self.response = response
        self._attempts: dict[tuple[str, ...], int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    def _draw(self, key: tuple[str, ...], attempt: int) -> float:
        h = hashlib.sha256(f"{self.seed}|{'|'.join(key)}|{attempt}".encode()).digest()
        return int.from_bytes(h[:8], "big") / 2**64

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.unit_ids
        with self._lock:
            self.calls += 1
            attempt = self._attempts.get(key, 0) + 1
            self._attempts[key] = attempt
        if attempt <= self.fail_first or self._draw(key, attempt) < self.failure_rate:
            raise TransientBackendError(f"injected failure on attempt {attempt}")
        if self.response is not None:
            text = self.response(request)
        else:
            labels = [self.label(u) if callable(self.label) else self.label for u in key]
            text = json.dumps({"verdicts": [{"label": int(v)} for v in labels]})
        return ChatResponse(text, prompt_tokens=len(request.prompt.split()),
                            completion_tokens=len(text.split()))


class HttpChatBackend:
    """Chat-completions endpoint over HTTPS with bearer-token auth."""

    def __init__(self, url: str, api_key: str | None = None, *, timeout: float = 120.0,
                 client: httpx.Client | None = None):
        self.url = url
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=timeout)

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            r = self.client.post(self.url, json=request.payload(), headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if r.status_code == 429 or r.status_code >= 500:
            retry_after = r.headers.get("retry-after")
            try:
                delay = float(retry_after) if retry_after is not None else None
            except ValueError:
                delay = None
            raise TransientBackendError(f"HTTP {r.status_code}", retry_after=delay)
        if r.status_code >= 400:
            raise PermanentBackendError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            data = r.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransientBackendError(f"unexpected response body: {exc}") from exc
        usage = data.get("usage") or {}
        return ChatResponse(text, usage.get("prompt_tokens"), usage.get("completion_tokens"))


# --------------------------------------------------------------------------- runs


@dataclass
class JudgeConfig:
    model: str = "mock"
    temperature: float = 0.0
    batch_size: int = 1
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_max: float = 60.0
    concurrency: int = 4
    lenient: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_attempts < 1 or self.concurrency < 1:
            raise ValueError("batch_size, max_attempts and concurrency must be >= 1")

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1))


@dataclass
class JudgeRun:
    metric: str
    records: list[AnnotationRecord]
    failures: list[dict]
    manifest: list[dict]
    header: dict

    def manifest_jsonl(self) -> str:
        lines = [json.dumps({"type": "run", **self.header}, ensure_ascii=False, sort_keys=True)]
        lines += [json.dumps({"type": "unit", **e}, ensure_ascii=False, sort_keys=True)
                  for e in self.manifest]
        return "\n".join(lines) + "\n"


def _batches(corpus: Corpus, metric: str, unit_ids: Sequence[str], size: int) -> list[tuple[str, ...]]:
    if metric == "relevance":
        return [(u,) for u in unit_ids]
    by_answer: dict[str, list[str]] = {}
    for u in unit_ids:
        by_answer.setdefault(corpus.sentences[u].answer_id, []).append(u)
    out = []
    for ids in by_answer.values():
        out += [tuple(ids[i:i + size]) for i in range(0, len(ids), size)]
    return out


def default_scope(corpus: Corpus, metric: str) -> list[str]:
    """Units the judge sees by default: all answers, or sentences citing something."""
    if metric == "relevance":
        return sorted(corpus.answers)
    return sorted(u for u, s in corpus.sentences.items() if s.cited_source_ids)


def annotate_corpus(corpus: Corpus, metric: str, backend, config: JudgeConfig | None = None, *,
                    units: Sequence[str] | None = None, template: PromptTemplate | None = None,
                    sleep: Callable[[float], None] = time.sleep) -> JudgeRun:
    """Judge every in-scope unit once; a unit ends with a record or a terminal failure."""
    config = config or JudgeConfig()
    if metric not in METRIC_UNIT_KIND:
        raise ValueError(f"unknown metric {metric!r}")
    template = template or PromptTemplate.load(metric)
    unit_ids = list(default_scope(corpus, metric) if units is None else units)
    pool = corpus.answers if metric == "relevance" else corpus.sentences
    unknown = [u for u in unit_ids if u not in pool]
    if unknown:
        raise ValueError(f"units not in corpus: {unknown[:10]}")
    if len(set(unit_ids)) != len(unit_ids):
        raise ValueError("unit ids must be unique")
    batches = _batches(corpus, metric, unit_ids, config.batch_size)

    def run(batch_index: int, batch: tuple[str, ...]) -> list[dict]:
        entry = {"metric": metric, "batch": batch_index, "batch_size": len(batch),
                 "model_id": config.model, "temperature": config.temperature,
                 "attempts": 0, "attempt_log": [], "prompt_sha256": None,
                 "prompt_tokens": None, "completion_tokens": None}
        try:
            target = (corpus.answers[batch[0]] if metric == "relevance"
                      else [corpus.sentences[u] for u in batch])
            prompt = render_prompt(template, target, corpus)
        except RenderError as exc:
            return [{**entry, "unit_id": u, "outcome": "failed", "label": None,
                     "error": f"{type(exc).__name__}: {exc}"} for u in batch]
        entry["prompt_sha256"] = prompt_hash(prompt)
        request = ChatRequest(prompt, config.model, config.temperature, batch)
        error = None
        verdicts = None
        for attempt in range(1, config.max_attempts + 1):
            entry["attempts"] = attempt
            delay = config.backoff(attempt)
            try:
                resp = backend.complete(request)
                entry["prompt_tokens"] = resp.prompt_tokens
                entry["completion_tokens"] = resp.completion_tokens
                verdicts = parse_verdicts(resp.text, batch, lenient=config.lenient,
                                          model_id=config.model, temperature=config.temperature)
                entry["attempt_log"].append({"attempt": attempt, "outcome": "ok"})
                break
            except PermanentBackendError as exc:
                error = f"{type(exc).__name__}: {exc}"
                entry["attempt_log"].append({"attempt": attempt, "outcome": error})
                break
            except TransientBackendError as exc:
                error = f"{type(exc).__name__}: {exc}"
                if exc.retry_after is not None:
                    delay = min(config.backoff_max, exc.retry_after)
            except VerdictError as exc:
                error = f"{type(exc).__name__}: {exc}"
            entry["attempt_log"].append({"attempt": attempt, "outcome": error})
            if attempt < config.max_attempts:
                logger.debug("retrying batch %s after %s (%.2fs)", batch_index, error, delay)
                sleep(delay)
        if verdicts is None:
            return [{**entry, "unit_id": u, "outcome": "failed", "label": None, "error": error}
                    for u in batch]
        return [{**entry, "unit_id": v.unit_id, "outcome": "ok", "label": v.label, "error": None}
                for v in verdicts]

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool_ex:
        results = list(pool_ex.map(lambda ib: run(*ib), enumerate(batches)))
    manifest = sorted((e for res in results for e in res), key=lambda e: e["unit_id"])
    kind = METRIC_UNIT_KIND[metric]
    records = [AnnotationRecord(e["unit_id"], kind, metric, "judge", e["label"], config.model)
               for e in manifest if e["outcome"] == "ok"]
    failures = [e for e in manifest if e["outcome"] != "ok"]
    header = {"metric": metric, "model_id": config.model, "temperature": config.temperature,
              "batch_size": config.batch_size, "max_attempts": config.max_attempts,
              "template_sha256": template.sha256, "n_units": len(unit_ids),
              "n_records": len(records), "n_failures": len(failures)}
    return JudgeRun(metric, records, failures, manifest, header)
