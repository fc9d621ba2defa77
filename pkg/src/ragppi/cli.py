"""Command-line entry point: ``ragppi <command> ...``.

Exit codes:
    0  success
    1  dataset failed validation
    2  usage error
    3  required inputs missing (files, annotations, embeddings)
    4  invalid configuration
    5  output directory locked by another run
    6  judge run finished with terminal per-unit failures
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .dataset import (DEFAULT_SOURCE_ID_PATTERN, DIFFICULTIES, THEMES, Corpus,
                      CorpusError, FieldMap, MissingEmbeddingError, load_annotations,
                      load_corpus)
from .judge import HttpChatBackend, JudgeConfig, MockBackend, annotate_corpus
from .report import MissingAnnotationsError, build_report, dumps_report, estimate_metric, figure_csvs
from .sampler import plan_sample
from .simulation import InfeasibleAgreementError, analytic_sweep, default_grid, monte_carlo_sweep
from .textmetrics import answer_language, auto_rates, load_abstention_phrases

logger = logging.getLogger("ragppi")

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_LOCKED, EXIT_JUDGE = range(7)

ENV_PREFIX = "RAGPPI_"
LOCK_NAME = ".ragppi.lock"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    data: str | None = None
    field_map: str | None = None
    source_id_pattern: str = DEFAULT_SOURCE_ID_PATTERN
    out: str | None = None
    alpha: float = 0.05
    seed: int = 0
    budget: int | None = None
    m: int = 3
    themes: list[str] = field(default_factory=list)
    difficulties: list[str] = field(default_factory=list)
    french_only: bool = False
    judge_url: str | None = None
    judge_model: str = "gpt-4o-2024-08-06"
    judge_temperature: float = 0.0
    judge_api_key_env: str = "RAGPPI_JUDGE_API_KEY"

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise CliError(f"alpha must be in (0, 1), got {self.alpha}", EXIT_CONFIG)
        if self.m < 1:
            raise CliError("m must be >= 1", EXIT_CONFIG)
        if self.budget is not None and self.budget < self.m:
            raise CliError(f"budget {self.budget} is smaller than m={self.m}", EXIT_CONFIG)
        for t in self.themes:
            if t not in THEMES:
                raise CliError(f"unknown theme {t!r}; expected one of {list(THEMES)}", EXIT_CONFIG)
        for d in self.difficulties:
            if d not in DIFFICULTIES:
                raise CliError(f"unknown difficulty {d!r}; expected one of {list(DIFFICULTIES)}",
                               EXIT_CONFIG)

    def snapshot(self) -> dict:
        # the output location is not part of the analysis
        snap = asdict(self)
        snap.pop("out")
        return snap


_CONFIG_KEYS = {
    ("data", "dir"): ("data", str), ("data", "field_map"): ("field_map", str),
    ("data", "source_id_pattern"): ("source_id_pattern", str),
    ("run", "out"): ("out", str), ("run", "alpha"): ("alpha", float), ("run", "seed"): ("seed", int),
    ("run", "french_only"): ("french_only", lambda v: v.lower() in ("1", "true", "yes", "on")),
    ("sampling", "budget"): ("budget", int), ("sampling", "m"): ("m", int),
    ("judge", "url"): ("judge_url", str), ("judge", "model"): ("judge_model", str),
    ("judge", "temperature"): ("judge_temperature", float),
    ("judge", "api_key_env"): ("judge_api_key_env", str),
}


def load_config(path: str | None, env: dict | None = None) -> RunConfig:
    """Read an INI config, then apply ``RAGPPI_<SECTION>_<KEY>`` environment overrides."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise CliError(f"config file not found: {path}", EXIT_MISSING)
        parser.read(path, encoding="utf-8")
        known_sections = {s for s, _ in _CONFIG_KEYS}
        for section in parser.sections():
            if section not in known_sections:
                raise CliError(f"unknown config section [{section}]", EXIT_CONFIG)
            for key in parser[section]:
                if (section, key) not in _CONFIG_KEYS:
                    raise CliError(f"unknown config key {section}.{key}", EXIT_CONFIG)
    for (section, key), (attr, conv) in _CONFIG_KEYS.items():
        raw = env.get(f"{ENV_PREFIX}{section}_{key}".upper())
        if raw is None and parser.has_option(section, key):
            raw = parser.get(section, key)
        if raw is not None:
            try:
                setattr(cfg, attr, conv(raw))
            except ValueError:
                raise CliError(f"bad value for {section}.{key}: {raw!r}", EXIT_CONFIG) from None
    return cfg


def _apply_args(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for attr in ("data", "field_map", "source_id_pattern", "out", "alpha", "seed", "budget", "m"):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(cfg, attr, v)
    if getattr(args, "theme", None):
        cfg.themes = list(args.theme)
    if getattr(args, "difficulty", None):
        cfg.difficulties = list(args.difficulty)
    if getattr(args, "french_only", False):
        cfg.french_only = True
    cfg.validate()
    return cfg


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@contextmanager
def output_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"output directory {directory} is locked ({lock} exists)", EXIT_LOCKED) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_outputs(out: Path, files: dict[str, str], meta: dict | None = None) -> None:
    """All content is rendered before the first write; each file lands atomically."""
    with output_lock(out):
        for name, text in files.items():
            write_atomic(out / name, text)
        if meta is not None:
            meta = {**meta, "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                    "version": __version__}
            write_atomic(out / "run_meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load(cfg: RunConfig, extra_annotations: list[str] | None = None) -> Corpus:
    if not cfg.data:
        raise CliError("no dataset given (--data or [data] dir)", EXIT_MISSING)
    fmap = FieldMap.from_json(cfg.field_map) if cfg.field_map else None
    try:
        corpus = load_corpus(cfg.data, source_id_pattern=cfg.source_id_pattern, field_map=fmap)
        for path in extra_annotations or []:
            corpus = corpus.with_annotations(load_annotations(path))
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_MISSING) from None
    except CorpusError as exc:
        raise CliError(f"invalid dataset: {exc}", EXIT_INVALID) from None
    return corpus


def _answer_filter(cfg: RunConfig):
    if not cfg.french_only:
        return None
    return lambda a: answer_language(a) == "fr"


def _out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise CliError("no output directory given (--out or [run] out)", EXIT_MISSING)
    return Path(cfg.out)


# --------------------------------------------------------------------------- commands


def cmd_validate(cfg: RunConfig, args) -> int:
    corpus = _load(cfg)
    print(f"OK: {corpus!r}")
    for (theme, diff), count in sorted(corpus.table().items(),
                                       key=lambda kv: (THEMES.index(kv[0][0]), DIFFICULTIES.index(kv[0][1]))):
        print(f"  {theme:8s} {diff:14s} {count:5d} questions")
    return EXIT_OK


def _auto(cfg: RunConfig, args, corpus: Corpus):
    phrases = load_abstention_phrases(getattr(args, "abstentions", None))
    return auto_rates(corpus, cfg.alpha, level=getattr(args, "level", None) or "theme_difficulty",
                      phrases=phrases, id_pattern=cfg.source_id_pattern,
                      answer_filter=_answer_filter(cfg))


def cmd_metrics_auto(cfg: RunConfig, args) -> int:
    corpus = _load(cfg)
    reps = _auto(cfg, args, corpus)
    report = build_report(cfg.snapshot(), auto_metrics=reps)
    files = {"auto_metrics.json": dumps_report(report), **figure_csvs(report)}
    _write_outputs(_out(cfg), files, {"command": "metrics-auto"})
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    corpus = _load(cfg)
    if cfg.budget is None:
        raise CliError("sampling needs a budget (--budget or [sampling] budget)", EXIT_CONFIG)
    overrides = None
    if args.budget_overrides:
        overrides = json.loads(Path(args.budget_overrides).read_text(encoding="utf-8"))
    units = None
    if args.unit_kind == "sentence" and not args.all_sentences:
        units = [u for u, s in corpus.sentences.items() if s.cited_source_ids]
    flt = _answer_filter(cfg)
    if flt is not None or cfg.themes:
        pool = units if units is not None else corpus.units(args.unit_kind)
        units = [u for u in pool
                 if (flt is None or flt(corpus.answer_of(u)))
                 and (not cfg.themes or corpus.question_of(u).theme in cfg.themes)]
    try:
        plan = plan_sample(corpus, cfg.budget, cfg.m, cfg.seed, unit_kind=args.unit_kind,
                           level=args.level, allocation=args.allocation, overrides=overrides,
                           units=units, normalize=not args.no_normalize)
    except MissingEmbeddingError as exc:
        raise CliError(str(exc), EXIT_MISSING) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    files = {"sampling_plan.json": plan.to_json() + "\n", "worklist.csv": plan.worklist_csv()}
    _write_outputs(_out(cfg), files, {"command": "sample", "config": cfg.snapshot()})
    return EXIT_OK


def cmd_judge(cfg: RunConfig, args) -> int:
    corpus = _load(cfg)
    jc = JudgeConfig(model=cfg.judge_model if args.backend == "http" else "mock",
                     temperature=cfg.judge_temperature, batch_size=args.batch_size,
                     max_attempts=args.max_attempts, concurrency=args.concurrency,
                     lenient=args.lenient, backoff_base=args.backoff)
    if args.backend == "mock":
        backend = MockBackend(label=args.mock_label, failure_rate=args.mock_failure_rate, seed=cfg.seed)
    else:
        if not cfg.judge_url:
            raise CliError("http backend needs [judge] url or RAGPPI_JUDGE_URL", EXIT_CONFIG)
        backend = HttpChatBackend(cfg.judge_url, os.environ.get(cfg.judge_api_key_env))
    units = None
    if args.units:
        units = [line.split(",")[0].strip() for line in Path(args.units).read_text(encoding="utf-8").splitlines()
                 if line.strip() and not line.startswith("unit_id")]
    run = annotate_corpus(corpus, args.metric, backend, jc, units=units)
    buf = []
    for r in run.records:
        buf.append(json.dumps(r.to_dict(), ensure_ascii=False))
    files = {f"judge_{args.metric}.jsonl": "\n".join(buf) + ("\n" if buf else ""),
             f"judge_{args.metric}_manifest.jsonl": run.manifest_jsonl()}
    _write_outputs(_out(cfg), files, {"command": "judge", **run.header})
    print(f"{run.header['n_records']} records, {run.header['n_failures']} terminal failures")
    return EXIT_JUDGE if run.failures else EXIT_OK


def _estimates(cfg: RunConfig, args, corpus: Corpus, metrics) -> dict:
    out = {}
    for metric in metrics:
        try:
            out[metric] = estimate_metric(
                corpus, metric, alpha=cfg.alpha, lam=args.lam, level=args.level, pool=args.pool,
                themes=cfg.themes or None, difficulties=cfg.difficulties or None,
                answer_filter=_answer_filter(cfg), ddof=args.ddof)
        except MissingAnnotationsError as exc:
            raise CliError(str(exc), EXIT_MISSING) from None
    return out


def cmd_estimate(cfg: RunConfig, args) -> int:
    corpus = _load(cfg, args.annotations)
    annotated = _estimates(cfg, args, corpus, args.metric)
    report = build_report({**cfg.snapshot(), **_est_snapshot(args)}, annotated=annotated)
    files = {"estimates.json": dumps_report(report), **figure_csvs(report)}
    _write_outputs(_out(cfg), files, {"command": "estimate"})
    for metric, rows in annotated.items():
        for r in rows:
            print(f"{metric:9s} {r.stratum:18s} n={r.ppi.n:5d} N={r.ppi.N:6d} "
                  f"a_rand={r.agreement.random_agreement:.2f} a_obs={r.agreement.observed_agreement:.2f} "
                  f"human={r.human.theta_hat:.3f}±{r.human.half_width:.3f} "
                  f"ppi={r.ppi.theta_hat:.3f}±{r.ppi.half_width:.3f} n_eff={r.ppi.n_effective:.2f}")
    return EXIT_OK


def _est_snapshot(args) -> dict:
    return {"lambda": args.lam, "level": args.level, "pool": args.pool, "ddof": args.ddof}


def _simulate(args, alpha: float, seed: int):
    try:
        grid = default_grid(args.p, args.q, args.step)
        if args.trials:
            return monte_carlo_sweep(args.p, args.q, args.n, args.N, alpha, grid, args.trials, seed)
        return analytic_sweep(args.p, args.q, args.n, args.N, alpha, grid)
    except (InfeasibleAgreementError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def cmd_simulate(cfg: RunConfig, args) -> int:
    sim = _simulate(args, cfg.alpha, cfg.seed)
    files = {"simulation.csv": sim.to_csv(),
             "simulation.json": json.dumps(sim.to_dict(), indent=2, sort_keys=True) + "\n"}
    _write_outputs(_out(cfg), files, {"command": "simulate"})
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    corpus = _load(cfg, args.annotations)
    auto = _auto(cfg, args, corpus)
    metrics = [m for m in args.metric if corpus.labels(m, "human")]
    annotated = _estimates(cfg, args, corpus, metrics)
    sim = _simulate(args, cfg.alpha, cfg.seed) if args.simulate else None
    snap = {**cfg.snapshot(), **_est_snapshot(args)}
    if sim is not None:
        snap.update({"sim_p": args.p, "sim_q": args.q, "sim_n": args.n, "sim_N": args.N,
                     "sim_trials": args.trials})
    report = build_report(snap, auto_metrics=auto, annotated=annotated, simulation=sim)
    files = {"report.json": dumps_report(report), **figure_csvs(report)}
    _write_outputs(_out(cfg), files, {"command": "report"})
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--data", help="corpus directory")
        p.add_argument("--field-map", dest="field_map", help="JSON field-name adapter")
        p.add_argument("--source-id-pattern", dest="source_id_pattern")
        p.add_argument("--theme", action="append", choices=THEMES)
        p.add_argument("--difficulty", action="append", choices=DIFFICULTIES)
        p.add_argument("--french-only", action="store_true",
                       help="drop answers not detected (or marked) as French")


def _estimate_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fixed judge weight in [0, 1]; default power-tuned")
    p.add_argument("--level", choices=("theme", "theme_difficulty"), default="theme")
    p.add_argument("--pool", choices=("all", "complement"), default="all")
    p.add_argument("--ddof", type=int, choices=(0, 1), default=1)
    p.add_argument("--annotations", action="append", default=[],
                   help="extra annotation JSONL (e.g. judge output); repeatable")


def _sim_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p", type=float, default=0.8)
    p.add_argument("--q", type=float, default=0.8)
    p.add_argument("--n", type=int, default=140)
    p.add_argument("--N", type=int, default=3985)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo trials; 0 for analytic only")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ragppi", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a corpus against the schema")
    _common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("metrics-auto", help="language, effective-response and citation rates")
    _common(p)
    p.add_argument("--abstentions", help="abstention phrase file")
    p.add_argument("--level", choices=("theme", "theme_difficulty"), default="theme_difficulty")
    p.set_defaults(func=cmd_metrics_auto)

    p = sub.add_parser("sample", help="stratified k-means sampling plan")
    _common(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--unit-kind", choices=("answer", "sentence"), default="sentence")
    p.add_argument("--level", choices=("theme", "theme_difficulty"), default="theme")
    p.add_argument("--allocation", choices=("proportional", "equal"), default="proportional")
    p.add_argument("--budget-overrides", help="JSON object {stratum_key: budget}")
    p.add_argument("--all-sentences", action="store_true", help="include sentences without citations")
    p.add_argument("--no-normalize", action="store_true", help="skip L2 normalisation")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("judge", help="annotate units with the LLM judge")
    _common(p)
    p.add_argument("--metric", choices=("relevance", "veracity"), required=True)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--mock-label", type=int, choices=(0, 1), default=1)
    p.add_argument("--mock-failure-rate", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--max-attempts", type=int, default=5)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--backoff", type=float, default=1.0, help="base backoff delay in seconds")
    p.add_argument("--lenient", action="store_true", help="strip markdown fences before parsing")
    p.add_argument("--units", help="file with one unit id per line (or a worklist CSV)")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("estimate", help="human, judge and PPI estimates per theme")
    _common(p)
    p.add_argument("--metric", action="append", choices=("relevance", "veracity"), required=True)
    _estimate_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="agreement sensitivity sweep")
    _common(p, data=False)
    _sim_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="full report with per-figure CSVs")
    _common(p)
    p.add_argument("--metric", action="append", choices=("relevance", "veracity"),
                   default=None)
    p.add_argument("--abstentions")
    p.add_argument("--simulate", action="store_true")
    _estimate_args(p)
    _sim_args(p)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and args.metric is None:
        args.metric = ["relevance", "veracity"]
    try:
        cfg = _apply_args(load_config(args.config), args)
        return args.func(cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
