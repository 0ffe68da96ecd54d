"""Experiment configuration, matrix execution, and score aggregation.

A run is a matrix over (encounter, task, strategy, model). Every cell
produces exactly one record in an append-only JSONL store keyed by a
content-hash run id, so interrupted runs resume where they stopped and
completed ones replay from cache without a single provider call.
Records are written in submission order regardless of worker count,
which keeps the store byte-identical across runs.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from .ccsr import CcsrTable, load_ccsr
from .contexts import ContextStrategy, build_context, parse_strategy, render_prompt
from .corpus import Corpus, Hospitalization, TaskKind, load_corpus, truncate_for_task
from .embeddings import EmbeddingProvider, make_provider
from .errors import (BudgetTooSmall, ConfigInvalid, ContextLengthExceeded,
                     EhrRagError, NoCutoffNote, ProviderError)
from .indexer import ChunkIndex, build_index, default_query
from .linker import DictionaryLinker
from .llm import ChatGateway, ChatRequest, MockChatProvider, OpenAICompatProvider
from .rxnorm import FixtureRxNormClient, LiveRxNormClient, MedicationNormalizer, \
    RecordingRxNormClient, load_overrides
from .tasks import antibiotics as abx
from .tasks import diagnosis as dx
from .tasks import imaging as img
from .tasks.matching import PrfScore
from .analysis import ScoreRow
from .tokenization import get_tokenizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    provider: str
    model_id: str
    window: int | None = None

    @property
    def label(self) -> str:
        return f"{self.provider}:{self.model_id}"


@dataclass
class ExperimentConfig:
    corpus_path: Path
    out_dir: Path
    tasks: list[TaskKind]
    strategies: list[ContextStrategy]
    models: list[ModelSpec]
    providers: dict[str, dict]
    embedding: dict = field(default_factory=lambda: {"provider": "deterministic-test"})
    tokenizer_id: str = "rule-v1"
    chunk_window: int = 128
    chunk_stride: int = 20
    sliding_as_overlap: bool = False  # read "window of 20" as overlap, not stride
    partial_notes: bool = True
    mar_path: Path | None = None
    truth_dir: Path | None = None
    ccsr_path: Path | None = None  # packaged demo table when unset
    terminology_path: Path | None = None
    modality_rules_path: Path | None = None
    rxnorm_fixture_path: Path | None = None
    rxnorm_live: bool = False
    med_overrides_path: Path | None = None
    filter_model: str | None = None  # "provider:model" for the billing filter
    vector_cache: bool = False  # persist chunk vectors under out_dir
    workers: int = 1
    seed: int = 0

    @property
    def effective_stride(self) -> int:
        if self.sliding_as_overlap:
            return self.chunk_window - self.chunk_stride
        return self.chunk_stride

    def fingerprint(self) -> str:
        key = json.dumps({
            "tokenizer": self.tokenizer_id,
            "window": self.chunk_window,
            "stride": self.effective_stride,
            "embedding": self.embedding,
            "partial_notes": self.partial_notes,
            "seed": self.seed,
        }, sort_keys=True)
        return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def _read_config_file(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)
    try:
        import tomllib as toml
    except ImportError:
        import tomli as toml
    return toml.loads(text)


def validate_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML or JSON config, reporting every violation."""
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid([f"config file {path} does not exist"])
    try:
        raw = _read_config_file(path)
    except Exception as exc:
        raise ConfigInvalid([f"unparseable config: {exc}"]) from exc

    problems: list[str] = []
    base = path.parent

    def resolve(key: str, required: bool = False) -> Path | None:
        value = raw.get(key)
        if value is None:
            if required:
                problems.append(f"{key}: missing required path")
            return None
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            problems.append(f"{key}: {p} does not exist")
        return p

    corpus_path = resolve("corpus", required=True)
    mar_path = resolve("mar") if "mar" in raw else None
    truth_dir = resolve("truth_dir") if "truth_dir" in raw else None
    ccsr_path = resolve("ccsr") if "ccsr" in raw else None
    terminology_path = resolve("terminology") if "terminology" in raw else None
    modality_rules_path = resolve("modality_rules") if "modality_rules" in raw else None
    rxnorm_fixture_path = None
    if "rxnorm_fixture" in raw:
        p = Path(raw["rxnorm_fixture"])
        rxnorm_fixture_path = p if p.is_absolute() else base / p

    tasks: list[TaskKind] = []
    for name in raw.get("tasks", []):
        try:
            tasks.append(TaskKind(name))
        except ValueError:
            problems.append(f"tasks: unknown task {name!r}")
    if not tasks:
        problems.append("tasks: at least one task required")

    strategies: list[ContextStrategy] = []
    for label in raw.get("strategies", []):
        try:
            strategies.append(parse_strategy(label))
        except ValueError as exc:
            problems.append(f"strategies: {exc}")
    if not strategies:
        problems.append("strategies: at least one strategy required")

    providers = raw.get("providers", {})
    models: list[ModelSpec] = []
    for spec in raw.get("models", []):
        provider = spec.get("provider")
        model_id = spec.get("model")
        if not provider or not model_id:
            problems.append(f"models: entry {spec!r} needs provider and model")
            continue
        if provider not in providers:
            problems.append(f"models: provider {provider!r} not configured")
        models.append(ModelSpec(provider, model_id, spec.get("window")))
    if not models:
        problems.append("models: at least one model required")

    for pid, pconf in providers.items():
        ptype = pconf.get("type")
        if ptype not in ("oracle", "mock", "openai-compatible"):
            problems.append(f"providers.{pid}: unknown type {ptype!r}")
        if ptype == "oracle" and truth_dir is None:
            problems.append(f"providers.{pid}: oracle provider requires truth_dir")
        if ptype == "mock" and "script" not in pconf:
            problems.append(f"providers.{pid}: mock provider requires a script path")
        if ptype == "openai-compatible" and "endpoint" not in pconf:
            problems.append(f"providers.{pid}: endpoint required")

    window = int(raw.get("chunk_window", 128))
    stride = int(raw.get("chunk_stride", 20))
    if window < 1:
        problems.append("chunk_window must be >= 1")
    if not 1 <= stride <= window:
        problems.append("chunk_stride must be in 1..chunk_window")
    workers = int(raw.get("workers", 1))
    if workers < 1:
        problems.append("workers must be >= 1")

    out_dir = Path(raw.get("out_dir", "run-output"))
    if not out_dir.is_absolute():
        out_dir = base / out_dir

    if problems:
        raise ConfigInvalid(problems)
    return ExperimentConfig(
        corpus_path=corpus_path, out_dir=out_dir, tasks=tasks,
        strategies=strategies, models=models, providers=providers,
        embedding=raw.get("embedding", {"provider": "deterministic-test"}),
        tokenizer_id=raw.get("tokenizer", "rule-v1"),
        chunk_window=window, chunk_stride=stride,
        sliding_as_overlap=bool(raw.get("sliding_as_overlap", False)),
        partial_notes=bool(raw.get("partial_notes", True)),
        mar_path=mar_path, truth_dir=truth_dir, ccsr_path=ccsr_path,
        terminology_path=terminology_path,
        modality_rules_path=modality_rules_path,
        rxnorm_fixture_path=rxnorm_fixture_path,
        rxnorm_live=bool(raw.get("rxnorm_live", False)),
        filter_model=raw.get("filter_model"),
        vector_cache=bool(raw.get("vector_cache", False)),
        workers=workers, seed=int(raw.get("seed", 0)),
    )


class Environment:
    """Shared services for one experiment: gateways, tables, tokenizer."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.tokenizer = get_tokenizer(cfg.tokenizer_id)
        emb = dict(cfg.embedding)
        self.embedding: EmbeddingProvider = make_provider(emb.pop("provider"), **emb)
        self.modality_rules = img.load_modality_rules(cfg.modality_rules_path)
        rx_client = FixtureRxNormClient(cfg.rxnorm_fixture_path)
        if cfg.rxnorm_live:
            rx_client = RecordingRxNormClient(
                LiveRxNormClient(),
                cfg.rxnorm_fixture_path or cfg.out_dir / "rxnorm_recorded.json")
        overrides = load_overrides(cfg.med_overrides_path)
        self.normalizer = MedicationNormalizer(rx_client, overrides)
        self.linker = DictionaryLinker(cfg.terminology_path)
        self.ccsr: CcsrTable | None = None
        if TaskKind.DIAGNOSIS in cfg.tasks:
            ccsr_path = cfg.ccsr_path
            if ccsr_path is None:
                from importlib import resources
                ccsr_path = Path(str(resources.files("ehrrag").joinpath("data", "ccsr_mini.csv")))
            self.ccsr, _ = load_ccsr(ccsr_path)
        self.gateways: dict[str, ChatGateway] = {}
        windows = {m.model_id: m.window for m in cfg.models if m.window}
        for pid, pconf in cfg.providers.items():
            self.gateways[pid] = ChatGateway(
                self._make_chat_provider(pid, pconf),
                cache_dir=cfg.out_dir / "cache" / pid,
                model_windows=windows)
        # Small LRU: an index is reused across strategies and models of one
        # encounter, then never again, and full matrices are large.
        self._indices: dict[tuple[str, str], ChunkIndex] = {}
        self._index_cap = 12
        self._index_lock = threading.Lock()

    def _make_chat_provider(self, pid: str, pconf: dict):
        ptype = pconf.get("type")
        if ptype == "oracle":
            from .synth import SynthOracle

            return SynthOracle(self.cfg.truth_dir).provider()
        if ptype == "mock":
            script = Path(pconf["script"])
            return MockChatProvider(script, default=pconf.get("default"))
        return OpenAICompatProvider(pid, pconf["endpoint"],
                                    api_key_env=pconf.get("api_key_env"))

    def total_provider_calls(self) -> int:
        return sum(g.calls_made for g in self.gateways.values())

    def index_for(self, h: Hospitalization, task: TaskKind,
                  truncated: Hospitalization) -> ChunkIndex:
        key = (h.encounter_id, task.value)
        with self._index_lock:
            if key in self._indices:
                return self._indices[key]
        cache_dir = self.cfg.out_dir / "vector-cache" if self.cfg.vector_cache else None
        index = build_index(truncated, self.embedding, self.tokenizer,
                            self.cfg.chunk_window, self.cfg.effective_stride,
                            cache_dir=cache_dir)
        with self._index_lock:
            self._indices[key] = index
            while len(self._indices) > self._index_cap:
                self._indices.pop(next(iter(self._indices)))
        return index


# -- gold --------------------------------------------------------------------


def build_gold(corpus: Corpus, cfg: ExperimentConfig, env: Environment) -> dict:
    """Construct every task's gold labels from the corpus attachments.

    The diagnosis Filtered target goes through the billing-code filter
    once, using cfg.filter_model (first configured model by default);
    results persist alongside the run so re-scoring never re-queries.
    """
    gold: dict[str, dict] = {}
    filter_spec = None
    if TaskKind.DIAGNOSIS in cfg.tasks:
        label = cfg.filter_model or cfg.models[0].label
        provider_id, _, model_id = label.partition(":")
        filter_spec = (provider_id, model_id)
    for h in corpus:
        entry: dict = {}
        if TaskKind.IMAGING in cfg.tasks:
            events, report = img.gold_from_procedures(list(h.gold.procedures),
                                                      env.modality_rules)
            entry["imaging"] = [
                {"modality": e.modality.value, "date": e.date.isoformat(),
                 "location": e.location} for e in events]
            entry["imaging_dropped_rows"] = len(report.non_imaging)
        if TaskKind.ANTIBIOTICS in cfg.tasks:
            entry["antibiotics"] = _gold_abx(h, env)
        if TaskKind.DIAGNOSIS in cfg.tasks:
            entry["diagnosis"] = _gold_dx(h, env, filter_spec)
        gold[h.encounter_id] = entry
    return gold


def _gold_abx(h: Hospitalization, env: Environment) -> dict | None:
    note = h.note_by_id(h.gold.id_consult_note_id or "")
    if note is None:
        return None
    consult_date = note.timestamp.date()
    window = (h.admit_time.date(), consult_date)
    try:
        courses, report = abx.gold_from_consult(note, consult_date, window,
                                                env.normalizer)
    except EhrRagError as exc:
        logger.warning("%s: %s", h.encounter_id, exc)
        return None
    return {
        "consult_time": note.timestamp.isoformat(sep="T", timespec="seconds"),
        "courses": [
            {"raw_name": c.raw_name, "ingredients": sorted(c.ingredients),
             "span": None if c.span is None else
             [c.span[0].isoformat(), c.span[1].isoformat()]}
            for c in courses],
        "parse_failures": len(report.failures),
    }


def _gold_dx(h: Hospitalization, env: Environment,
             filter_spec: tuple[str, str] | None) -> dict:
    ds_note = h.note_by_id(h.gold.discharge_summary_note_id or "")
    out: dict = {"billing": [c for c in h.gold.billing_codes]}
    discharge_entries: list[list[str]] = []
    if ds_note is not None:
        entries, _ = dx.diagnoses_from_discharge_summary(ds_note.text, env.linker,
                                                         env.ccsr)
        discharge_entries = [sorted(e.icd_codes) for e in entries]
    out["discharge"] = discharge_entries
    filtered: list[str] = []
    if filter_spec is not None and ds_note is not None and h.gold.billing_codes:
        gateway = env.gateways[filter_spec[0]]
        pairs = [(code, env.ccsr.code_descriptions.get(code, ""))
                 for code in h.gold.billing_codes]
        try:
            filtered, _ = dx.filter_billing_codes(pairs, ds_note.text, gateway,
                                                  filter_spec[1])
        except ProviderError as exc:
            logger.warning("%s: billing filter failed: %s", h.encounter_id, exc)
    out["filtered"] = filtered
    return out


# -- results store -------------------------------------------------------------


class ResultsStore:
    """Append-only JSONL of run records with exactly-once run ids."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.run_ids: set[str] = set()
        self.records: list[dict] = []
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    record = json.loads(line)
                    if record["run_id"] not in self.run_ids:
                        self.run_ids.add(record["run_id"])
                        self.records.append(record)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        with self._lock:
            if record["run_id"] in self.run_ids:
                return
            self.run_ids.add(record["run_id"])
            self.records.append(record)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    def compact(self) -> int:
        """Rewrite the store deduplicated and sorted by run id."""
        unique = {r["run_id"]: r for r in self.records}
        ordered = [unique[k] for k in sorted(unique)]
        with self.path.open("w", encoding="utf-8") as fh:
            for record in ordered:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        self.records = ordered
        return len(ordered)


# -- matrix execution ----------------------------------------------------------


@dataclass(frozen=True)
class _Cell:
    h: Hospitalization
    task: TaskKind
    strategy: ContextStrategy
    model: ModelSpec


def _run_id(cell: _Cell, fingerprint: str) -> str:
    key = f"{cell.h.encounter_id}|{cell.task.value}|{cell.strategy.label}|" \
          f"{cell.model.label}|{fingerprint}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:24]


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:24]


def _execute_cell(cell: _Cell, cfg: ExperimentConfig, env: Environment,
                  gold: dict) -> dict:
    record: dict = {
        "run_id": _run_id(cell, cfg.fingerprint()),
        "encounter_id": cell.h.encounter_id,
        "task": cell.task.value,
        "strategy": cell.strategy.label,
        "model": cell.model.label,
        "flags": [],
        "scores": {},
        "prediction": {},
        "timing": {},
    }
    started = time.monotonic()
    try:
        truncated = truncate_for_task(cell.h, cell.task)
    except NoCutoffNote:
        record["flags"].append("no_cutoff_note")
        record["scores"] = _zero_scores(cell, gold)
        return record
    now = None
    if cell.task is TaskKind.ANTIBIOTICS:
        now = truncated.cutoff_time
    index = query = None
    if cell.strategy.kind == "rag":
        index = env.index_for(cell.h, cell.task, truncated)
        query = default_query(cell.task)
    try:
        bundle = build_context(truncated, cell.strategy, cell.task, index, query,
                               now=now, tokenizer=env.tokenizer,
                               partial_notes=cfg.partial_notes)
    except BudgetTooSmall:
        record["flags"].append("budget_too_small")
        record["scores"] = _zero_scores(cell, gold)
        return record
    prompt = render_prompt(cell.task, bundle, now)
    record["prompt_hash"] = _sha(prompt.rendered_text)
    record["prompt_tokens"] = bundle.prompt_tokens
    record["ehr_tokens"] = bundle.actual_ehr_tokens
    request = ChatRequest(provider_id=cell.model.provider,
                          model_id=cell.model.model_id,
                          prompt_text=prompt.rendered_text)
    gateway = env.gateways[cell.model.provider]
    try:
        response = gateway.complete(request)
    except ContextLengthExceeded:
        record["flags"].append("context_length_exceeded")
        record["scores"] = _zero_scores(cell, gold)
        return record
    except ProviderError as exc:
        record["flags"].append("provider_error")
        record["error"] = str(exc)[:300]
        record["scores"] = _zero_scores(cell, gold)
        return record
    record["response_hash"] = _sha(response.text)
    record["cached"] = response.cached
    record["scores"], record["prediction"] = _score_cell(cell, env, gold,
                                                         response.text, truncated)
    record["timing"]["latency_s"] = round(time.monotonic() - started, 6)
    return record


def _gold_imaging_events(gold_entry: dict) -> list[img.ImagingEvent]:
    from datetime import date as date_cls

    return [img.ImagingEvent(modality=img.Modality(e["modality"]),
                             date=date_cls.fromisoformat(e["date"]),
                             location=e["location"])
            for e in gold_entry.get("imaging", [])]


def _gold_abx_courses(gold_entry: dict) -> list[abx.AntibioticCourse]:
    from datetime import date as date_cls

    courses = []
    for c in (gold_entry.get("antibiotics") or {}).get("courses", []):
        span = c["span"]
        courses.append(abx.AntibioticCourse(
            raw_name=c["raw_name"], ingredients=frozenset(c["ingredients"]),
            span=None if span is None else (date_cls.fromisoformat(span[0]),
                                            date_cls.fromisoformat(span[1]))))
    return courses


def _zero_scores(cell: _Cell, gold: dict) -> dict:
    """Scored-zero cell: nothing predicted, every gold item missed."""
    entry = gold.get(cell.h.encounter_id, {})
    if cell.task is TaskKind.IMAGING:
        n = len(entry.get("imaging", []))
        return {level.value: [0, 0, n] for level in img.StrictnessLevel}
    if cell.task is TaskKind.ANTIBIOTICS:
        n = len((entry.get("antibiotics") or {}).get("courses", []))
        return {"names": [0, 0, n], "jaccards": [0.0] * n}
    counts = {}
    for target, key in (("billing_codes", "billing"), ("filtered", "filtered")):
        counts[target] = [0, 0, len((entry.get("diagnosis") or {}).get(key, []))]
    counts["discharge_summary"] = [0, 0, len((entry.get("diagnosis") or {})
                                             .get("discharge", []))]
    return counts


def _score_cell(cell: _Cell, env: Environment, gold: dict, response_text: str,
                truncated: Hospitalization) -> tuple[dict, dict]:
    entry = gold.get(cell.h.encounter_id, {})
    if cell.task is TaskKind.IMAGING:
        events, report = img.parse_llm_imaging(
            response_text, cell.h.admit_time.date(), cell.h.discharge_time.date(),
            env.modality_rules)
        gold_events = _gold_imaging_events(entry)
        scores = {level.value: list(img.match_imaging(events, gold_events, level))
                  for level in img.StrictnessLevel}
        prediction = {"events": [[e.modality.value,
                                  None if e.date is None else e.date.isoformat(),
                                  e.location] for e in events],
                      "malformed_lines": len(report.malformed)}
        return scores, prediction
    if cell.task is TaskKind.ANTIBIOTICS:
        gold_abx = entry.get("antibiotics") or {}
        consult_date = datetime.fromisoformat(
            gold_abx["consult_time"]).date() if gold_abx else \
            truncated.cutoff_time.date()
        window = (cell.h.admit_time.date(), consult_date)
        courses, report = abx.parse_llm_abx(response_text, consult_date, window,
                                            env.normalizer)
        score = abx.score_abx_encounter(courses, _gold_abx_courses(entry))
        scores = {"names": [score.tp, score.fp, score.fn],
                  "jaccards": list(score.jaccards)}
        prediction = {"courses": [
            {"raw_name": c.raw_name, "ingredients": sorted(c.ingredients),
             "span": None if c.span is None else [c.span[0].isoformat(),
                                                  c.span[1].isoformat()]}
            for c in courses],
            "malformed_lines": len(report.failures)}
        return scores, prediction
    # diagnosis
    pred_entries, report = dx.parse_llm_dx(response_text, env.linker, env.ccsr)
    gold_dx = entry.get("diagnosis") or {}
    scores = {}
    billing = dx.entries_from_codes(gold_dx.get("billing", []), env.ccsr)
    scores["billing_codes"] = list(dx.match_dx(pred_entries, billing))
    discharge_entries = []
    for codes in gold_dx.get("discharge", []):
        ccsr: frozenset[str] = frozenset()
        for code in codes:
            ccsr |= env.ccsr.categories(code)
        if ccsr:
            discharge_entries.append(dx.DiagnosisEntry(None, frozenset(codes), ccsr))
    scores["discharge_summary"] = list(dx.match_dx(pred_entries, discharge_entries))
    filtered = dx.entries_from_codes(gold_dx.get("filtered", []), env.ccsr)
    scores["filtered"] = list(dx.match_dx(pred_entries, filtered))
    prediction = {"diagnoses": [
        {"surface": e.surface_text, "codes": sorted(e.icd_codes)}
        for e in pred_entries],
        "unlinked": len(report.unlinked), "unmapped": len(report.unmapped)}
    return scores, prediction


def run_experiment(cfg: ExperimentConfig, env: Environment | None = None) -> dict:
    """Execute the full matrix; previously completed cells are skipped.

    Cell failures are recorded, never fatal. Returns a summary with cell
    counts and the number of provider calls made.
    """
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    env = env or Environment(cfg)
    corpus, load_report = load_corpus(cfg.corpus_path)
    if not load_report.ok:
        logger.warning("corpus loaded with %d issues", len(load_report.issues))

    gold_path = cfg.out_dir / "gold.json"
    if gold_path.exists():
        gold = json.loads(gold_path.read_text(encoding="utf-8"))
    else:
        gold = build_gold(corpus, cfg, env)
        gold_path.write_text(json.dumps(gold, indent=1, sort_keys=True,
                                        ensure_ascii=False), encoding="utf-8")

    store = ResultsStore(cfg.out_dir / "results.jsonl")
    fingerprint = cfg.fingerprint()
    cells = [
        _Cell(h, task, strategy, model)
        for h in corpus
        for task in cfg.tasks
        for strategy in cfg.strategies
        for model in cfg.models
    ]
    pending = [(i, c) for i, c in enumerate(cells)
               if _run_id(c, fingerprint) not in store.run_ids]
    skipped = len(cells) - len(pending)
    failed = 0

    def work(item: tuple[int, _Cell]) -> tuple[int, dict]:
        idx, cell = item
        return idx, _execute_cell(cell, cfg, env, gold)

    if cfg.workers <= 1:
        for item in pending:
            _, record = work(item)
            if record["flags"]:
                failed += 1
            store.append(record)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            # pool.map yields in submission order: appends stay deterministic
            for _, record in pool.map(work, pending):
                if record["flags"]:
                    failed += 1
                store.append(record)
    return {
        "n_cells": len(cells),
        "n_executed": len(pending),
        "n_skipped": skipped,
        "n_failed": failed,
        "provider_calls": env.total_provider_calls(),
        "results_path": str(store.path),
    }


# -- aggregation ----------------------------------------------------------------


def _prf_rows(task: str, model: str, kind: str, param: int, metric_base: str,
              counts: list[tuple[int, int, int]], mean_tokens: float | None,
              n: int) -> list[ScoreRow]:
    score: PrfScore = img.score_imaging([tuple(c) for c in counts])
    return [
        ScoreRow(task, model, kind, param, f"f1_{metric_base}", score.f1,
                 mean_tokens, n),
        ScoreRow(task, model, kind, param, f"precision_{metric_base}",
                 score.precision, mean_tokens, n),
        ScoreRow(task, model, kind, param, f"recall_{metric_base}", score.recall,
                 mean_tokens, n),
    ]


def aggregate_scores(cfg: ExperimentConfig, env: Environment | None = None) -> list[ScoreRow]:
    """Fold per-cell records into dataset-level score rows."""
    store = ResultsStore(cfg.out_dir / "results.jsonl")
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for record in store.records:
        groups.setdefault((record["task"], record["strategy"], record["model"]),
                          []).append(record)
    rows: list[ScoreRow] = []
    for (task, strategy_label, model), records in sorted(groups.items()):
        strategy = parse_strategy(strategy_label)
        kind = strategy.kind
        param = strategy.n_chunks if kind == "rag" else strategy.budget_tokens
        tokens = [r["prompt_tokens"] for r in records if "prompt_tokens" in r]
        mean_tokens = round(sum(tokens) / len(tokens), 2) if tokens else None
        n = len(records)
        if task == TaskKind.IMAGING.value:
            for level in img.StrictnessLevel:
                counts = [tuple(r["scores"][level.value]) for r in records
                          if level.value in r.get("scores", {})]
                rows.extend(_prf_rows(task, model, kind, param, level.value,
                                      counts, mean_tokens, n))
        elif task == TaskKind.ANTIBIOTICS.value:
            encounter_scores = [
                abx.AbxEncounterScore(tp=r["scores"]["names"][0],
                                      fp=r["scores"]["names"][1],
                                      fn=r["scores"]["names"][2],
                                      jaccards=tuple(r["scores"]["jaccards"]))
                for r in records if "names" in r.get("scores", {})]
            agg = abx.aggregate_abx(encounter_scores)
            rows.append(ScoreRow(task, model, kind, param, "name_f1",
                                 agg.names.f1, mean_tokens, n))
            rows.append(ScoreRow(task, model, kind, param, "name_precision",
                                 agg.names.precision, mean_tokens, n))
            rows.append(ScoreRow(task, model, kind, param, "name_recall",
                                 agg.names.recall, mean_tokens, n))
            rows.append(ScoreRow(task, model, kind, param, "timespan_jaccard",
                                 agg.jaccard_by_encounter, mean_tokens, n))
            rows.append(ScoreRow(task, model, kind, param, "timespan_jaccard_pooled",
                                 agg.jaccard_pooled, mean_tokens, n))
        else:
            for target in ("billing_codes", "discharge_summary", "filtered"):
                counts = [tuple(r["scores"][target]) for r in records
                          if target in r.get("scores", {})]
                rows.extend(_prf_rows(task, model, kind, param, target,
                                      counts, mean_tokens, n))
    rows.extend(_baseline_rows(cfg, env))
    return rows


def _baseline_rows(cfg: ExperimentConfig,
                   env: Environment | None) -> list[ScoreRow]:
    """Structured-MAR baseline; strategy-independent, one row set per corpus."""
    if cfg.mar_path is None or TaskKind.ANTIBIOTICS not in cfg.tasks:
        return []
    env = env or Environment(cfg)
    corpus, _ = load_corpus(cfg.corpus_path)
    gold_path = cfg.out_dir / "gold.json"
    if not gold_path.exists():
        return []
    gold = json.loads(gold_path.read_text(encoding="utf-8"))
    mar = abx.load_mar_csv(cfg.mar_path)
    encounter_scores = []
    for h in corpus:
        entry = gold.get(h.encounter_id, {})
        gold_abx = entry.get("antibiotics")
        if not gold_abx:
            continue
        cutoff = datetime.fromisoformat(gold_abx["consult_time"])
        baseline = abx.mar_baseline(mar.get(h.encounter_id, []), cutoff,
                                    env.normalizer)
        encounter_scores.append(
            abx.score_abx_encounter(baseline, _gold_abx_courses(entry)))
    if not encounter_scores:
        return []
    agg = abx.aggregate_abx(encounter_scores)
    n = len(encounter_scores)
    return [
        ScoreRow("antibiotics", "structured-baseline", "baseline", 0, "name_f1",
                 agg.names.f1, None, n),
        ScoreRow("antibiotics", "structured-baseline", "baseline", 0,
                 "timespan_jaccard", agg.jaccard_by_encounter, None, n),
    ]
