"""Command-line surface: each pipeline stage independently invocable.

Exit codes: 0 success, 1 config error, 2 partial failures present,
3 fatal error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .analysis import emit_report, replay_published_tables
from .corpus import load_corpus
from .errors import ConfigInvalid, EhrRagError
from .runner import (Environment, ResultsStore, aggregate_scores, build_gold,
                     run_experiment, validate_config)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_FATAL = 3


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    """Evaluation harness for context selection over longitudinal clinical notes."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")


def _load_config(config_path: str):
    try:
        return validate_config(config_path)
    except ConfigInvalid as exc:
        for violation in exc.violations:
            click.echo(f"config error: {violation}", err=True)
        sys.exit(EXIT_CONFIG)


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True))
def ingest(corpus_path: str) -> None:
    """Load and validate a corpus file; print the load report."""
    try:
        corpus, report = load_corpus(corpus_path)
    except EhrRagError as exc:
        click.echo(f"fatal: {exc}", err=True)
        sys.exit(EXIT_FATAL)
    click.echo(f"encounters: {report.n_encounters}")
    click.echo(f"notes:      {report.n_notes}")
    click.echo(f"issues:     {len(report.issues)}")
    for issue in report.issues[:50]:
        click.echo(f"  [{issue.kind}] {issue.encounter_id or '-'}"
                   f"/{issue.note_id or '-'}: {issue.message}")
    sys.exit(EXIT_OK if report.ok else EXIT_PARTIAL)


@main.command()
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--encounters", "-n", default=50, show_default=True, type=int)
@click.option("--out", "-o", "out_dir", required=True, type=click.Path())
@click.option("--duplication-rate", default=0.25, show_default=True, type=float)
@click.option("--distractor-rate", default=0.3, show_default=True, type=float)
def synth(seed: int, encounters: int, out_dir: str, duplication_rate: float,
          distractor_rate: float) -> None:
    """Generate a synthetic corpus with planted, fully known gold facts."""
    from .synth import SynthConfig, generate_corpus

    cfg = SynthConfig(seed=seed, n_encounters=encounters,
                      duplication_rate=duplication_rate,
                      distractor_rate=distractor_rate)
    paths = generate_corpus(cfg, out_dir)
    for key, path in paths.items():
        click.echo(f"{key}: {path}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def index(config_path: str) -> None:
    """Build and cache chunk vectors for every encounter and task."""
    from .corpus import truncate_for_task
    from .errors import NoCutoffNote

    cfg = _load_config(config_path)
    cfg.vector_cache = True  # the whole point of this verb is the disk cache
    env = Environment(cfg)
    corpus, _ = load_corpus(cfg.corpus_path)
    built = 0
    for h in corpus:
        for task in cfg.tasks:
            try:
                truncated = truncate_for_task(h, task)
            except NoCutoffNote:
                continue
            env.index_for(h, task, truncated)
            built += 1
    click.echo(f"indexed {built} (encounter, task) pairs; "
               f"vectors cached under {cfg.out_dir / 'vector-cache'}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def gold(config_path: str) -> None:
    """Build task gold labels and persist them next to the results."""
    cfg = _load_config(config_path)
    env = Environment(cfg)
    corpus, _ = load_corpus(cfg.corpus_path)
    labels = build_gold(corpus, cfg, env)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    gold_path = cfg.out_dir / "gold.json"
    gold_path.write_text(json.dumps(labels, indent=1, sort_keys=True,
                                    ensure_ascii=False), encoding="utf-8")
    click.echo(f"gold labels for {len(labels)} encounters -> {gold_path}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def run(config_path: str) -> None:
    """Execute the experiment matrix (resumable)."""
    cfg = _load_config(config_path)
    try:
        summary = run_experiment(cfg)
    except EhrRagError as exc:
        click.echo(f"fatal: {exc}", err=True)
        sys.exit(EXIT_FATAL)
    for key, value in summary.items():
        click.echo(f"{key}: {value}")
    sys.exit(EXIT_PARTIAL if summary["n_failed"] else EXIT_OK)


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def score(config_path: str) -> None:
    """Aggregate per-cell records into dataset metrics."""
    cfg = _load_config(config_path)
    rows = aggregate_scores(cfg)
    payload = [row.__dict__ for row in rows]
    out = cfg.out_dir / "scores.json"
    out.write_text(json.dumps(payload, indent=1, sort_keys=True),
                   encoding="utf-8")
    for row in rows:
        click.echo(f"{row.task:12s} {row.model:24s} {row.strategy_kind:8s} "
                   f"{row.strategy_param:>7d} {row.metric:28s} {row.value:8.4f}")
    click.echo(f"-> {out}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--no-plots", is_flag=True, help="Skip SVG plot emission.")
@click.option("--log-x", is_flag=True, help="Logarithmic x axis on plots.")
def report(config_path: str, no_plots: bool, log_x: bool) -> None:
    """Emit CSV, markdown tables, and plots for a scored run."""
    cfg = _load_config(config_path)
    rows = aggregate_scores(cfg)
    outputs = emit_report(rows, cfg.out_dir / "report",
                          run_id=cfg.fingerprint(),
                          plots=not no_plots, log_x=log_x)
    click.echo(f"csv:    {outputs['csv']}")
    click.echo(f"tables: {outputs['tables']}")
    for path in outputs["plots"]:
        click.echo(f"plot:   {path}")


@main.command("replay-paper-tables")
@click.option("--tolerance", default=0.15, show_default=True, type=float,
              help="Allowed relative residual against the published values.")
@click.option("--abs-tolerance", default=2.0, show_default=True, type=float,
              help="Absolute residual (points) accepted when the published "
                   "value is near zero and relative error is uninformative.")
def replay_paper_tables(tolerance: float, abs_tolerance: float) -> None:
    """Recompute the published area differences from the bundled tables.

    Residuals reflect the unknown exact x-convention of the source
    analysis; every row is printed, none hidden.
    """
    rows = replay_published_tables()
    failures = 0
    for row in rows:
        absolute = abs(row.computed_percent - row.published_percent)
        ok = row.relative_error <= tolerance or absolute <= abs_tolerance
        failures += 0 if ok else 1
        click.echo(f"{row.task:12s} {row.metric:24s} {row.model:12s} "
                   f"computed {row.computed_percent:9.1f}%  "
                   f"published {row.published_percent:9.1f}%  "
                   f"residual {100 * row.relative_error:5.1f}% rel / "
                   f"{absolute:5.2f} abs  {'ok' if ok else 'RESIDUAL'}")
    click.echo(f"{len(rows) - failures}/{len(rows)} rows within tolerance "
               f"({100 * tolerance:.0f}% relative or {abs_tolerance:.1f} points)")
    sys.exit(EXIT_OK if failures == 0 else EXIT_PARTIAL)


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
def compact(config_path: str) -> None:
    """Deduplicate and sort the results store."""
    cfg = _load_config(config_path)
    store = ResultsStore(cfg.out_dir / "results.jsonl")
    n = store.compact()
    click.echo(f"{n} records -> {store.path}")


if __name__ == "__main__":
    main()
