"""Metric-vs-token-budget curves and the normalized area difference.

Retrieval runs are placed on the x axis at the comparable nominal
budgets (20/40/60 chunks at x = 3000/5500/8000); recent-notes and
full-context runs sit at their own budgets. Because that convention is
an approximation, every curve is co-emitted with a second convention
using the measured mean prompt tokens.

The comparison number between two curves is the trapezoidal area
difference over their shared x-domain, as a percent of the baseline
curve's area.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import InsufficientPoints, ZeroBaselineArea

logger = logging.getLogger(__name__)

# Nominal x placement for retrieval points: N chunks -> comparable budget.
RAG_NOMINAL_X = {20: 3000, 40: 5500, 60: 8000}


@dataclass(frozen=True)
class CurvePoint:
    x: float  # nominal token budget (or measured mean tokens)
    y: float  # metric value (percent or Jaccard)
    actual_mean_tokens: float | None = None


@dataclass(frozen=True)
class Curve:
    task: str
    model: str
    strategy_kind: str  # "rag" | "recent" (full-context folds into recent)
    metric: str
    x_convention: str  # "nominal" | "measured"
    points: tuple[CurvePoint, ...]

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise InsufficientPoints(
                f"curve {self.task}/{self.model}/{self.strategy_kind}/{self.metric} "
                f"has {len(self.points)} point(s); need >= 2")
        xs = [p.x for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise InsufficientPoints("curve x values must be strictly increasing")


@dataclass(frozen=True)
class ScoreRow:
    """One aggregated (task, model, strategy, metric) measurement."""

    task: str
    model: str
    strategy_kind: str
    strategy_param: int  # n_chunks for rag, budget_tokens otherwise
    metric: str
    value: float
    actual_mean_tokens: float | None = None
    n_encounters: int = 0


def _nominal_x(row: ScoreRow) -> float | None:
    if row.strategy_kind == "rag":
        return RAG_NOMINAL_X.get(row.strategy_param)
    return float(row.strategy_param)


def build_curves(rows: list[ScoreRow], strict: bool = True) -> list[Curve]:
    """Group score rows into curves, one per convention.

    recent and full strategies merge into a single "recent" curve (they
    are the same packing at different budgets). Retrieval points with no
    nominal placement (non-canonical N) appear only in the measured
    convention. strict=False drops groups with fewer than two points
    instead of raising, for best-effort report emission.
    """
    groups: dict[tuple[str, str, str, str], list[ScoreRow]] = {}
    for row in rows:
        kind = "recent" if row.strategy_kind in ("recent", "full") else row.strategy_kind
        groups.setdefault((row.task, row.model, kind, row.metric), []).append(row)
    curves = []
    for (task, model, kind, metric), members in sorted(groups.items()):
        nominal = []
        measured = []
        for row in members:
            x = _nominal_x(row)
            if x is not None:
                nominal.append(CurvePoint(x, row.value, row.actual_mean_tokens))
            if row.actual_mean_tokens is not None:
                measured.append(CurvePoint(row.actual_mean_tokens, row.value,
                                           row.actual_mean_tokens))
        for convention, points in (("nominal", nominal), ("measured", measured)):
            points = sorted(points, key=lambda p: p.x)
            deduped = [p for i, p in enumerate(points)
                       if i == 0 or p.x > points[i - 1].x]
            if len(deduped) >= 2:
                curves.append(Curve(task, model, kind, metric, convention, tuple(deduped)))
            elif convention == "nominal" and strict:
                raise InsufficientPoints(
                    f"{task}/{model}/{kind}/{metric}: {len(deduped)} nominal point(s)")
    return curves


def _interpolate(points: tuple[CurvePoint, ...], x: float) -> float:
    for a, b in zip(points, points[1:]):
        if a.x <= x <= b.x:
            if b.x == a.x:
                return a.y
            t = (x - a.x) / (b.x - a.x)
            return a.y + t * (b.y - a.y)
    raise ValueError(f"x={x} outside curve domain [{points[0].x}, {points[-1].x}]")


def _auc(points: tuple[CurvePoint, ...], lo: float, hi: float) -> float:
    """Trapezoidal area over [lo, hi] with interpolated edge points."""
    knots = [(lo, _interpolate(points, lo))]
    knots.extend((p.x, p.y) for p in points if lo < p.x < hi)
    knots.append((hi, _interpolate(points, hi)))
    area = 0.0
    for (x1, y1), (x2, y2) in zip(knots, knots[1:]):
        area += 0.5 * (x2 - x1) * (y1 + y2)
    return area


def normalized_area_difference(a: Curve, b: Curve) -> float:
    """100 * (AUC_a - AUC_b) / AUC_b over the curves' shared x-domain."""
    lo = max(a.points[0].x, b.points[0].x)
    hi = min(a.points[-1].x, b.points[-1].x)
    if hi <= lo:
        raise InsufficientPoints(
            f"curves do not overlap: [{a.points[0].x}, {a.points[-1].x}] vs "
            f"[{b.points[0].x}, {b.points[-1].x}]")
    auc_a = _auc(a.points, lo, hi)
    auc_b = _auc(b.points, lo, hi)
    if auc_b == 0.0:
        raise ZeroBaselineArea("baseline curve has zero area over the shared domain")
    return 100.0 * (auc_a - auc_b) / auc_b


# -- published benchmark tables (replay fixtures) ---------------------------


def _read_fixture(name: str) -> list[dict]:
    text = resources.files("ehrrag").joinpath("data", "published", name) \
        .read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def load_published_imaging() -> list[ScoreRow]:
    rows = []
    for r in _read_fixture("imaging_scores.csv"):
        rows.append(ScoreRow(
            task="imaging", model=r["model"], strategy_kind=r["strategy"],
            strategy_param=int(r["amount"]), metric=f"f1_{r['level']}",
            value=float(r["f1"])))
    return rows


def load_published_antibiotics() -> list[ScoreRow]:
    rows = []
    for r in _read_fixture("antibiotics_scores.csv"):
        if r["strategy"] == "baseline":
            continue
        rows.append(ScoreRow(
            task="antibiotics", model=r["model"], strategy_kind=r["strategy"],
            strategy_param=int(r["amount"]), metric="timespan_jaccard",
            value=float(r["jaccard"])))
        rows.append(ScoreRow(
            task="antibiotics", model=r["model"], strategy_kind=r["strategy"],
            strategy_param=int(r["amount"]), metric="name_f1",
            value=float(r["f1"])))
    return rows


def load_published_diagnosis() -> list[ScoreRow]:
    rows = []
    for r in _read_fixture("diagnosis_scores.csv"):
        rows.append(ScoreRow(
            task="diagnosis", model=r["model"], strategy_kind=r["strategy"],
            strategy_param=int(r["amount"]), metric=f"f1_{r['target']}",
            value=float(r["f1"])))
    return rows


def load_published_area_differences() -> list[dict]:
    return [{"task": r["task"], "metric": r["metric"], "model": r["model"],
             "published_percent": float(r["published_percent"])}
            for r in _read_fixture("area_differences.csv")]


@dataclass(frozen=True)
class ReplayRow:
    task: str
    metric: str
    model: str
    computed_percent: float
    published_percent: float

    @property
    def relative_error(self) -> float:
        return abs(self.computed_percent - self.published_percent) / \
            abs(self.published_percent)


def replay_published_tables() -> list[ReplayRow]:
    """Recompute every published area difference from the score tables.

    The residual between computed and published values reflects the
    unknown exact x-convention of the source analysis; it is reported,
    never hidden.
    """
    rows = (load_published_imaging() + load_published_antibiotics()
            + load_published_diagnosis())
    # The published comparison covers the overlapping budgets only.
    comparable = [r for r in rows
                  if r.strategy_kind == "rag" or r.strategy_param <= 8000]
    curves = build_curves(comparable)
    by_key = {(c.task, c.model, c.strategy_kind, c.metric): c
              for c in curves if c.x_convention == "nominal"}
    out = []
    for published in load_published_area_differences():
        task, metric, model = published["task"], published["metric"], published["model"]
        rag = by_key.get((task, model, "rag", metric))
        recent = by_key.get((task, model, "recent", metric))
        if rag is None or recent is None:
            logger.warning("no curves for %s/%s/%s", task, metric, model)
            continue
        out.append(ReplayRow(
            task=task, metric=metric, model=model,
            computed_percent=normalized_area_difference(rag, recent),
            published_percent=published["published_percent"]))
    return out


# -- report emission ---------------------------------------------------------


def write_scores_csv(rows: list[ScoreRow], path: Path, run_id: str = "") -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "model", "strategy", "budget", "metric",
                         "value", "n_encounters", "run_id"])
        for row in sorted(rows, key=lambda r: (r.task, r.model, r.strategy_kind,
                                               r.strategy_param, r.metric)):
            writer.writerow([row.task, row.model, row.strategy_kind,
                             row.strategy_param, row.metric,
                             f"{row.value:.4f}", row.n_encounters, run_id])


def write_markdown_tables(rows: list[ScoreRow], path: Path) -> None:
    """One pivot table per (task, metric): strategies x models."""
    by_table: dict[tuple[str, str], list[ScoreRow]] = {}
    for row in rows:
        by_table.setdefault((row.task, row.metric), []).append(row)
    lines: list[str] = []
    for (task, metric), members in sorted(by_table.items()):
        models = sorted({r.model for r in members})
        lines.append(f"## {task}: {metric}")
        lines.append("")
        lines.append("| strategy | amount | " + " | ".join(models) + " |")
        lines.append("|---" * (len(models) + 2) + "|")
        cells = {(r.strategy_kind, r.strategy_param, r.model): r.value for r in members}
        combos = sorted({(r.strategy_kind, r.strategy_param) for r in members})
        for kind, param in combos:
            values = []
            for model in models:
                v = cells.get((kind, param, model))
                values.append("" if v is None else f"{v:.4f}")
            lines.append(f"| {kind} | {param} | " + " | ".join(values) + " |")
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")


def write_plots(curves: list[Curve], out_dir: Path, log_x: bool = False) -> list[Path]:
    """One SVG per (task, metric); byte-stable across runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ehrrag"
    by_plot: dict[tuple[str, str], list[Curve]] = {}
    for curve in curves:
        if curve.x_convention != "nominal":
            continue
        by_plot.setdefault((curve.task, curve.metric), []).append(curve)
    written = []
    for (task, metric), members in sorted(by_plot.items()):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for curve in sorted(members, key=lambda c: (c.model, c.strategy_kind)):
            ax.plot([p.x for p in curve.points], [p.y for p in curve.points],
                    marker="o", label=f"{curve.model} ({curve.strategy_kind})")
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel("token budget")
        ax.set_ylabel(metric)
        ax.set_title(f"{task}: {metric}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out_path = out_dir / f"{task}_{metric}.svg"
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(out_path)
    return written


def emit_report(rows: list[ScoreRow], out_dir: str | Path, run_id: str = "",
                plots: bool = True, log_x: bool = False) -> dict[str, object]:
    """Deterministic CSV + markdown (+ SVG plots) for a scored run set."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_scores_csv(rows, out_dir / "scores.csv", run_id)
    write_markdown_tables(rows, out_dir / "tables.md")
    plot_paths: list[Path] = []
    if plots and rows:
        curves = build_curves(rows, strict=False)
        plot_paths = write_plots(curves, out_dir, log_x=log_x)
    return {"csv": out_dir / "scores.csv", "tables": out_dir / "tables.md",
            "plots": plot_paths}
