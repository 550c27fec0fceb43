"""Cell statistics, summary tables, verdict text and plot-ready CSV."""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Iterable, Mapping, Sequence

from .design import SCENARIO_IDS, PersonaKind, TrialRecord
from .estimation import COEF_NAMES, PosteriorSummary, RationalityVerdict

PERSONA_ORDER = (PersonaKind.HOUSEHOLD.value, PersonaKind.CEO.value)
PERSONA_LABEL = {PersonaKind.HOUSEHOLD.value: "HH", PersonaKind.CEO.value: "CEO"}
SCENARIO_LABEL = {"S1": "S1 (++)", "S2": "S2 (--)", "S3": "S3 (+-)", "S4": "S4 (-+)"}
COEF_LABEL = {
    "beta_prior": "beta_prior",
    "beta_mic": "beta_mic",
    "beta_mac": "beta_mac",
    "beta_int": "beta_int",
}
MISSING = "--"


def fmt(value: float, decimals: int = 2) -> str:
    """Half-even rounding of the shortest decimal repr of ``value``."""
    if value is None or not math.isfinite(value):
        return "nan"
    q = Decimal(1).scaleb(-decimals)
    out = Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_EVEN)
    if out == 0:
        out = abs(out)
    return f"{out:.{decimals}f}"


@dataclass(frozen=True)
class CellStats:
    model_id: str
    persona: str
    scenario_id: str
    n: int
    mean: float
    sd: float


def descriptive_stats(records: Iterable[TrialRecord]) -> list[CellStats]:
    """Mean and sample sd of updated expectations per (model, persona, scenario)."""
    groups: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    for r in records:
        groups[(r.model_id, r.persona, r.scenario_id)].append(r.updated_expectation)
    if not groups:
        raise ValueError("descriptive_stats needs at least one record")
    out = []
    for key in sorted(groups, key=_cell_sort_key):
        values = groups[key]
        n = len(values)
        mean = math.fsum(values) / n
        sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1)) if n > 1 else 0.0
        if all(v == values[0] for v in values):
            sd = 0.0
        out.append(CellStats(*key, n=n, mean=mean, sd=sd))
    return out


def _persona_rank(p: str) -> int:
    return PERSONA_ORDER.index(p) if p in PERSONA_ORDER else len(PERSONA_ORDER)


def _cell_sort_key(key: tuple[str, str, str]):
    model, persona, scenario = key
    return (model, _persona_rank(persona), persona, scenario)


class Layout(str, enum.Enum):
    TABLE_II = "table_ii"  # scenario rows, model x persona columns, mean/(sd)
    TABLE_III = "table_iii"  # coefficient rows in persona panels, model columns, mean/[hdi]
    TABLE_IV = "table_iv"  # scenario rows, persona x condition columns, mean/(sd)
    TABLE_V = "table_v"  # coefficient rows in persona panels, condition columns, mean/[hdi]


TITLES = {
    Layout.TABLE_II: "Mean updated expectations across scenarios",
    Layout.TABLE_III: "Posterior estimates of prior weight and signal gains",
    Layout.TABLE_IV: "Information shocks by condition",
    Layout.TABLE_V: "Posterior estimates by condition",
}
NOTES = {
    Layout.TABLE_II: "Values are mean and (sample standard deviation).",
    Layout.TABLE_III: "Values are posterior means with 95% HDI in brackets.",
    Layout.TABLE_IV: "Values are mean and (sample standard deviation).",
    Layout.TABLE_V: "Values are posterior means with 95% HDI in brackets.",
}


@dataclass(frozen=True)
class RenderedTable:
    layout: Layout
    text: str
    csv: str
    missing: tuple[str, ...]


@dataclass(frozen=True)
class _Cell:
    top: str
    bottom: str
    csv_row: tuple[str, ...]


def _stats_cell(c: CellStats) -> _Cell:
    mean, sd = fmt(c.mean), fmt(c.sd)
    return _Cell(mean, f"({sd})", (mean, sd, "", "", str(c.n)))


def _coef_cell(summary: PosteriorSummary, name: str, decimals: int) -> _Cell:
    c = summary.coef(name)
    mean, lo, hi = fmt(c.mean, decimals), fmt(c.hdi_low, decimals), fmt(c.hdi_high, decimals)
    return _Cell(mean, f"[{lo}, {hi}]", (mean, "", lo, hi, ""))


CSV_HEADER = ("panel", "row", "column", "mean", "sd", "hdi_low", "hdi_high", "n")


def _grid(
    layout: Layout,
    panels: Sequence[tuple[str, Sequence[tuple[str, str]]]],
    columns: Sequence[tuple[str, str]],
    lookup,
) -> RenderedTable:
    """Lay out ``panels`` of (row_key, row_label) against (col_key, col_label)."""
    header = ["Row"] + [label for _, label in columns]
    body: list[list[str]] = []
    missing: list[str] = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for panel_key, rows in panels:
        if panel_key:
            body.append([f"[{panel_key}]"] + [""] * len(columns))
        for row_key, row_label in rows:
            top, bottom = [row_label], [""]
            for col_key, col_label in columns:
                cell = lookup(panel_key, row_key, col_key)
                if cell is None:
                    top.append(MISSING)
                    bottom.append("")
                    where = f"{panel_key}/" if panel_key else ""
                    missing.append(f"{where}{row_key} x {col_label}")
                    writer.writerow([panel_key, row_key, col_label, "", "", "", "", ""])
                else:
                    top.append(cell.top)
                    bottom.append(cell.bottom)
                    writer.writerow([panel_key, row_key, col_label, *cell.csv_row])
            body.extend([top, bottom])

    widths = [len(h) for h in header]
    for line in body:
        widths = [max(w, len(v)) for w, v in zip(widths, line)]
    rule = "-" * (sum(widths) + 3 * (len(widths) - 1))

    def line_of(cells: Sequence[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [v.rjust(w) for v, w in zip(cells[1:], widths[1:])]
        return " | ".join([first, *rest]).rstrip()

    lines = [TITLES[layout], rule, line_of(header), rule]
    lines += [line_of(row) for row in body]
    lines += [rule, NOTES[layout]]
    if not columns or not any(rows for _, rows in panels):
        lines.append("Missing: all cells (no input)")
    elif missing:
        lines.append("Missing: " + "; ".join(missing))
    return RenderedTable(layout, "\n".join(lines) + "\n", buf.getvalue(), tuple(missing))


def _scenario_rows() -> list[tuple[str, str]]:
    return [(s, SCENARIO_LABEL[s]) for s in SCENARIO_IDS]


def render_table(items, layout: Layout | str, *, decimals: int | None = None) -> RenderedTable:
    """Render cell statistics or posterior summaries in one of four layouts.

    ``items`` is a list of :class:`CellStats` for the descriptive layouts and a
    mapping ``{(persona, model_or_condition): PosteriorSummary}`` for the
    posterior layouts.  For Tables IV/V the ``model_id`` plays the role of the
    condition (e.g. ``base`` vs ``lora``).
    """
    layout = Layout(layout)
    if layout in (Layout.TABLE_II, Layout.TABLE_IV):
        return _render_stats(list(items or []), layout)
    return _render_posteriors(dict(items or {}), layout, 2 if decimals is None else decimals)


def _render_stats(stats: list[CellStats], layout: Layout) -> RenderedTable:
    models = sorted({c.model_id for c in stats})
    personas = sorted({c.persona for c in stats}, key=lambda p: (_persona_rank(p), p))
    index = {(c.model_id, c.persona, c.scenario_id): c for c in stats}
    if layout is Layout.TABLE_II:
        columns = [
            (f"{m}\t{p}", f"{m} {PERSONA_LABEL.get(p, p)}") for m in models for p in personas
        ]
    else:
        columns = [
            (f"{m}\t{p}", f"{PERSONA_LABEL.get(p, p)} {m}") for p in personas for m in models
        ]

    def lookup(_panel, scenario, col_key):
        model, persona = col_key.split("\t")
        cell = index.get((model, persona, scenario))
        return None if cell is None else _stats_cell(cell)

    rows = _scenario_rows() if stats else []
    return _grid(layout, [("", rows)], columns, lookup)


def _render_posteriors(
    summaries: Mapping[tuple[str, str], PosteriorSummary], layout: Layout, decimals: int
) -> RenderedTable:
    personas = sorted({p for p, _ in summaries}, key=lambda p: (_persona_rank(p), p))
    columns = [(m, m) for m in sorted({m for _, m in summaries})]
    rows = [(n, COEF_LABEL[n]) for n in COEF_NAMES]
    panels = [(PERSONA_LABEL.get(p, p), rows) for p in personas]
    label_to_persona = {PERSONA_LABEL.get(p, p): p for p in personas}

    def lookup(panel, coef, model):
        summary = summaries.get((label_to_persona[panel], model))
        return None if summary is None else _coef_cell(summary, coef, decimals)

    return _grid(layout, panels or [("", [])], columns, lookup)


# -- verdicts ----------------------------------------------------------------


def verdict_line(condition: str, v: RationalityVerdict, decimals: int = 3) -> str:
    s_lo, s_hi = (fmt(x, decimals) for x in v.sum_hdi)
    i_lo, i_hi = (fmt(x, decimals) for x in v.int_hdi)
    failures = []
    if not v.contains_one:
        failures.append("FAIL sum-to-one")
    if not v.contains_zero:
        failures.append("FAIL zero-interaction")
    outcome = "; ".join(failures) if failures else "RATIONAL: both conditions satisfied"
    return (
        f"{condition}: sum of weights {fmt(v.sum_mean, decimals)} [{s_lo}, {s_hi}] "
        f"{'contains' if v.contains_one else 'excludes'} 1; "
        f"interaction {fmt(v.int_mean, decimals)} [{i_lo}, {i_hi}] "
        f"{'contains' if v.contains_zero else 'excludes'} 0 -> {outcome}"
    )


def verdict_report(verdicts: Mapping[str, RationalityVerdict]) -> tuple[str, dict]:
    """Text (one line per condition) and a JSON-ready document."""
    if not verdicts:
        raise ValueError("verdict_report needs at least one verdict")
    names = sorted(verdicts)
    text = "\n".join(verdict_line(n, verdicts[n]) for n in names) + "\n"
    doc = {
        "conditions": {n: verdicts[n].as_dict() for n in names},
        "all_rational": all(verdicts[n].rational for n in names),
    }
    return text, doc


# -- plot data ---------------------------------------------------------------


def scenario_means_csv(stats: Sequence[CellStats]) -> str:
    """Long-format CSV for scenario-mean plots with +/- 1 sd error bars."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("model_id", "persona", "scenario_id", "n", "mean", "sd", "lower", "upper"))
    for c in stats:
        writer.writerow(
            (c.model_id, c.persona, c.scenario_id, c.n, repr(c.mean), repr(c.sd),
             repr(c.mean - c.sd), repr(c.mean + c.sd))
        )
    return buf.getvalue()


def forest_csv(summaries: Mapping[tuple[str, str], PosteriorSummary]) -> str:
    """Long-format CSV of posterior means and HDIs for forest plots."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("persona", "model_id", "coefficient", "mean", "sd", "hdi_low", "hdi_high"))
    for (persona, model) in sorted(summaries, key=lambda k: (_persona_rank(k[0]), k)):
        for c in summaries[(persona, model)].coefficients:
            writer.writerow(
                (persona, model, c.name, repr(c.mean), repr(c.sd), repr(c.hdi_low), repr(c.hdi_high))
            )
    return buf.getvalue()
