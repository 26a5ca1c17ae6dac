"""Plain-text rendering of robustness reports, transfer matrices and logit statistics."""

from __future__ import annotations

import csv
import io
from decimal import ROUND_HALF_UP, Decimal

from .evaluation import LogitStats, RobustnessReport, TransferMatrix

FORMATS = ("markdown", "csv")


def format_percent(value, total: int | None = None) -> str:
    """Percentage with one decimal, rounded half-up.

    ``value`` is either a fraction (``0.4567 -> "45.7%"``) or, with ``total``,
    a raw count, which avoids any binary rounding on the way.
    """
    if total is not None:
        pct = Decimal(int(value)) * 100 / Decimal(int(total))
    else:
        pct = Decimal(repr(float(value))) * 100
    return f"{pct.quantize(Decimal('0.1'), rounding=ROUND_HALF_UP)}%"


def _whitebox_rows(reports: list[RobustnessReport]) -> tuple[list[str], list[list[str]]]:
    columns: list[str] = []
    for r in reports:
        columns.extend(c for c in r.adversaries if c not in columns)
    rows = []
    for r in reports:
        cells = [format_percent(r.correct[c], r.num_examples) if c in r.correct else "-" for c in columns]
        rows.append([r.method, *cells])
    return ["Method", *columns], rows


def _transfer_rows(m: TransferMatrix) -> tuple[list[str], list[list[str]]]:
    header = ["Target \\ Source", *m.sources]
    rows = [[t, *(format_percent(c, m.num_examples) for c in m.correct[i])] for i, t in enumerate(m.targets)]
    return header, rows


def _logit_rows(stats: dict[str, LogitStats]) -> tuple[list[str], list[list[str]]]:
    header = ["Method", "Mean", "Variance", "Min", "Max"]
    rows = [[k, f"{s.mean:.3f}", f"{s.variance:.3f}", f"{s.min:.3f}", f"{s.max:.3f}"] for k, s in stats.items()]
    return header, rows


def _markdown(title: str, header: list[str], rows: list[list[str]]) -> str:
    out = [f"### {title}", "", "| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(out) + "\n"


def _csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_report(reports, format: str = "markdown", logit_stats: dict[str, LogitStats] | None = None) -> str:
    """Tables for a mix of :class:`RobustnessReport` and :class:`TransferMatrix` objects.

    White-box reports share one table (a row per method, a column per
    adversary). Each transfer matrix gets its own table with targets as rows
    and sources as columns. CSV output separates tables with a blank line.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; choose from {FORMATS}")
    reports = list(reports)
    if not reports and not logit_stats:
        raise ValueError("nothing to render")
    classes = {r.num_classes for r in reports}
    if len(classes) > 1:
        raise ValueError(f"reports mix class counts {sorted(classes)}")

    tables = []
    white = [r for r in reports if isinstance(r, RobustnessReport)]
    if white:
        eps = {None if r.threat is None else r.threat.get("epsilon") for r in white} - {None}
        title = "White-box accuracy" + (f" (epsilon {', '.join(f'{e:g}' for e in sorted(eps))})" if eps else "")
        tables.append((title, *_whitebox_rows(white)))
    for m in reports:
        if isinstance(m, TransferMatrix):
            tables.append((f"Black-box accuracy under {m.attack} (rows: target, columns: source)", *_transfer_rows(m)))
        elif not isinstance(m, RobustnessReport):
            raise TypeError(f"cannot render {type(m).__name__}")
    if logit_stats:
        tables.append(("Clean-data logit statistics", *_logit_rows(logit_stats)))

    if format == "markdown":
        return "\n".join(_markdown(*t) for t in tables)
    return "\n".join(_csv(h, rows) for _, h, rows in tables)
