"""Turn a metrics file into headered, tab-separated columns for plotting.

Pure functions of the file content; nothing here looks at live state.
"""
from __future__ import annotations

from typing import Callable, Sequence

FIGURES = ("overlap-gain", "drift", "overlap-timeseries", "kl-timeseries", "rhythm-sweep")


class UnknownFigureError(ValueError):
    pass


def _table(header: Sequence[str], rows: list[dict]) -> list[list]:
    return [[row.get(h, "") for h in header] for row in rows]


def _overlap_gain(rows):
    header = ["variant", "temperature", "overlap", "pre", "post", "gain", "gain_se"]
    return header, _table(header, [r for r in rows if r["phase"] == "pilot" and "variant" in r])


def _drift(rows):
    header = ["branch", "step", "series", "value"]
    out = []
    for r in rows:
        if r["phase"] != "drift":
            continue
        out.append([r["branch"], r["step"], "overlap", r["mean_overlap"]])
        out.append([r["branch"], r["step"], "sym_kl", r["sym_kl"]])
    return header, out


def _behavior(field: str):
    def build(rows):
        header = ["step", "cycle", "phase", "branch_pair", "k", field]
        return header, _table(header, [r for r in rows if "branch_pair" in r])
    return build


def _sweep(rows):
    header = ["ratio", "s_rl", "s_opd", "merged_mean_acc", "branch_mean_acc", "mean_overlap"]
    return header, _table(header, [r for r in rows if r["phase"] == "sweep"])


_BUILDERS: dict[str, Callable] = {
    "overlap-gain": _overlap_gain,
    "drift": _drift,
    "overlap-timeseries": _behavior("mean_overlap"),
    "kl-timeseries": _behavior("sym_kl"),
    "rhythm-sweep": _sweep,
}


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def plot_data(rows: list[dict], figure: str) -> str:
    try:
        build = _BUILDERS[figure]
    except KeyError:
        raise UnknownFigureError(f"unknown figure {figure!r}; valid ids: {', '.join(FIGURES)}") from None
    header, table = build(rows)
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) for v in row) for row in table]
    return "\n".join(lines) + "\n"
