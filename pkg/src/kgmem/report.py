"""Summary tables and capacity/accuracy charts from a run ledger."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kgmem.experiments import LEDGER_NAME, read_ledger
from kgmem.trainer import CapacityCurve, aggregate_repeats

CELL_FIELDS = ("setup", "kind", "size", "layers", "base_params", "d_model", "activation")
SUMMARY_FIELDS = CELL_FIELDS + (
    "n_params", "repeats", "n_predictions",
    "accuracy_mean", "accuracy_2sd", "mac_mean", "mac_2sd",
)


@dataclass
class Report:
    rows: list[dict]
    files: list[Path] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)


def _cell_id(cell: dict) -> tuple:
    return tuple(cell[k] for k in CELL_FIELDS)


def _label(cell: dict) -> str:
    width = f"base {cell['base_params']} / d {cell['d_model']}" if cell["base_params"] else f"d {cell['d_model']}"
    return f"n={cell['size']}, L={cell['layers']}, {width}, {cell['activation']}"


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.6g}"


def summarize(records: list[dict], root: Path) -> tuple[list[dict], dict, list[str], list[str]]:
    """Per-cell final mean and 2*std plus the mean curve of each cell."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for rec in records:
        groups[_cell_id(rec["cell"])].append(rec)
    rows, curves, missing, failed = [], {}, [], []
    for cid in sorted(groups, key=lambda c: tuple((x is None, x) for x in c)):
        recs = sorted(groups[cid], key=lambda r: r["repeat"])
        loaded = []
        for rec in recs:
            if rec.get("status") != "ok":
                failed.append(f"{rec['key']}: {rec.get('error')}")
                continue
            path = root / rec["curve_file"]
            if not path.exists():
                missing.append(rec["curve_file"])
                continue
            loaded.append(CapacityCurve.from_csv(path.read_text(encoding="utf-8"), rec["n_predictions"]))
        if not loaded:
            continue
        cell = recs[0]["cell"]
        acc = np.array([c.final_accuracy for c in loaded], dtype=float)
        mac = np.array([c.final_mac for c in loaded], dtype=float)
        spread = len(loaded) >= 2
        rows.append({
            **{k: cell[k] for k in CELL_FIELDS},
            "n_params": recs[0].get("n_params"),
            "repeats": len(loaded),
            "n_predictions": loaded[0].n_predictions,
            "accuracy_mean": float(acc.mean()),
            "accuracy_2sd": float(2 * acc.std(ddof=1)) if spread else None,
            "mac_mean": float(mac.mean()),
            "mac_2sd": float(2 * mac.std(ddof=1)) if spread else None,
        })
        if spread and all(c.eval_epochs == loaded[0].eval_epochs for c in loaded):
            s = aggregate_repeats(loaded)
            curves[cid] = (cell, s.eval_epochs, s.accuracy_mean.tolist(), s.mac_mean.tolist())
        else:
            c = loaded[0]
            curves[cid] = (cell, c.eval_epochs, c.accuracy, [float(m) for m in c.mac])
    return rows, curves, missing, failed


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow(["" if r[k] is None else (_fmt(r[k]) if isinstance(r[k], float) else r[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def capacity_table_csv(rows: list[dict]) -> str:
    """Pivot: one line per (activation, width, layers), one column per dataset size."""
    sizes = sorted({r["size"] for r in rows})
    lines: dict[tuple, dict] = defaultdict(dict)
    for r in rows:
        width = r["base_params"] if r["base_params"] is not None else r["d_model"]
        lines[(r["activation"], width, r["layers"])][r["size"]] = r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["activation", "width", "layers"] + [f"n={s}" for s in sizes])
    for key in sorted(lines):
        cells = []
        for s in sizes:
            r = lines[key].get(s)
            if r is None:
                cells.append("")
            elif r["mac_2sd"] is None:
                cells.append(f"{r['mac_mean']:.0f}")
            else:
                cells.append(f"{r['mac_mean']:.0f} ± {r['mac_2sd']:.0f}")
        w.writerow(list(key) + cells)
    return buf.getvalue()


def build_report(ledger: str | Path, out: str | Path, zoom_epochs: int = 30) -> Report:
    """Write ``summary.csv``, ``capacity_table.csv``, ``capacity.svg`` and ``accuracy.svg``.

    Curve paths in the ledger are resolved against the ledger's directory.
    Runs whose curve file is gone are listed in ``missing`` and skipped.
    """
    from kgmem.plotting import curve_figure, save_svg

    ledger = Path(ledger)
    if ledger.is_dir():
        ledger = ledger / LEDGER_NAME
    records = read_ledger(ledger)
    if not records:
        raise ValueError(f"ledger {ledger} is empty or missing")
    rows, curves, missing, failed = summarize(records, ledger.parent)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rep = Report(rows=rows, missing=missing, failed=failed)

    (out / "summary.csv").write_text(summary_csv(rows), encoding="utf-8")
    (out / "capacity_table.csv").write_text(capacity_table_csv(rows), encoding="utf-8")
    rep.files += [out / "summary.csv", out / "capacity_table.csv"]

    series = list(curves.values())
    for metric, ylabel, idx in (("capacity", "capacity (correct predictions)", 3), ("accuracy", "accuracy", 2)):
        fig = curve_figure(
            [(_label(s[0]), s[1], s[idx]) for s in series],
            metric=metric, ylabel=ylabel, zoom_epochs=zoom_epochs,
            title=f"{metric} over training",
        )
        path = out / f"{metric}.svg"
        save_svg(fig, path)
        rep.files.append(path)
    if missing or failed:
        (out / "problems.txt").write_text(
            "".join(f"missing curve: {m}\n" for m in missing) + "".join(f"failed run: {f}\n" for f in failed),
            encoding="utf-8",
        )
        rep.files.append(out / "problems.txt")
    return rep
