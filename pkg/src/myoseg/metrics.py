"""Evaluation-time Dice similarity coefficient and report aggregation.

Per-case, per-class DSC values are folded into a report holding per-class
mean and sample standard deviation plus the overall mean (mean of the
per-class means), matching the usual results-table shape for this task.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = {
    0: "background",
    1: "uterine_wall",
    2: "uterine_cavity",
    3: "myoma",
    4: "nabothian_cyst",
}
FOREGROUND_CLASSES = (1, 2, 3, 4)


@dataclass
class DiceReport:
    """Per-case DSC values plus mean +/- SD aggregates.

    ``per_case`` maps case id to {class id: DSC}; a class absent in both
    prediction and ground truth of a case is simply missing from that
    case's map.  ``errors`` collects per-case failures surfaced during
    batch evaluation without aborting it.
    """

    per_case: dict[str, dict[int, float]]
    per_class_mean: dict[int, float]
    per_class_sd: dict[int, float]
    overall_mean: float
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class_mean)


def _class_grid(x) -> np.ndarray:
    grid = getattr(x, "classes", x)
    return np.asarray(grid)


def dsc(pred, gt, class_id: int, empty_value: float | None = None) -> float | None:
    """Dice similarity 2*|P∩G| / (|P|+|G|) for one class.

    Returns ``empty_value`` (default ``None``, i.e. excluded from
    aggregation) when the class is empty in both grids, and 0.0 when it is
    empty in exactly one.
    """
    p = _class_grid(pred)
    g = _class_grid(gt)
    if p.shape != g.shape:
        raise ValueError(f"dsc: grid shapes differ: {p.shape} vs {g.shape}")
    pm = p == class_id
    gm = g == class_id
    np_, ng = int(pm.sum()), int(gm.sum())
    if np_ == 0 and ng == 0:
        return empty_value
    inter = int(np.logical_and(pm, gm).sum())
    return 2.0 * inter / (np_ + ng)


def case_dice(pred, gt, classes=FOREGROUND_CLASSES, empty_value: float | None = None) -> dict[int, float]:
    """Per-class DSC for one case; classes absent from both sides are omitted."""
    out = {}
    for c in classes:
        value = dsc(pred, gt, c, empty_value=empty_value)
        if value is not None:
            out[c] = value
    return out


def aggregate(per_case: dict[str, dict[int, float]]) -> DiceReport:
    """Fold per-case DSC maps into per-class mean/SD and the overall mean.

    Per-class statistics run over the cases where the class value is
    present.  SD uses the sample (n-1) estimator, reported as 0.0 for a
    single case.  Aggregation is a deterministic fold in case-id order.
    """
    if not per_case:
        raise ValueError("aggregate: no cases given")
    values: dict[int, list[float]] = {}
    for case_id in sorted(per_case):
        for class_id, value in sorted(per_case[case_id].items()):
            if value is None:
                continue
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"aggregate: DSC {value} for case {case_id!r} class {class_id} outside [0, 1]")
            values.setdefault(class_id, []).append(float(value))
    if not values:
        raise ValueError("aggregate: no present DSC values in any case")
    means = {c: float(np.mean(v)) for c, v in values.items()}
    sds = {c: (float(np.std(v, ddof=1)) if len(v) > 1 else 0.0) for c, v in values.items()}
    overall = float(np.mean([means[c] for c in sorted(means)]))
    per_case_clean = {cid: {c: float(v) for c, v in m.items() if v is not None} for cid, m in per_case.items()}
    return DiceReport(per_case=per_case_clean, per_class_mean=means, per_class_sd=sds, overall_mean=overall)


def format_report_markdown(report: DiceReport) -> str:
    """Results table: one `Label | Dice Score` row per class, mean ± sd to 2 decimals."""
    lines = ["| Label | Dice Score |", "|---|---|"]
    for c in report.classes:
        name = CLASS_NAMES.get(c, f"class_{c}")
        label = name.replace("_", " ").title()
        lines.append(f"| {label} | {report.per_class_mean[c]:.2f} ± {report.per_class_sd[c]:.2f} |")
    lines.append(f"| Mean | {report.overall_mean:.2f} |")
    return "\n".join(lines) + "\n"


def write_case_csv(report: DiceReport, path) -> None:
    """One row per present per-case value: case_id,class_id,class_name,dsc."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["case_id", "class_id", "class_name", "dsc"])
        for case_id in sorted(report.per_case):
            for class_id in sorted(report.per_case[case_id]):
                writer.writerow([
                    case_id,
                    class_id,
                    CLASS_NAMES.get(class_id, f"class_{class_id}"),
                    repr(report.per_case[case_id][class_id]),
                ])


def read_case_csv(path) -> dict[str, dict[int, float]]:
    """Inverse of ``write_case_csv``; returns the per-case mapping."""
    per_case: dict[str, dict[int, float]] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        required = {"case_id", "class_id", "dsc"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"results CSV {path} missing columns {sorted(required)}")
        for row in reader:
            per_case.setdefault(row["case_id"], {})[int(row["class_id"])] = float(row["dsc"])
    return per_case


def write_class_value_files(report: DiceReport, directory) -> list[str]:
    """Raw per-case values, one file per class, for box-plot style figures."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for c in report.classes:
        name = CLASS_NAMES.get(c, f"class_{c}")
        path = directory / f"dice_class_{c}_{name}.txt"
        rows = [
            repr(report.per_case[cid][c])
            for cid in sorted(report.per_case)
            if c in report.per_case[cid]
        ]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        written.append(str(path))
    return written
