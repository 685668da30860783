"""Dice evaluation on held-out target-domain data and method comparison tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data.dataset import PairedSample
from .errors import ValidationError
from .losses import dice_score, num_label_classes

DA_METHODS = ("sp_cyclegan", "default_cyclegan", "no_da")
SE_LABEL = "standard error of the per-image mean"


@dataclass
class ClassScore:
    mean: float
    se: float
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n": self.n}


@dataclass
class MetricsRecord:
    per_class_dsc: dict[int, ClassScore]
    overall_mean_dsc: float
    overall_se: float
    da_method: str
    direction: str
    class_names: dict[int, str] = field(default_factory=dict)
    per_image: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.da_method not in DA_METHODS:
            raise ValidationError(f"da_method must be one of {DA_METHODS}")

    def name_of(self, class_id: int) -> str:
        return self.class_names.get(class_id, "background" if class_id == 0 else f"class_{class_id}")

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "da_method": self.da_method,
            "overall_mean_dsc": self.overall_mean_dsc,
            "overall_se": self.overall_se,
            "error_kind": SE_LABEL,
            "per_class_dsc": {
                self.name_of(c): dict(s.to_dict(), class_id=c) for c, s in sorted(self.per_class_dsc.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        per_class, names = {}, {}
        for name, s in d["per_class_dsc"].items():
            per_class[s["class_id"]] = ClassScore(s["mean"], s["se"], s["n"])
            names[s["class_id"]] = name
        return cls(per_class, d["overall_mean_dsc"], d["overall_se"], d["da_method"], d["direction"], names)


def mean_and_se(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation / sqrt(n); se is 0 for n == 1."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("no values to summarise")
    mean = float(np.mean(v))
    if v.size < 2 or np.all(v == v[0]):
        return mean, 0.0
    return mean, float(np.std(v, ddof=1) / math.sqrt(v.size))


def hard_labels(probs: torch.Tensor) -> torch.Tensor:
    """0.5 threshold for a single channel, per-pixel argmax otherwise."""
    if probs.shape[1] == 1:
        return (probs[:, 0] >= 0.5).long()
    return probs.argmax(dim=1)


def evaluated_classes(channels: int) -> list[int]:
    """Foreground class only for binary maps, every class (incl. background) otherwise."""
    return [1] if channels == 1 else list(range(channels))


@torch.no_grad()
def evaluate(
    segmenter: nn.Module,
    test_set: Sequence[PairedSample],
    *,
    da_method: str = "sp_cyclegan",
    direction: str = "",
    num_classes: Optional[int] = None,
    class_names: Optional[Mapping[int, str]] = None,
    batch_size: int = 8,
    device=None,
) -> MetricsRecord:
    """Per-image Dice for each evaluated class, then mean and standard error over images."""
    if not test_set:
        raise ValidationError("test set is empty")
    if any(s.label is None for s in test_set):
        raise ValidationError("every test sample must be labelled")
    dev = torch.device(device or "cpu")
    was_training = segmenter.training
    segmenter.eval()
    rows = []
    channels = None
    try:
        for start in range(0, len(test_set), batch_size):
            chunk = test_set[start:start + batch_size]
            x = torch.from_numpy(np.stack([s.image for s in chunk])).to(dev)
            probs = segmenter(x)
            if channels is None:
                channels = probs.shape[1]
                if num_classes is not None and channels != num_classes:
                    raise ValidationError(
                        f"segmenter predicts {channels} channels, expected {num_classes}"
                    )
                classes = evaluated_classes(channels)
                n_labels = num_label_classes(channels)
            pred = hard_labels(probs).cpu()
            for s, p in zip(chunk, pred):
                target = torch.from_numpy(s.label)
                if int(target.max()) >= n_labels:
                    raise ValidationError(
                        f"{s.name}: label value {int(target.max())} exceeds the segmenter's {n_labels} classes"
                    )
                scores = {c: dice_score(p, target, c) for c in classes}
                rows.append({"name": s.name, **{c: scores[c] for c in classes},
                             "overall": float(np.mean(list(scores.values())))})
    finally:
        segmenter.train(was_training)

    per_class = {}
    for c in classes:
        mean, se = mean_and_se([r[c] for r in rows])
        per_class[c] = ClassScore(mean, se, len(rows))
    overall_mean = float(np.mean([per_class[c].mean for c in classes]))
    _, overall_se = mean_and_se([r["overall"] for r in rows])
    return MetricsRecord(per_class, overall_mean, overall_se, da_method, direction,
                         dict(class_names or {}), rows)


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


def fmt(mean: float, se: float) -> str:
    return f"{mean:.4f} ± {se:.4f}"


def _overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] - a[1] <= b[0] + b[1] and b[0] - b[1] <= a[0] + a[1]


@dataclass
class ComparisonReport:
    direction: str
    columns: list[str]
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"direction": self.direction, "error_kind": SE_LABEL,
                "columns": self.columns, "rows": self.rows}

    def to_text(self) -> str:
        header = ["DA Method"] + [f"{c} DSC" for c in self.columns] + ["Notes"]
        body = []
        for row in self.rows:
            cells = [row["da_method"]]
            for col in self.columns:
                cell = row["cells"][col]
                mark = "*" if cell["best"] else ("~" if cell["even_with_best"] else " ")
                cells.append(f"{mark}{fmt(cell['mean'], cell['se'])}")
            cells.append("; ".join(row["notes"]))
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        out = [f"Direction: {self.direction}", line(header), line(["-" * w for w in widths])]
        out += [line(r) for r in body]
        out.append(f"* best in column; ~ statistically even with best (mean ± se intervals overlap); "
                   f"± = {SE_LABEL}")
        return "\n".join(out) + "\n"


def compare_methods(records: Sequence[MetricsRecord]) -> ComparisonReport:
    """Rank records by overall mean DSC and flag the best entry per column."""
    if not records:
        raise ValidationError("no records to compare")
    directions = {r.direction for r in records}
    if len(directions) > 1:
        raise ValidationError(f"records span several directions: {sorted(directions)}")
    class_ids = sorted(records[0].per_class_dsc)
    if any(sorted(r.per_class_dsc) != class_ids for r in records):
        raise ValidationError("records evaluate different class sets")
    sizes = {s.n for r in records for s in r.per_class_dsc.values()}
    if len(sizes) > 1:
        raise ValidationError(f"records come from test sets of different sizes: {sorted(sizes)}")

    method_rank = {m: i for i, m in enumerate(DA_METHODS)}
    ordered = sorted(records, key=lambda r: (-r.overall_mean_dsc, method_rank[r.da_method]))
    multi = len(class_ids) > 1
    if multi:
        columns = ["Mean Overall"] + [records[0].name_of(c) for c in class_ids if c != 0]
    else:
        columns = ["Mean"]

    def cell_values(r: MetricsRecord) -> dict:
        vals = {}
        if multi:
            vals["Mean Overall"] = (r.overall_mean_dsc, r.overall_se)
            for c in class_ids:
                if c != 0:
                    vals[r.name_of(c)] = (r.per_class_dsc[c].mean, r.per_class_dsc[c].se)
        else:
            vals["Mean"] = (r.overall_mean_dsc, r.overall_se)
        return vals

    values = [cell_values(r) for r in ordered]
    best = {col: max(range(len(ordered)), key=lambda i: (values[i][col][0], -i)) for col in columns}
    rows = []
    for i, r in enumerate(ordered):
        cells, notes = {}, []
        for col in columns:
            mean, se = values[i][col]
            is_best = best[col] == i
            even = not is_best and _overlap(values[i][col], values[best[col]][col])
            cells[col] = {"mean": mean, "se": se, "best": is_best, "even_with_best": even,
                          "text": fmt(mean, se)}
            if even:
                notes.append(f"statistically even with best ({col})")
        rows.append({"da_method": r.da_method, "cells": cells, "notes": notes})
    return ComparisonReport(records[0].direction, columns, rows)


def write_metrics(record: MetricsRecord, out_dir, per_image_csv: bool = False) -> Path:
    """Write ``metrics.json`` (and ``per_image_dsc.csv`` on request) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.json"
    path.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    if per_image_csv and record.per_image:
        classes = sorted(record.per_class_dsc)
        with (out_dir / "per_image_dsc.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name"] + [record.name_of(c) for c in classes] + ["overall"])
            for row in record.per_image:
                w.writerow([row["name"]] + [f"{row[c]:.6f}" for c in classes] + [f"{row['overall']:.6f}"])
    return path


def write_comparison(report: ComparisonReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    j = out_dir / "comparison.json"
    t = out_dir / "comparison.txt"
    j.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    t.write_text(report.to_text())
    return j, t
