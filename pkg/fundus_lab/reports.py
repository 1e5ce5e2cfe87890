"""
Cross-validation tables and age-progression difference grids.
"""
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import constants as C
from .checkpoints import checkpoint_digest, load_checkpoint
from .dataio import image_to_tensor, load_image, save_png, tensor_to_image
from .errors import InvalidInputError
from .fgcnet import generate_progression

logger = logging.getLogger(__name__)

CV_COLUMNS = (["MAE", "MSE"] + [f"CS_{j}" for j in C.CS_THRESHOLDS]
              + [f"MCS-{J}" for J in C.MCS_LEVELS])
REGRESSION_COLUMNS = ["MAE", "MSE", "MCS-2", "MCS-3", "R2"]
GENDER_COLUMNS = ["Specificity", "Sensitivity", "PPV", "NPV", "F1", "Accuracy"]
ROW_PREFIX = "FCV"


def fold_row(report):
    """Accepts a FoldEvaluation or an already-flat dict row."""
    return dict(report.row()) if hasattr(report, "row") else dict(report)


def _fold_table(fold_reports, columns):
    rows = [fold_row(r) for r in fold_reports]
    if not rows:
        raise InvalidInputError("no fold reports given")
    for i, row in enumerate(rows, start=1):
        missing = [c for c in columns if c not in row]
        if missing:
            raise InvalidInputError(f"fold report {i} lacks columns {missing}")
    table = pd.DataFrame([[float(row[c]) for c in columns] for row in rows],
                         columns=columns, index=[f"{ROW_PREFIX}-{i}" for i in range(1, len(rows) + 1)])
    table.loc["Average"] = table.mean(axis=0)
    return table


def cv_table(fold_reports):
    """
    Age-regression CV table: one row per fold plus an arithmetic-mean Average row.

    Raises:
        InvalidInputError: No reports, or a report lacks a table column.
    """
    return _fold_table(fold_reports, CV_COLUMNS)


def regression_table(fold_reports):
    return _fold_table(fold_reports, REGRESSION_COLUMNS)


def gender_table(fold_reports):
    return _fold_table(fold_reports, GENDER_COLUMNS)


def write_table(table, csv_path, txt_path):
    """Writes a table as CSV and as fixed-width text, both at 3 decimals."""
    fmt = f"%.{C.TABLE_DECIMALS}f"
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(csv_path, float_format=fmt)
    Path(txt_path).write_text(table.to_string(float_format=lambda v: fmt % v) + "\n", encoding="utf-8")
    logger.info(f"Wrote {csv_path} and {txt_path}")


def load_fold_rows(run_dir):
    """
    Collects ``fold-<k>/eval.csv`` rows of a run, ordered by k.

    Raises:
        InvalidInputError: The run has no evaluated folds.
    """
    found = []
    for path in Path(run_dir).glob(f"fold-*/{C.EVAL_FILE}"):
        match = re.fullmatch(r"fold-(\d+)", path.parent.name)
        if match:
            found.append((int(match.group(1)), path))
    if not found:
        raise InvalidInputError(f"{run_dir}: no fold-*/{C.EVAL_FILE} found")
    return [pd.read_csv(path).iloc[0].to_dict() for _, path in sorted(found)]


def _as_array(image):
    if torch.is_tensor(image):
        return tensor_to_image(image) if image.dim() == 3 and image.shape[0] == C.IMAGE_CHANNELS \
            else image.detach().cpu().double().numpy()
    return np.asarray(image, dtype=np.float64)


def difference_map(original, generated):
    """Elementwise |original - generated|, in [0, 1]."""
    a, b = _as_array(original), _as_array(generated)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} != {b.shape}")
    return np.clip(np.abs(a - b), 0.0, 1.0)


def stretch_contrast(diff):
    """Min-max stretches one panel to [0, 1]; returns the panel and its original (min, max)."""
    lo, hi = float(diff.min()), float(diff.max())
    if hi <= lo:
        return diff.copy(), (lo, hi)
    return (diff - lo) / (hi - lo), (lo, hi)


@dataclass
class ProgressionGrid:
    source: str
    panels: list = field(default_factory=list)  # (age, generated HWC, difference HWC)
    grid: np.ndarray = None
    seed: int = 0
    checkpoint_sha256: str = ""

    def __post_init__(self):
        if not self.panels:
            raise InvalidInputError("a progression grid needs at least one age")
        shapes = {p[1].shape for p in self.panels} | {p[2].shape for p in self.panels}
        if len(shapes) != 1:
            raise InvalidInputError(f"panel shapes differ: {sorted(shapes)}")

    @property
    def ages(self):
        return [p[0] for p in self.panels]


def _age_tag(age):
    return f"{float(age):g}"


def progression_grid(checkpoint, image_path, ages, seed, out_path, stretch=False):
    """
    Renders the age-progression row for one source image.

    The grid shows the source image first, then one difference map per age
    in ascending age order. Writes the grid PNG, per-age generated and
    difference PNGs next to it, and a JSON sidecar with ages, seed and the
    checkpoint hash.

    Args:
        checkpoint (str | Path): FGC-Net checkpoint file.
        image_path (str | Path): Source fundus image.
        ages (list[float]): Target ages in years.
        seed (int): Sampling seed.
        out_path (str | Path): Grid PNG path.
        stretch (bool): Min-max stretch each difference panel.

    Returns:
        ProgressionGrid
    """
    ages = sorted(float(a) for a in ages)
    if not ages:
        raise InvalidInputError("age list is empty")
    ckpt = load_checkpoint(checkpoint, expected_kind="fgcnet")
    original = load_image(image_path, ckpt.config.input_size).astype(np.float64)
    outputs = generate_progression(ckpt.models["generator"], image_to_tensor(original), ages, seed)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    panels, ranges = [], []
    for age, output in zip(ages, outputs):
        generated = tensor_to_image(output)
        diff = difference_map(original, generated)
        if stretch:
            diff, value_range = stretch_contrast(diff)
            ranges.append(value_range)
        panels.append((age, generated, diff))
        save_png(generated, out_path.with_name(f"{out_path.stem}_age-{_age_tag(age)}.png"))
        save_png(diff, out_path.with_name(f"{out_path.stem}_diff-{_age_tag(age)}.png"))

    grid = np.concatenate([original] + [p[2] for p in panels], axis=1)
    save_png(grid, out_path)
    digest = checkpoint_digest(checkpoint)
    sidecar = {
        "source": str(image_path),
        "ages": ages,
        "seed": int(seed),
        "checkpoint": str(checkpoint),
        "checkpoint_sha256": digest,
        "stretch": bool(stretch),
        "stretch_ranges": ranges,
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info(f"Wrote progression grid {out_path} ({len(panels) + 1} panels)")
    return ProgressionGrid(source=str(image_path), panels=panels, grid=grid, seed=int(seed),
                           checkpoint_sha256=digest)
