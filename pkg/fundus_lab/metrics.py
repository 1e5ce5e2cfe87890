"""
Evaluation scores for age regression and gender classification.

All functions are pure and operate on immutable inputs.
"""
import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import constants as C
from .errors import DatasetFormatError, InvalidInputError, UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalBatch:
    """Actual and predicted ages (years) of n samples, paired by position."""
    actual: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        actual = np.asarray(self.actual, dtype=np.float64).reshape(-1)
        predicted = np.asarray(self.predicted, dtype=np.float64).reshape(-1)
        if actual.size == 0 or predicted.size == 0:
            raise InvalidInputError("evaluation batch is empty")
        if actual.size != predicted.size:
            raise InvalidInputError(
                f"actual and predicted lengths differ: {actual.size} != {predicted.size}")
        if not (np.all(np.isfinite(actual)) and np.all(np.isfinite(predicted))):
            raise InvalidInputError("evaluation batch contains non-finite values")
        actual.setflags(write=False)
        predicted.setflags(write=False)
        object.__setattr__(self, "actual", actual)
        object.__setattr__(self, "predicted", predicted)

    def __len__(self):
        return self.actual.size

    @property
    def distances(self):
        return np.abs(self.actual - self.predicted)

    def to_tensors(self, dtype=None):
        import torch
        dtype = dtype or torch.float64
        return torch.as_tensor(self.actual, dtype=dtype), torch.as_tensor(self.predicted, dtype=dtype)


@dataclass(frozen=True)
class RegressionReport:
    mae: float
    mse: float
    r_squared: float


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise InvalidInputError(f"{name} must be a nonnegative count, got {value}")
        if self.total < 1:
            raise InvalidInputError("confusion counts are all zero")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class GenderReport:
    sensitivity: float
    specificity: float
    ppv: float
    npv: float
    f1: float
    accuracy_percent: float


def regression_metrics(batch):
    """
    Computes MAE, MSE and R² of an age batch.

    R² uses the conventional total sum of squares about the mean of the
    actual ages. When every actual age is equal the total sum of squares is
    zero and R² is reported as NaN.

    Args:
        batch (EvalBatch): Paired actual/predicted ages.

    Returns:
        RegressionReport: Mean-reduced errors and the coefficient of determination.
    """
    residuals = batch.actual - batch.predicted
    mae = float(np.mean(np.abs(residuals)))
    mse = float(np.mean(residuals ** 2))
    rss = float(np.sum(residuals ** 2))
    tss = float(np.sum((batch.actual - batch.actual.mean()) ** 2))
    if tss == 0.0:
        logger.warning("All actual ages are equal; R² is undefined and reported as NaN.")
        r_squared = math.nan
    else:
        r_squared = 1.0 - rss / tss
    return RegressionReport(mae=mae, mse=mse, r_squared=r_squared)


def cs_score(batch, j):
    """Percentage of samples whose absolute age error is at most ``j`` years."""
    if j < 0 or int(j) != j:
        raise InvalidInputError(f"CS threshold must be a nonnegative integer, got {j}")
    hits = np.count_nonzero(batch.distances <= j)
    return 100.0 * hits / len(batch)


def mcs_score(batch, J):
    """Mean of CS_0 .. CS_J."""
    if J < 0 or int(J) != J:
        raise InvalidInputError(f"MCS level must be a nonnegative integer, got {J}")
    return float(np.mean([cs_score(batch, j) for j in range(int(J) + 1)]))


def cumulative_scores(batch, max_j=max(C.CS_THRESHOLDS)):
    """Returns ``{j: CS_j}`` for j in 0..max_j."""
    return {j: cs_score(batch, j) for j in range(int(max_j) + 1)}


def mcs_table(batch, levels=C.MCS_LEVELS):
    return {J: mcs_score(batch, J) for J in levels}


def _rate(numerator, denominator, metric):
    if denominator == 0:
        raise UndefinedMetricError(metric)
    return numerator / denominator


def classification_report(counts, f1_variant="paper"):
    """
    Derives the gender scores from confusion counts.

    The ``paper`` F1 variant is the harmonic combination of specificity and
    sensitivity; ``standard`` is the harmonic mean of PPV and sensitivity.
    Accuracy is (TP + TN) over all samples, in percent.

    Raises:
        UndefinedMetricError: A rate needed by the report has a zero denominator.
    """
    if f1_variant not in C.F1_VARIANTS:
        raise InvalidInputError(f"unknown F1 variant {f1_variant!r}")
    sensitivity = _rate(counts.tp, counts.tp + counts.fn, "sensitivity")
    specificity = _rate(counts.tn, counts.tn + counts.fp, "specificity")
    ppv = _rate(counts.tp, counts.tp + counts.fp, "ppv")
    npv = _rate(counts.tn, counts.tn + counts.fn, "npv")
    if f1_variant == "paper":
        f1 = _rate(2 * specificity * sensitivity, specificity + sensitivity, "f1")
    else:
        f1 = _rate(2 * ppv * sensitivity, ppv + sensitivity, "f1")
    accuracy_percent = 100.0 * (counts.tp + counts.tn) / counts.total
    return GenderReport(sensitivity=sensitivity, specificity=specificity, ppv=ppv,
                        npv=npv, f1=f1, accuracy_percent=accuracy_percent)


def confusion_counts(actual, predicted, positive=C.POSITIVE_GENDER):
    """Tallies TP/FP/TN/FN from two equal-length sequences of gender labels."""
    actual = list(actual)
    predicted = list(predicted)
    if not actual or len(actual) != len(predicted):
        raise InvalidInputError("gender label sequences must be nonempty and of equal length")
    tp = fp = tn = fn = 0
    for a, p in zip(actual, predicted):
        if p == positive:
            if a == positive:
                tp += 1
            else:
                fp += 1
        elif a == positive:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _read_prediction_rows(path, columns):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != columns:
            raise DatasetFormatError(f"{path}: expected header {','.join(columns)}")
        return [(line_no, row) for line_no, row in enumerate(reader, start=2)]


def load_age_predictions(path):
    """
    Reads a ``sample_id,actual_age,predicted_age`` dump.

    Returns:
        tuple: (list of sample ids, EvalBatch)
    """
    ids, actual, predicted = [], [], []
    for line_no, row in _read_prediction_rows(path, C.AGE_PREDICTION_COLUMNS):
        try:
            actual.append(float(row["actual_age"]))
            predicted.append(float(row["predicted_age"]))
        except (TypeError, ValueError) as e:
            raise DatasetFormatError(f"{path}: line {line_no}: {e}") from e
        ids.append(row["sample_id"])
    return ids, EvalBatch(np.array(actual), np.array(predicted))


def load_gender_predictions(path):
    """
    Reads a ``sample_id,actual_gender,predicted_gender`` dump.

    Returns:
        tuple: (list of sample ids, ConfusionCounts)
    """
    ids, actual, predicted = [], [], []
    for line_no, row in _read_prediction_rows(path, C.GENDER_PREDICTION_COLUMNS):
        a = (row["actual_gender"] or "").strip().lower()
        p = (row["predicted_gender"] or "").strip().lower()
        if a not in C.GENDERS or p not in C.GENDERS:
            raise DatasetFormatError(f"{path}: line {line_no}: gender must be male or female")
        ids.append(row["sample_id"])
        actual.append(a)
        predicted.append(p)
    return ids, confusion_counts(actual, predicted)
