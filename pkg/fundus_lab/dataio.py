"""
Dataset manifests, public-dataset ingestion, image I/O and subject-grouped folds.
"""
import csv
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from PIL import Image, UnidentifiedImageError
from sklearn.model_selection import GroupShuffleSplit
from torch.utils.data import Dataset

from . import constants as C
from .errors import (DatasetFormatError, EmptyIngestError, InvalidInputError,
                     InvalidStateError, ManifestValidationError)

logger = logging.getLogger(__name__)


def normalize_gender(token):
    """Maps sex tokens such as "Female", "F" or "male" to "female"/"male"; None if unknown."""
    if token is None:
        return None
    return C.SEX_TOKENS.get(str(token).strip().lower())


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    age_years: float
    gender: str
    subject_id: str
    split: str = "unassigned"
    source: str = "manual"

    def __post_init__(self):
        if not str(self.image_path).strip():
            raise InvalidInputError("image_path is empty")
        if not isinstance(self.age_years, (int, float)) or not math.isfinite(self.age_years):
            raise InvalidInputError(f"age {self.age_years!r} is not a finite number")
        if not C.MIN_AGE <= self.age_years <= C.MAX_AGE:
            raise InvalidInputError(f"age {self.age_years} outside [{C.MIN_AGE:g}, {C.MAX_AGE:g}]")
        if self.gender not in C.GENDERS:
            raise InvalidInputError(f"gender {self.gender!r} is not male or female")
        if not str(self.subject_id).strip():
            raise InvalidInputError("subject_id is empty")
        if self.split not in C.SPLITS:
            raise InvalidInputError(f"split {self.split!r} not in {C.SPLITS}")
        object.__setattr__(self, "age_years", float(self.age_years))

    @property
    def gender_index(self):
        return C.GENDERS.index(self.gender)


@dataclass(frozen=True)
class Manifest:
    records: tuple
    provenance: str = ""

    def __post_init__(self):
        records = tuple(self.records)
        seen = set()
        for record in records:
            if record.image_path in seen:
                raise InvalidInputError(f"duplicate image_path {record.image_path}")
            seen.add(record.image_path)
        object.__setattr__(self, "records", records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    @property
    def subjects(self):
        return sorted({r.subject_id for r in self.records})

    @property
    def ages(self):
        return np.array([r.age_years for r in self.records], dtype=np.float64)

    def subset(self, indices, split=None, provenance=None):
        records = [self.records[i] for i in indices]
        if split is not None:
            records = [replace(r, split=split) for r in records]
        return Manifest(tuple(records), provenance if provenance is not None else self.provenance)

    def with_splits(self, splits):
        """Copy with ``split`` replaced per record; ``splits`` maps index -> split."""
        records = [replace(r, split=splits.get(i, r.split)) for i, r in enumerate(self.records)]
        return Manifest(tuple(records), self.provenance)


def load_manifest(path):
    """
    Loads and validates a manifest CSV.

    Relative image paths are resolved against the manifest's directory.

    Raises:
        OSError: The file cannot be read.
        DatasetFormatError: The header lacks manifest columns.
        ManifestValidationError: One or more rows break the record rules;
            every offending line is listed (the header is line 1).
    """
    base = Path(path).resolve().parent
    with open(path, "r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in C.MANIFEST_COLUMNS if c not in header]
        if missing:
            raise DatasetFormatError(f"{path}: missing manifest columns {missing}")
        records, problems, first_line = [], [], {}
        for line_no, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                age = float(row["age_years"])
            except ValueError:
                problems.append((line_no, f"age {row['age_years']!r} is not a number"))
                continue
            image_path = row["image_path"]
            if image_path and not os.path.isabs(image_path):
                image_path = str(base / image_path)
            try:
                record = SampleRecord(
                    image_path=image_path,
                    age_years=age,
                    gender=normalize_gender(row["gender"]) or row["gender"],
                    subject_id=row["subject_id"],
                    split=row["split"] or "unassigned",
                    source=row["source"] or "manual",
                )
            except InvalidInputError as e:
                problems.append((line_no, str(e)))
                continue
            if record.image_path in first_line:
                problems.append((line_no, f"duplicate image_path (first on line {first_line[record.image_path]})"))
                continue
            first_line[record.image_path] = line_no
            records.append(record)
    if problems:
        for line_no, reason in problems:
            logger.warning(f"Rejected manifest row {path}:{line_no}: {reason}")
        raise ManifestValidationError(path, problems)
    logger.info(f"Loaded manifest {path} with {len(records)} records")
    return Manifest(tuple(records), provenance=f"manifest={path}")


def write_manifest(manifest, path):
    """Writes a manifest CSV; image paths under its directory are stored relative."""
    base = Path(path).resolve().parent
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(C.MANIFEST_COLUMNS)
        for r in manifest:
            image_path = Path(r.image_path)
            if image_path.is_absolute():
                try:
                    image_path = image_path.resolve().relative_to(base)
                except ValueError:
                    pass
            writer.writerow([image_path.as_posix(), f"{r.age_years:g}", r.gender, r.subject_id, r.split, r.source])
    logger.info(f"Wrote manifest {path} ({len(manifest)} records)")


def _read_table(metadata_file):
    suffix = Path(metadata_file).suffix.lower()
    try:
        if suffix in (".xlsx", ".xls"):
            return pd.read_excel(metadata_file)
        return pd.read_csv(metadata_file)
    except (ValueError, pd.errors.ParserError) as e:
        raise DatasetFormatError(f"{metadata_file}: unreadable metadata table: {e}") from e


def _clean_token(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value).strip()


def ingest_table(metadata_file, image_dir, image_columns, age_column, sex_column,
                 subject_column, source):
    """
    Builds a manifest from a per-subject metadata table.

    One record is emitted per referenced image that exists under
    ``image_dir``; all images of a row share its subject id. Missing image
    files and rows with unusable age/sex are skipped and counted in the
    provenance note.

    Raises:
        OSError: The metadata file cannot be read.
        DatasetFormatError: Required columns are absent.
        EmptyIngestError: No image could be matched.
    """
    table = _read_table(metadata_file)
    table.columns = [str(c).strip() for c in table.columns]
    needed = list(image_columns) + [age_column, sex_column, subject_column]
    missing = [c for c in needed if c not in table.columns]
    if missing:
        raise DatasetFormatError(f"{metadata_file}: missing columns {missing}")

    image_dir = Path(image_dir)
    records, seen = [], set()
    skipped_missing = skipped_invalid = 0
    for row_no, row in enumerate(table.to_dict("records"), start=2):
        gender = normalize_gender(_clean_token(row[sex_column]))
        subject = _clean_token(row[subject_column])
        try:
            age = float(row[age_column])
        except (TypeError, ValueError):
            age = math.nan
        for column in image_columns:
            name = _clean_token(row[column])
            if not name:
                continue
            image_path = image_dir / name
            if not image_path.is_file():
                skipped_missing += 1
                logger.warning(f"{metadata_file}:{row_no}: image {image_path} not found, skipping")
                continue
            if str(image_path) in seen:
                logger.warning(f"{metadata_file}:{row_no}: duplicate image {image_path}, skipping")
                continue
            try:
                record = SampleRecord(str(image_path), age, gender, subject, "unassigned", source)
            except InvalidInputError as e:
                skipped_invalid += 1
                logger.warning(f"{metadata_file}:{row_no}: {e}, skipping")
                continue
            seen.add(str(image_path))
            records.append(record)

    if not records:
        raise EmptyIngestError(f"{metadata_file}: no images matched under {image_dir}")
    provenance = (f"source={source} metadata={metadata_file} matched={len(records)} "
                  f"skipped_missing={skipped_missing} skipped_invalid={skipped_invalid}")
    logger.info(f"Ingested {provenance}")
    return Manifest(tuple(records), provenance=provenance)


def ingest_odir(metadata_file, image_dir):
    """ODIR-5K adapter: left and right fundus images of a patient share one subject id."""
    return ingest_table(metadata_file, image_dir, source="odir", **C.ODIR_COLUMNS)


def load_image(path, target_size):
    """
    Decodes an image file into an H x W x 3 float32 array in [0, 1].

    Grayscale sources are replicated to three channels and the image is
    resized bilinearly to ``target_size`` square.

    Raises:
        OSError: The file cannot be opened.
        DatasetFormatError: The file is not a decodable image.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (target_size, target_size):
                img = img.resize((target_size, target_size), Image.BILINEAR)
            data = np.asarray(img, dtype=np.float32) / 255.0
    except UnidentifiedImageError as e:
        raise DatasetFormatError(f"{path}: not a decodable image") from e
    return data


def image_to_tensor(image):
    """H x W x C array -> C x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(image, (2, 0, 1)))).float()


def tensor_to_image(tensor):
    """C x H x W tensor -> H x W x C float64 array."""
    return tensor.detach().cpu().double().permute(1, 2, 0).numpy()


def save_png(image, path):
    """Writes an H x W x C array in [0, 1] as an 8-bit PNG."""
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


@dataclass(frozen=True)
class Fold:
    fold_id: int
    subjects: frozenset
    indices: tuple


def kfold_split(manifest, k, seed):
    """
    Partitions subjects (never single images) into ``k`` near-equal folds.

    Returns:
        list[Fold]: Folds numbered 1..k; each lists its subjects and the
        manifest indices of their images.
    """
    if k < 2:
        raise InvalidInputError(f"k must be at least 2, got {k}")
    subjects = manifest.subjects
    if len(subjects) < k:
        raise InvalidInputError(f"{len(subjects)} subjects cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    folds = []
    for fold_id, chunk in enumerate(np.array_split(order, k), start=1):
        members = frozenset(subjects[i] for i in chunk)
        indices = tuple(i for i, r in enumerate(manifest) if r.subject_id in members)
        folds.append(Fold(fold_id=fold_id, subjects=members, indices=indices))
    return folds


def write_folds(manifest, folds, path):
    fold_of = {i: f.fold_id for f in folds for i in f.indices}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "subject_id", "fold"])
        for i, r in enumerate(manifest):
            writer.writerow([r.image_path, r.subject_id, fold_of[i]])
    logger.info(f"Wrote {len(folds)} folds to {path}")


def fold_partition(manifest, folds, fold_id, val_fraction, seed):
    """
    Splits a manifest into (train, val, test) for one fold.

    The fold's own images form the test split; a subject-grouped share of
    the remaining subjects becomes the validation split.

    Raises:
        InvalidInputError: Unknown fold id.
        InvalidStateError: A test subject leaked into the training split.
    """
    by_id = {f.fold_id: f for f in folds}
    if fold_id not in by_id:
        raise InvalidInputError(f"fold {fold_id} not in 1..{len(folds)}")
    fold = by_id[fold_id]
    test_idx = list(fold.indices)
    rest_idx = [i for i in range(len(manifest)) if manifest[i].subject_id not in fold.subjects]
    groups = [manifest[i].subject_id for i in rest_idx]
    val_idx = []
    train_idx = rest_idx
    if val_fraction > 0 and len(set(groups)) >= 2:
        splitter = GroupShuffleSplit(n_splits=1, test_size=val_fraction, random_state=seed)
        tr, va = next(splitter.split(rest_idx, groups=groups))
        train_idx = [rest_idx[i] for i in tr]
        val_idx = [rest_idx[i] for i in va]
    train_subjects = {manifest[i].subject_id for i in train_idx}
    if train_subjects & fold.subjects:
        raise InvalidStateError(f"fold {fold_id}: test subjects present in the training split")
    note = f"{manifest.provenance} fold={fold_id}"
    return (manifest.subset(train_idx, "train", note),
            manifest.subset(val_idx, "val", note),
            manifest.subset(test_idx, "test", note))


class FundusDataset(Dataset):
    """Yields ``(image CHW tensor, age, gender index)`` for every manifest record."""

    def __init__(self, manifest, image_size, cache=True):
        self.manifest = manifest
        self.image_size = image_size
        self.cache = cache
        self._images = {}

    def __len__(self):
        return len(self.manifest)

    def image(self, index):
        if index in self._images:
            return self._images[index]
        tensor = image_to_tensor(load_image(self.manifest[index].image_path, self.image_size))
        if self.cache:
            self._images[index] = tensor
        return tensor

    def __getitem__(self, index):
        record = self.manifest[index]
        return (self.image(index),
                torch.tensor(record.age_years, dtype=torch.float32),
                torch.tensor(record.gender_index, dtype=torch.long))
