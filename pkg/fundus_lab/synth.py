"""
Procedural fundus-like images with known age signals, for desk-scale runs.

Each image is a dark circular field with a bright optic disc and branching
vessels. Disc brightness is an affine function of age and vessel tortuosity
grows with age, so models trained on the set have something to learn. The
disc is drawn flat (no noise) after the vessels; its geometry is written to
``truth.csv`` next to the manifest.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import constants as C
from .dataio import Manifest, SampleRecord, write_manifest
from .errors import InvalidInputError

logger = logging.getLogger(__name__)

FIELD_COLOR = (0.55, 0.22, 0.10)
VESSEL_COLOR = (0.35, 0.08, 0.05)
DISC_TINT = (1.0, 0.9, 0.6)
MALE_DISC_GAIN = 1.06


@dataclass(frozen=True)
class SynthParams:
    count: int
    seed: int = C.DEFAULT_SEED
    image_size: int = 64
    age_range: tuple = (20, 80)
    vessel_count_range: tuple = (4, 8)
    disc_brightness_slope: float = 0.004
    tortuosity_slope: float = 0.01
    disc_base_brightness: float = 0.45
    noise_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "age_range", tuple(int(a) for a in self.age_range))
        object.__setattr__(self, "vessel_count_range", tuple(int(v) for v in self.vessel_count_range))
        if self.count < 1:
            raise InvalidInputError(f"count must be at least 1, got {self.count}")
        low, high = self.age_range
        if not C.MIN_AGE <= low <= high <= C.MAX_AGE:
            raise InvalidInputError(f"age_range {self.age_range} must lie within [{C.MIN_AGE:g}, {C.MAX_AGE:g}]")
        if self.image_size < 16:
            raise InvalidInputError(f"image_size must be at least 16, got {self.image_size}")
        v_low, v_high = self.vessel_count_range
        if not 0 <= v_low <= v_high:
            raise InvalidInputError(f"bad vessel_count_range {self.vessel_count_range}")
        if self.disc_brightness(high) > 1.0 / max(DISC_TINT) or self.disc_brightness(low) < 0:
            raise InvalidInputError("disc brightness leaves [0, 1] over age_range")

    def disc_brightness(self, age):
        return self.disc_base_brightness + self.disc_brightness_slope * age


def disc_mask(size, cx, cy, r):
    """Boolean H x W mask of pixels whose centers lie within ``r`` of the disc center."""
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r ** 2


def _field(params, rng):
    s = params.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    radius = 0.46 * s
    dist = np.sqrt((xx + 0.5 - s / 2) ** 2 + (yy + 0.5 - s / 2) ** 2)
    inside = dist <= radius
    falloff = 1.0 - 0.35 * (dist / radius) ** 2
    image = np.zeros((s, s, 3))
    for ch, value in enumerate(FIELD_COLOR):
        image[..., ch] = value * falloff
    image += rng.normal(0.0, params.noise_std, size=image.shape)
    image[~inside] = 0.0
    return np.clip(image, 0.0, 1.0), inside


def _vessel(draw, rng, start, angle, length, step, wiggle, width, depth):
    x, y = start
    points = [(x, y)]
    branch_at = int(length * rng.uniform(0.3, 0.7))
    for n in range(int(length)):
        angle += rng.normal(0.0, wiggle)
        x += step * math.cos(angle)
        y += step * math.sin(angle)
        points.append((x, y))
        if depth > 0 and n == branch_at:
            side = rng.choice([-1.0, 1.0])
            _vessel(draw, rng, (x, y), angle + side * rng.uniform(0.4, 0.9),
                    length // 2, step, wiggle, max(1, width - 1), depth - 1)
    color = tuple(int(round(255 * c)) for c in VESSEL_COLOR)
    draw.line(points, fill=color, width=width)


def render_fundus(params, age, gender, rng):
    """
    Renders one image.

    Returns:
        tuple: (H x W x 3 uint8 array, (disc_cx, disc_cy, disc_r)).
    """
    s = params.image_size
    field, inside = _field(params, rng)
    canvas = Image.fromarray(np.round(field * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    cx = s * rng.uniform(0.62, 0.70)
    cy = s * rng.uniform(0.45, 0.55)
    r = 0.08 * s * (MALE_DISC_GAIN if gender == "male" else 1.0)

    wiggle = params.tortuosity_slope * age
    width = max(1, s // 128)
    low, high = params.vessel_count_range
    for _ in range(int(rng.integers(low, high + 1))):
        _vessel(draw, rng, (cx, cy), rng.uniform(0, 2 * math.pi), length=s // 3,
                step=1.5, wiggle=wiggle, width=width, depth=1)

    brightness = params.disc_brightness(age)
    disc_color = tuple(int(round(255 * brightness * t)) for t in DISC_TINT)
    draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=disc_color)

    pixels = np.array(canvas)
    pixels[~inside] = 0
    return pixels, (cx, cy, r)


def synth_generate(params, out_dir):
    """
    Writes ``params.count`` PNGs plus ``manifest.csv`` and ``truth.csv``.

    Ages are integers drawn uniformly from ``age_range``; genders alternate
    starting with female; every image is its own subject. Output is
    bit-identical for identical params.

    Raises:
        OSError: ``out_dir`` cannot be written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    low, high = params.age_range
    ages = np.random.default_rng(params.seed).integers(low, high + 1, size=params.count)

    records, truth = [], []
    for i, age in enumerate(ages):
        age = int(age)
        gender = C.GENDERS[i % 2]
        rng = np.random.default_rng([params.seed, i])
        pixels, (cx, cy, r) = render_fundus(params, age, gender, rng)
        path = out_dir / f"synth_{i:04d}.png"
        Image.fromarray(pixels).save(path, format="PNG")
        records.append(SampleRecord(str(path.resolve()), float(age), gender, f"synth-{i:04d}", "unassigned", "synth"))
        truth.append((path.name, age, cx, cy, r))

    manifest = Manifest(tuple(records), provenance=f"source=synth seed={params.seed} count={params.count}")
    write_manifest(manifest, out_dir / C.MANIFEST_FILE)
    with open(out_dir / C.TRUTH_FILE, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(C.TRUTH_COLUMNS)
        for name, age, cx, cy, r in truth:
            writer.writerow([name, age, f"{cx:.6f}", f"{cy:.6f}", f"{r:.6f}"])
    logger.info(f"Generated {params.count} synthetic images in {out_dir}")
    return manifest


def load_truth(path):
    """Reads ``truth.csv`` into a list of dicts with numeric fields."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "image_path": row["image_path"],
                "age_years": float(row["age_years"]),
                "disc_cx": float(row["disc_cx"]),
                "disc_cy": float(row["disc_cy"]),
                "disc_r": float(row["disc_r"]),
            })
    return rows
