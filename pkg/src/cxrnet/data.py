"""Chest X-ray dataset plumbing: metadata CSV ingestion, binary-label derivation,
image preprocessing to 64x64, 5-feature metadata encoding, geometric augmentation,
patient-grouped splits, and dataset statistics.
"""

from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

TARGET_SIZE = 64
NO_FINDING = "No Finding"
AGE_LIMIT = 100.0
META_FEATURES = ("gender_female", "gender_male", "age_scaled", "view_pa", "view_ap")


@dataclass(frozen=True)
class Record:
    image_index: str
    finding_labels: frozenset
    follow_up: int
    patient_id: str
    age_years: float
    gender: str  # 'M' | 'F'
    view_position: str  # 'AP' | 'PA'
    orig_width: int
    orig_height: int
    pixel_spacing_x: float
    pixel_spacing_y: float
    binary_label: int


@dataclass(frozen=True)
class ParseResult:
    records: list
    skipped: int  # unparseable rows
    outliers: int  # rows dropped by the age filter


# Canonical field -> accepted header spellings (matched case-insensitively).
# The bracketed forms are the Kaggle export's literal headers.
HEADER_ALIASES = {
    "image_index": ("Image Index", "Image_Index"),
    "finding_labels": ("Finding Labels", "Finding_Labels"),
    "follow_up": ("Follow-up #", "Follow-up", "Follow_up"),
    "patient_id": ("Patient ID", "Patient_ID"),
    "age": ("Patient Age", "Age"),
    "gender": ("Patient Gender", "Gender"),
    "view": ("View Position", "View_Position"),
    "orig_width": ("OriginalImage[Width", "OriginalImageWidth", "Width"),
    "orig_height": ("Height]", "OriginalImageHeight", "Height"),
    "pixel_spacing_x": ("OriginalImagePixelSpacing[x", "PixelSpacing_x"),
    "pixel_spacing_y": ("y]", "PixelSpacing_y"),
}
MANDATORY_FIELDS = ("image_index", "finding_labels", "follow_up", "patient_id",
                    "age", "gender", "view")

_AGE_RE = re.compile(r"^(\d+(?:\.\d+)?)\s*([YMD]?)$", re.IGNORECASE)
_AGE_UNIT_YEARS = {"": 1.0, "Y": 1.0, "M": 1.0 / 12.0, "D": 1.0 / 365.25}


def parse_age(text: str) -> float:
    """Age strings normalized to fractional years: '58', '058Y', '010M', '002D'."""
    m = _AGE_RE.match(text.strip())
    if not m:
        raise ValueError(f"unparseable age {text!r}")
    return float(m.group(1)) * _AGE_UNIT_YEARS[m.group(2).upper()]


def _resolve_headers(fieldnames, header_map):
    lowered = {h.strip().lower(): h for h in fieldnames}
    resolved = {}
    for field, aliases in HEADER_ALIASES.items():
        if header_map and field in header_map:
            aliases = (header_map[field],)
        for alias in aliases:
            if alias.strip().lower() in lowered:
                resolved[field] = lowered[alias.strip().lower()]
                break
    missing = [f for f in MANDATORY_FIELDS if f not in resolved]
    if missing:
        raise ValueError(f"metadata CSV is missing mandatory column(s): {', '.join(missing)}")
    return resolved


def parse_metadata_csv(path, header_map: dict | None = None) -> ParseResult:
    """One Record per row; '|'-separated finding labels; ages above 100 years dropped.

    Unparseable rows are skipped and counted rather than aborting the parse.
    """
    records, skipped, outliers = [], 0, 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path} has no header row")
        col = _resolve_headers(reader.fieldnames, header_map)
        for row in reader:
            try:
                rec = _parse_row(row, col)
            except (ValueError, KeyError, TypeError):
                skipped += 1
                continue
            if rec.age_years > AGE_LIMIT or rec.age_years <= 0:
                outliers += 1
                continue
            records.append(rec)
    return ParseResult(records=records, skipped=skipped, outliers=outliers)


def _parse_row(row: dict, col: dict) -> Record:
    def get(field, default=None):
        name = col.get(field)
        if name is None or row.get(name) in (None, ""):
            if default is not None:
                return default
            raise ValueError(f"missing {field}")
        return row[name].strip()

    labels = frozenset(p.strip() for p in get("finding_labels").split("|") if p.strip())
    if not labels:
        raise ValueError("empty finding labels")
    gender = get("gender").upper()
    if gender not in ("M", "F"):
        raise ValueError(f"bad gender {gender!r}")
    view = get("view").upper()
    if view not in ("AP", "PA"):
        raise ValueError(f"bad view position {view!r}")
    return Record(
        image_index=get("image_index"),
        finding_labels=labels,
        follow_up=int(get("follow_up")),
        patient_id=get("patient_id"),
        age_years=parse_age(get("age")),
        gender=gender,
        view_position=view,
        orig_width=int(float(get("orig_width", "0"))),
        orig_height=int(float(get("orig_height", "0"))),
        pixel_spacing_x=float(get("pixel_spacing_x", "0")),
        pixel_spacing_y=float(get("pixel_spacing_y", "0")),
        binary_label=0 if labels == frozenset([NO_FINDING]) else 1,
    )


# ---- image preprocessing ---------------------------------------------------------------


def preprocess_image(source, color: str, image_index: str = "?") -> np.ndarray:
    """Decode, bilinear-resize to 64x64, scale into [0,1].

    color 'gray' -> [1,64,64]; 'rgb' -> [3,64,64] (grayscale sources replicated).
    """
    if color not in ("gray", "rgb"):
        raise ValueError(f"color must be 'gray' or 'rgb', got {color!r}")
    try:
        img = Image.open(io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else source)
        img.load()
    except Exception as exc:
        raise ValueError(f"cannot decode image {image_index}: {exc}") from exc
    mode = "L" if color == "gray" else "RGB"
    resized = img.convert(mode).resize((TARGET_SIZE, TARGET_SIZE), Image.BILINEAR)
    arr = np.asarray(resized, dtype=np.float32) / 255.0
    return arr[None] if color == "gray" else arr.transpose(2, 0, 1)


def encode_metadata(gender: str, age_years: float, view: str) -> np.ndarray:
    """[gender_female, gender_male, age/100, view_pa, view_ap] as float32."""
    if gender not in ("M", "F"):
        raise ValueError(f"gender must be 'M' or 'F', got {gender!r}")
    if view not in ("AP", "PA"):
        raise ValueError(f"view must be 'AP' or 'PA', got {view!r}")
    if not 0.0 < age_years <= AGE_LIMIT:
        raise ValueError(f"age {age_years} outside (0, {AGE_LIMIT}]")
    return np.array([gender == "F", gender == "M", age_years / AGE_LIMIT,
                     view == "PA", view == "AP"], dtype=np.float32)


def encode_record(rec: Record) -> np.ndarray:
    return encode_metadata(rec.gender, rec.age_years, rec.view_position)


# ---- augmentation -------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    dx: float  # horizontal shift as a fraction of width
    dy: float
    angle_deg: float


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        dx=float(rng.uniform(-0.05, 0.05)),
        dy=float(rng.uniform(-0.05, 0.05)),
        angle_deg=float(rng.uniform(-5.0, 5.0)),
    )


def apply_augment(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Horizontal flip, then rotation about the image center plus translation,
    bilinearly resampled with zero-filled borders. Input [C,H,W], output same."""
    out = image[:, :, ::-1] if p.flip else image
    if p.dx == 0.0 and p.dy == 0.0 and p.angle_deg == 0.0:
        return np.ascontiguousarray(out)
    c, h, w = out.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty, tx = p.dy * h, p.dx * w
    ang = math.radians(p.angle_deg)
    cos_a, sin_a = math.cos(ang), math.sin(ang)
    # inverse map: output pixel -> source location in the un-transformed image
    ux, uy = xx - cx - tx, yy - cy - ty
    sx = cos_a * ux + sin_a * uy + cx
    sy = -sin_a * ux + cos_a * uy + cy
    return _bilinear_gather(out, sy, sx)


def _bilinear_gather(image: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    c, h, w = image.shape
    x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1
    wx, wy = sx - x0, sy - y0
    out = np.zeros((c, *sy.shape), dtype=image.dtype)
    for yi, xi, wgt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                        (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc, xc = np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)
        out += image[:, yc, xc] * (wgt * valid).astype(image.dtype)
    return out


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation; labels and metadata are never touched."""
    return apply_augment(image, draw_augment_params(rng))


# ---- splits ------------------------------------------------------------------------------------


def split(records, val_fraction: float, seed: int, max_tries: int = 200,
          ratio_tolerance: float = 0.05):
    """Patient-grouped train/validation partition.

    No patient id crosses the boundary; each side's disease ratio stays within
    `ratio_tolerance` of the global ratio (retried with reshuffles).
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    by_patient: dict = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    pids = sorted(by_patient)
    if len(pids) < 2:
        raise ValueError(f"need at least 2 patients to split, got {len(pids)}")
    total = len(records)
    global_ratio = sum(r.binary_label for r in records) / total
    target = val_fraction * total
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        order = rng.permutation(len(pids))
        val_ids, count = set(), 0
        for i in order:
            if count >= target:
                break
            val_ids.add(pids[i])
            count += len(by_patient[pids[i]])
        train = [r for r in records if r.patient_id not in val_ids]
        val = [r for r in records if r.patient_id in val_ids]
        if not train or not val:
            continue
        ratios = (sum(r.binary_label for r in train) / len(train),
                  sum(r.binary_label for r in val) / len(val))
        if all(abs(x - global_ratio) <= ratio_tolerance for x in ratios):
            return train, val
    raise ValueError(
        f"no patient-grouped split within {ratio_tolerance:.0%} of the global "
        f"class ratio found in {max_tries} tries; too few patients per class")


def write_manifest(records, path) -> None:
    Path(path).write_text("".join(r.image_index + "\n" for r in records), encoding="utf-8")


def read_manifest(path) -> list:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]


# ---- statistics -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    n_images: int
    n_patients: int
    label_counts: dict  # per image; an image with k labels adds 1 to each of the k
    binary_counts: dict  # {0: healthy images, 1: disease images}
    gender_images: dict
    gender_patients: dict  # unique patients (first-seen gender)
    view_images: dict
    view_patients: dict  # patients with >=1 image in the view (can sum above n_patients)


def class_stats(records) -> ClassStats:
    labels, binary = Counter(), Counter({0: 0, 1: 0})
    g_img, v_img = Counter(), Counter()
    patient_gender: dict = {}
    view_patients = {"AP": set(), "PA": set()}
    for r in records:
        labels.update(r.finding_labels)
        binary[r.binary_label] += 1
        g_img[r.gender] += 1
        v_img[r.view_position] += 1
        patient_gender.setdefault(r.patient_id, r.gender)
        view_patients[r.view_position].add(r.patient_id)
    return ClassStats(
        n_images=len(records),
        n_patients=len(patient_gender),
        label_counts=dict(labels),
        binary_counts=dict(binary),
        gender_images=dict(g_img),
        gender_patients=dict(Counter(patient_gender.values())),
        view_images=dict(v_img),
        view_patients={k: len(v) for k, v in view_patients.items()},
    )


def stats_to_csv(stats: ClassStats) -> str:
    """Tallies as a section,key,count table (labels ordered by count, then name)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("section", "key", "count"))
    w.writerow(("total", "images", stats.n_images))
    w.writerow(("total", "patients", stats.n_patients))
    for name, count in sorted(stats.label_counts.items(), key=lambda kv: (-kv[1], kv[0])):
        w.writerow(("label", name, count))
    for section, table in (("binary", stats.binary_counts),
                           ("gender_images", stats.gender_images),
                           ("gender_patients", stats.gender_patients),
                           ("view_images", stats.view_images),
                           ("view_patients", stats.view_patients)):
        for key in sorted(table, key=str):
            w.writerow((section, key, table[key]))
    return buf.getvalue()


# ---- lazy image access -----------------------------------------------------------------------


class ImageStore:
    """Loads and preprocesses images by index on demand with a small LRU cache,
    so the full dataset never needs to reside in memory."""

    def __init__(self, image_dir, color: str, cache_size: int = 256):
        self.image_dir = Path(image_dir)
        self.color = color
        self.cache_size = cache_size
        self._cache: OrderedDict = OrderedDict()

    def get(self, image_index: str) -> np.ndarray:
        hit = self._cache.get(image_index)
        if hit is not None:
            self._cache.move_to_end(image_index)
            return hit
        path = self.image_dir / image_index
        if not path.is_file():
            raise FileNotFoundError(f"image file for {image_index} not found under {self.image_dir}")
        arr = preprocess_image(path, self.color, image_index)
        arr.setflags(write=False)
        self._cache[image_index] = arr
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return arr


def batch_arrays(records, store: ImageStore, augment_rng: np.random.Generator | None = None):
    """Stack records into (images [N,C,64,64], metadata [N,5], labels [N]) float32
    arrays; augmentation applies only when a generator is supplied."""
    imgs = []
    for r in records:
        arr = store.get(r.image_index)
        imgs.append(augment(arr, augment_rng) if augment_rng is not None else arr)
    x = np.stack(imgs).astype(np.float32)
    meta = np.stack([encode_record(r) for r in records])
    y = np.array([r.binary_label for r in records], dtype=np.float32)
    return x, meta, y
