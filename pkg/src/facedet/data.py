"""Annotation ingestion (WIDER boxes, FDDB ellipses), difficulty filtering,
fold splitting, the synthetic desk-scale dataset, and PGM image I/O."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .geometry import BBox, EllipseRegion, Region
from .tensor import Tensor


class Blur(str, Enum):
    NONE = "none"
    NORMAL = "normal"
    HEAVY = "heavy"


class Expression(str, Enum):
    TYPICAL = "typical"
    EXTREME = "extreme"


class Illumination(str, Enum):
    NORMAL = "normal"
    EXTREME = "extreme"


class Occlusion(str, Enum):
    NONE = "none"
    PARTIAL = "partial"
    HEAVY = "heavy"


class Pose(str, Enum):
    TYPICAL = "typical"
    ATYPICAL = "atypical"


@dataclass(frozen=True)
class FaceAttributes:
    blur: Blur = Blur.NONE
    expression: Expression = Expression.TYPICAL
    illumination: Illumination = Illumination.NORMAL
    occlusion: Occlusion = Occlusion.NONE
    pose: Pose = Pose.TYPICAL
    invalid: bool = False


@dataclass(frozen=True)
class Annotation:
    region: Region
    attributes: FaceAttributes | None = None  # absent for FDDB-style sources


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    annotations: tuple[Annotation, ...] = ()
    path: str | None = None


@dataclass(frozen=True)
class FoldSplit:
    fold: int  # 1-based
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


_DIFFICULTY_VALUES = {
    ("blur", Blur.NORMAL): 0.5,
    ("blur", Blur.HEAVY): 1.0,
    ("expression", Expression.EXTREME): 1.0,
    ("illumination", Illumination.EXTREME): 1.0,
    ("occlusion", Occlusion.PARTIAL): 0.5,
    ("occlusion", Occlusion.HEAVY): 1.0,
    ("pose", Pose.ATYPICAL): 1.0,
}


def difficulty(attrs: FaceAttributes) -> float:
    """Additive hardness value: every face starts at 0 and each adverse
    attribute adds its fixed half-integer contribution."""
    total = 0.0
    for (fieldname, value), points in _DIFFICULTY_VALUES.items():
        if getattr(attrs, fieldname) == value:
            total += points
    return total


def filter_records(records: list[ImageRecord],
                   max_difficulty: float = 2.0,
                   max_annotations: int = 1000) -> list[ImageRecord]:
    """Drop annotations harder than max_difficulty (strictly greater), then
    images left with more than max_annotations or none at all."""
    out: list[ImageRecord] = []
    for rec in records:
        kept = tuple(
            a for a in rec.annotations
            if a.attributes is None or difficulty(a.attributes) <= max_difficulty
        )
        if not kept or len(kept) > max_annotations:
            continue
        out.append(replace(rec, annotations=kept))
    return out


# -- WIDER-style annotation text -------------------------------------------

_BLUR_CODES = {0: Blur.NONE, 1: Blur.NORMAL, 2: Blur.HEAVY}
_OCCLUSION_CODES = {0: Occlusion.NONE, 1: Occlusion.PARTIAL, 2: Occlusion.HEAVY}


def _cover_dims(annotations) -> tuple[float, float]:
    w = h = 0.0
    for a in annotations:
        b = a.region.bounds() if isinstance(a.region, EllipseRegion) else a.region
        w = max(w, b.x2)
        h = max(h, b.y2)
    return math.ceil(w), math.ceil(h)


def parse_wider(text: str, sizes: dict[str, tuple[float, float]] | None = None) -> list[ImageRecord]:
    """Parse WIDER-layout annotation text.

    Layout per image: path line, face-count line, then one face per line as
    "x y w h blur expression illumination invalid occlusion pose".
    Invalid-flagged faces are dropped.  The format carries no image dims;
    they come from `sizes` (keyed by path) or default to the tight
    annotation cover.
    """
    lines = text.splitlines()
    records: list[ImageRecord] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        path = lines[i].strip()
        i += 1
        if i >= len(lines):
            raise ValueError(f"line {i + 1}: missing face count for {path}")
        try:
            count = int(lines[i].strip())
        except ValueError as e:
            raise ValueError(f"line {i + 1}: bad face count {lines[i]!r}") from e
        i += 1
        annotations = []
        for k in range(count):
            if i >= len(lines) or not lines[i].strip():
                raise ValueError(f"line {i + 1}: expected face {k + 1}/{count} for {path}")
            parts = lines[i].split()
            if len(parts) != 10:
                raise ValueError(f"line {i + 1}: expected 10 fields, got {len(parts)}")
            try:
                x, y, w, h = (float(v) for v in parts[:4])
                blur, expr, illum, invalid, occl, pose = (int(v) for v in parts[4:])
                attrs = FaceAttributes(
                    blur=_BLUR_CODES[blur],
                    expression=Expression.EXTREME if expr else Expression.TYPICAL,
                    illumination=Illumination.EXTREME if illum else Illumination.NORMAL,
                    occlusion=_OCCLUSION_CODES[occl],
                    pose=Pose.ATYPICAL if pose else Pose.TYPICAL,
                    invalid=bool(invalid),
                )
            except (ValueError, KeyError) as e:
                raise ValueError(f"line {i + 1}: malformed face line {lines[i]!r}: {e}") from e
            if not attrs.invalid:
                annotations.append(Annotation(BBox.from_xywh(x, y, w, h), attrs))
            i += 1
        if sizes and path in sizes:
            width, height = sizes[path]
        else:
            width, height = _cover_dims(annotations)
        records.append(ImageRecord(path, width, height, tuple(annotations), path=path))
    return records


_ATTR_CODE = {
    "blur": {Blur.NONE: 0, Blur.NORMAL: 1, Blur.HEAVY: 2},
    "occlusion": {Occlusion.NONE: 0, Occlusion.PARTIAL: 1, Occlusion.HEAVY: 2},
}


def serialize_wider(records: list[ImageRecord]) -> str:
    lines: list[str] = []
    for rec in records:
        lines.append(rec.image_id)
        lines.append(str(len(rec.annotations)))
        for a in rec.annotations:
            b = a.region
            if not isinstance(b, BBox):
                raise ValueError("WIDER serialization needs box annotations")
            at = a.attributes or FaceAttributes()
            lines.append(
                f"{b.x1:g} {b.y1:g} {b.width:g} {b.height:g} "
                f"{_ATTR_CODE['blur'][at.blur]} {int(at.expression == Expression.EXTREME)} "
                f"{int(at.illumination == Illumination.EXTREME)} {int(at.invalid)} "
                f"{_ATTR_CODE['occlusion'][at.occlusion]} {int(at.pose == Pose.ATYPICAL)}"
            )
    return "\n".join(lines) + "\n"


# -- FDDB-style ellipse annotations ------------------------------------------

def parse_fddb(annotations_text: str, folds_text: str | None = None) -> list[ImageRecord]:
    """Parse an FDDB ellipse list: image name, face count, then per face
    "major_radius minor_radius angle center_x center_y score".

    When a folds listing (one image name per line) is given, records are
    restricted to and ordered by it.
    """
    lines = annotations_text.splitlines()
    records: list[ImageRecord] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        i += 1
        if i >= len(lines):
            raise ValueError(f"line {i + 1}: missing face count for {name}")
        try:
            count = int(lines[i].strip())
        except ValueError as e:
            raise ValueError(f"line {i + 1}: bad face count {lines[i]!r}") from e
        i += 1
        annotations = []
        for k in range(count):
            if i >= len(lines):
                raise ValueError(f"line {i + 1}: expected face {k + 1}/{count} for {name}")
            parts = lines[i].split()
            if len(parts) != 6:
                raise ValueError(f"line {i + 1}: expected 6 fields, got {len(parts)}")
            try:
                major, minor, angle, cx, cy, _score = (float(v) for v in parts)
                region = EllipseRegion(cx, cy, major, minor, angle)
            except ValueError as e:
                raise ValueError(f"line {i + 1}: malformed ellipse {lines[i]!r}: {e}") from e
            annotations.append(Annotation(region))
            i += 1
        width, height = _cover_dims(annotations)
        records.append(ImageRecord(name, width, height, tuple(annotations), path=name))
    if folds_text is not None:
        by_id = {r.image_id: r for r in records}
        wanted = [ln.strip() for ln in folds_text.splitlines() if ln.strip()]
        missing = [n for n in wanted if n not in by_id]
        if missing:
            raise ValueError(f"folds list names images absent from annotations: {missing[:5]}")
        records = [by_id[n] for n in wanted]
    return records


def serialize_fddb(records: list[ImageRecord]) -> str:
    lines: list[str] = []
    for rec in records:
        lines.append(rec.image_id)
        lines.append(str(len(rec.annotations)))
        for a in rec.annotations:
            e = a.region
            if not isinstance(e, EllipseRegion):
                raise ValueError("FDDB serialization needs ellipse annotations")
            lines.append(f"{e.major_r:g} {e.minor_r:g} {e.angle:g} {e.cx:g} {e.cy:g} 1")
    return "\n".join(lines) + "\n"


def make_folds(records: list[ImageRecord], k: int,
               rng: np.random.Generator | None = None,
               fold_lists: list[list[str]] | None = None) -> list[FoldSplit]:
    """Partition images into k near-equal test sets; fold i trains on the rest.

    An external fold listing (list of per-fold image-id lists) takes
    precedence over the random split and is reproduced verbatim.
    """
    ids = [r.image_id for r in records]
    if fold_lists is not None:
        if len(fold_lists) != k:
            raise ValueError(f"expected {k} fold lists, got {len(fold_lists)}")
        chunks = [list(c) for c in fold_lists]
        listed = [i for c in chunks for i in c]
        if sorted(listed) != sorted(ids):
            raise ValueError("external fold lists do not partition the corpus")
    else:
        if k < 2:
            raise ValueError(f"k must be >= 2: {k}")
        if k > len(records):
            raise ValueError(f"k={k} exceeds corpus size {len(records)}")
        rng = rng or np.random.default_rng(0)
        perm = [ids[i] for i in rng.permutation(len(ids))]
        chunks = [perm[i::k] for i in range(k)]
    folds = []
    for i, test in enumerate(chunks, start=1):
        test_set = set(test)
        train = tuple(x for x in ids if x not in test_set)
        folds.append(FoldSplit(i, train, tuple(test)))
    return folds


# -- synthetic desk-scale dataset ---------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 200
    image_size: int = 128
    min_faces: int = 1
    max_faces: int = 3
    min_face: int = 24
    max_face: int = 56
    max_distractors: int = 2
    distractor_prob: float = 0.6  # chance that each distractor slot is used

    def __post_init__(self):
        if self.num_images < 1 or self.image_size < 32:
            raise ValueError("bad synthetic config size")
        if not (1 <= self.min_faces <= self.max_faces):
            raise ValueError("bad faces-per-image range")
        if not (4 <= self.min_face <= self.max_face <= self.image_size):
            raise ValueError("bad face-size range")


def _place_box(rng: np.random.Generator, size: int, w: float, h: float,
               existing: list[BBox], tries: int = 40) -> BBox | None:
    for _ in range(tries):
        x = rng.uniform(1, size - w - 1)
        y = rng.uniform(1, size - h - 1)
        cand = BBox(x, y, x + w, y + h)
        ok = True
        for b in existing:
            if (min(cand.x2, b.x2) > max(cand.x1, b.x1)
                    and min(cand.y2, b.y2) > max(cand.y1, b.y1)):
                ok = False
                break
        if ok:
            return cand
    return None


def _render_face(img: np.ndarray, box: BBox, rng: np.random.Generator) -> None:
    """Bright filled ellipse with two dark eye dots inside the box."""
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy = box.center
    a, b = box.width / 2, box.height / 2
    mask = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    img[mask] = rng.uniform(0.82, 0.95)
    eye_r = max(box.width * 0.10, 1.2)
    for ex in (cx - a * 0.38, cx + a * 0.38):
        ey = cy - b * 0.30
        em = (xs - ex) ** 2 + (ys - ey) ** 2 <= eye_r ** 2
        img[em] = rng.uniform(0.05, 0.15)


def _render_distractor(img: np.ndarray, box: BBox, rng: np.random.Generator) -> None:
    """Bright filled rectangle: face-like intensity, non-face shape."""
    x1, y1 = int(box.x1), int(box.y1)
    x2, y2 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
    img[y1:y2, x1:x2] = rng.uniform(0.82, 0.95)


def gen_synthetic(cfg: SynthConfig, seed: int) -> list[tuple[ImageRecord, Tensor]]:
    """Deterministic toy corpus: elliptical "faces" and rectangular
    distractors on textured noise, with exact ground-truth boxes."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    out: list[tuple[ImageRecord, Tensor]] = []
    for n in range(cfg.num_images):
        coarse = rng.uniform(0.05, 0.35, (size // 8, size // 8))
        img = np.kron(coarse, np.ones((8, 8)))[:size, :size]
        img = img + rng.normal(0, 0.02, (size, size))
        placed: list[BBox] = []
        annotations: list[Annotation] = []
        n_faces = int(rng.integers(cfg.min_faces, cfg.max_faces + 1))
        for _ in range(n_faces):
            w = rng.uniform(cfg.min_face, cfg.max_face)
            h = w * rng.uniform(1.0, 1.3)
            h = min(h, size - 4)
            box = _place_box(rng, size, w, h, placed)
            if box is None:
                continue
            placed.append(box)
            _render_face(img, box, rng)
            annotations.append(Annotation(box, FaceAttributes()))
        for _ in range(cfg.max_distractors):
            if rng.uniform() > cfg.distractor_prob:
                continue
            w = rng.uniform(cfg.min_face, cfg.max_face)
            h = w * rng.uniform(0.8, 1.2)
            box = _place_box(rng, size, w, h, placed)
            if box is None:
                continue
            placed.append(box)
            _render_distractor(img, box, rng)
        img = np.clip(img, 0.0, 1.0)
        rec = ImageRecord(f"synth_{n:05d}", size, size, tuple(annotations))
        out.append((rec, Tensor(img[None, None, :, :])))
    return out


# -- PGM persistence -----------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) from a [0,1] float or uint8 2-D array."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a [0,1] float array."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4][: w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def save_synthetic(directory, dataset: list[tuple[ImageRecord, Tensor]]) -> None:
    """Persist a synthetic corpus: images/<id>.pgm plus ground_truth.jsonl."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "ground_truth.jsonl"), "w", encoding="utf-8") as f:
        for rec, img in dataset:
            rel = os.path.join("images", f"{rec.image_id}.pgm")
            write_pgm(os.path.join(directory, rel), img.data[0, 0])
            f.write(json.dumps({
                "image_id": rec.image_id,
                "path": rel,
                "width": rec.width,
                "height": rec.height,
                "boxes": [list(a.region.as_tuple()) for a in rec.annotations],
            }) + "\n")


def load_synthetic(directory) -> list[tuple[ImageRecord, Tensor]]:
    out: list[tuple[ImageRecord, Tensor]] = []
    gt_path = os.path.join(directory, "ground_truth.jsonl")
    with open(gt_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                annotations = tuple(
                    Annotation(BBox(*b), FaceAttributes()) for b in rec["boxes"]
                )
                record = ImageRecord(rec["image_id"], rec["width"], rec["height"],
                                     annotations, path=rec["path"])
            except (KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{gt_path}:{line_no}: bad ground-truth record: {e}") from e
            img = read_pgm(os.path.join(directory, rec["path"]))
            out.append((record, Tensor(img[None, None, :, :])))
    return out
