"""Synthetic grayscale segmentation data with tight box labels.

Dataset directory layout::

    manifest.json                 spec echo + sample list
    samples/<id>/image.pgm        P5, maxval 255
    samples/<id>/mask_c<k>.pgm    P5, maxval 1, one plane per category k
    samples/<id>/boxes.json       [{"x0", "y0", "x1", "y1", "category"}, ...]

Images are quantized to multiples of 1/255 at generation time so that a
write/read round trip is exact.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .boxbags import BoxError, BoxLabel, read_boxes, write_boxes

SHAPES = ("disc", "ellipse", "rectangle", "crescent")
MANIFEST = "manifest.json"
DATASET_FORMAT = "boxmil-dataset"
_MAX_TRIES = 500


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSpec:
    n_train: int = 20
    n_val: int = 5
    height: int = 64
    width: int = 64
    shapes: list[str] = field(default_factory=lambda: ["disc", "ellipse"])
    n_objects: tuple[int, int] = (1, 1)
    n_categories: int = 1
    noise_sigma: float = 0.05
    size_range: tuple[float, float] = (7.0, 14.0)
    background: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.shapes = list(self.shapes)
        self.n_objects = tuple(int(v) for v in self.n_objects)
        self.size_range = tuple(float(v) for v in self.size_range)
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad or not self.shapes:
            raise DatasetError(f"shapes must be a non-empty subset of {SHAPES}, got {self.shapes}")
        if self.n_train < 0 or self.n_val < 0 or self.n_train + self.n_val == 0:
            raise DatasetError("need at least one sample")
        if not 1 <= self.n_objects[0] <= self.n_objects[1]:
            raise DatasetError(f"bad object count range {self.n_objects}")
        if self.n_categories < 1:
            raise DatasetError("n_categories must be >= 1")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise DatasetError(f"bad size range {self.size_range}")
        if 2 * hi + 3 > min(self.height, self.width):
            raise DatasetError(
                f"objects up to radius {hi} do not fit a {self.height}x{self.width} image")

    def to_json(self) -> dict:
        d = asdict(self)
        d["n_objects"] = list(self.n_objects)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> DatasetSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise DatasetError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [H, W] float64 in [0, 1]
    masks: np.ndarray  # [C, H, W] uint8 in {0, 1}
    boxes: list[BoxLabel]
    split: str = "train"

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @property
    def n_categories(self) -> int:
        return self.masks.shape[0]


def tight_box_from_mask(mask, category: int = 1) -> BoxLabel:
    """Smallest inclusive box around the foreground of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise DatasetError("cannot box an empty mask")
    return BoxLabel(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]), category)


# ------------------------------------------------------------------ shapes


def disc_mask(shape, center, radius) -> np.ndarray:
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def _ellipse(shape, center, a, b, angle):
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    y, x = rr - center[0], cc - center[1]
    u = x * math.cos(angle) + y * math.sin(angle)
    v = -x * math.sin(angle) + y * math.cos(angle)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _rectangle(shape, center, a, b, angle):
    rr, cc = np.mgrid[: shape[0], : shape[1]]
    y, x = rr - center[0], cc - center[1]
    u = x * math.cos(angle) + y * math.sin(angle)
    v = -x * math.sin(angle) + y * math.cos(angle)
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def _crescent(shape, center, radius, rng):
    # outer disc minus a shifted inner disc that covers the outer centre
    inner = radius * rng.uniform(0.75, 0.9)
    shift = radius * rng.uniform(0.3, 0.45)
    phi = rng.uniform(0, 2 * math.pi)
    inner_center = (center[0] + shift * math.sin(phi), center[1] + shift * math.cos(phi))
    return disc_mask(shape, center, radius) & ~disc_mask(shape, inner_center, inner)


def _draw_object(kind, shape, rng, size_range):
    h, w = shape
    lo, hi = size_range
    radius = rng.uniform(lo, hi)
    margin = math.ceil(radius) + 1
    center = (rng.uniform(margin, h - 1 - margin), rng.uniform(margin, w - 1 - margin))
    if kind == "disc":
        return disc_mask(shape, center, radius)
    if kind == "ellipse":
        b = radius * rng.uniform(0.45, 0.8)
        return _ellipse(shape, center, radius, b, rng.uniform(0, math.pi))
    if kind == "rectangle":
        a = radius / math.sqrt(2)
        b = a * rng.uniform(0.4, 0.9)
        return _rectangle(shape, center, a, b, rng.uniform(0, math.pi))
    if kind == "crescent":
        return _crescent(shape, center, radius, rng)
    raise DatasetError(f"unknown shape {kind!r}")


def _acceptable(kind, mask, occupied) -> bool:
    if mask.sum() < 4:
        return False
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        return False
    if (ndimage.binary_dilation(mask) & occupied).any():
        return False
    _, n = ndimage.label(mask)
    if n != 1:
        return False
    if kind == "crescent":
        box = tight_box_from_mask(mask)
        cr, cc = (box.y0 + box.y1) // 2, (box.x0 + box.x1) // 2
        if mask[cr, cc]:
            return False
    return True


def category_intensity(category: int, n_categories: int) -> float:
    return 0.55 + 0.35 * category / n_categories


def generate_sample(spec: DatasetSpec, rng: np.random.Generator, sample_id: str, split: str) -> Sample:
    shape = (spec.height, spec.width)
    masks = np.zeros((spec.n_categories, *shape), dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    image = np.full(shape, spec.background)
    boxes = []
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    for _ in range(n_obj):
        for _ in range(_MAX_TRIES):
            kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
            mask = _draw_object(kind, shape, rng, spec.size_range)
            if _acceptable(kind, mask, occupied):
                break
        else:
            raise DatasetError(
                f"could not place {n_obj} objects in a {shape[0]}x{shape[1]} image; "
                "reduce object count or size")
        category = int(rng.integers(1, spec.n_categories + 1))
        occupied |= mask
        masks[category - 1] |= mask.astype(np.uint8)
        image[mask] = category_intensity(category, spec.n_categories)
        boxes.append(tight_box_from_mask(mask, category))
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return Sample(sample_id, image, masks, boxes, split)


def generate(spec: DatasetSpec) -> list[Sample]:
    """Deterministic dataset: ``n_train`` training then ``n_val`` validation samples."""
    rng = np.random.default_rng(spec.seed)
    samples = []
    for split, n in (("train", spec.n_train), ("val", spec.n_val)):
        for i in range(n):
            samples.append(generate_sample(spec, rng, f"{split}_{i:04d}", split))
    return samples


# ------------------------------------------------------------------- files


def write_pgm(path, array: np.ndarray, maxval: int) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DatasetError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > maxval:
        raise DatasetError(f"PGM values must lie in [0, {maxval}]")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Parse a binary (P5) 8-bit PGM into ``(uint8 array, maxval)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from None
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DatasetError(f"{path}: byte {pos}: truncated PGM header")
        tokens.append((m.group(2), m.start(2)))
        pos = m.end()
    magic, (w_tok, w_at), (h_tok, h_at), (mv_tok, mv_at) = tokens[0][0], *tokens[1:]
    if magic != b"P5":
        raise DatasetError(f"{path}: byte 0: expected P5 magic, found {magic[:8]!r}")
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(mv_tok)
    except ValueError:
        raise DatasetError(f"{path}: byte {w_at}: non-integer PGM dimensions") from None
    if w <= 0 or h <= 0:
        raise DatasetError(f"{path}: byte {w_at}: bad PGM size {w}x{h}")
    if not 0 < maxval < 256:
        raise DatasetError(f"{path}: byte {mv_at}: only 8-bit PGM supported (maxval {maxval})")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DatasetError(f"{path}: byte {pos}: missing whitespace after PGM header")
    pos += 1
    need = w * h
    body = raw[pos : pos + need]
    if len(body) < need:
        raise DatasetError(
            f"{path}: byte {pos + len(body)}: truncated pixel data "
            f"({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
    if arr.max(initial=0) > maxval:
        bad = int(np.argmax(arr.reshape(-1) > maxval))
        raise DatasetError(f"{path}: byte {pos + bad}: value exceeds maxval {maxval}")
    return arr, maxval


def _sample_dir(root: Path, sample_id: str) -> Path:
    return root / "samples" / sample_id


def write_dataset(root, samples: list[Sample], spec: DatasetSpec | None = None) -> Path:
    root = Path(root)
    entries = []
    for s in samples:
        d = _sample_dir(root, s.id)
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(d / "image.pgm", np.round(s.image * 255.0).astype(np.uint8), 255)
        mask_files = []
        for k in range(s.n_categories):
            name = f"mask_c{k + 1}.pgm"
            write_pgm(d / name, s.masks[k], 1)
            mask_files.append(f"samples/{s.id}/{name}")
        write_boxes(d / "boxes.json", s.boxes)
        entries.append({
            "id": s.id,
            "split": s.split,
            "shape": list(s.shape),
            "image": f"samples/{s.id}/image.pgm",
            "masks": mask_files,
            "boxes": f"samples/{s.id}/boxes.json",
        })
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "spec": spec.to_json() if spec is not None else None,
        "samples": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"{path}: no dataset manifest")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: byte {exc.pos}: invalid JSON ({exc.msg})") from None
    if doc.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: not a {DATASET_FORMAT} manifest")
    return doc


def read_dataset(root, split: str | None = None) -> list[Sample]:
    root = Path(root)
    doc = read_manifest(root)
    samples = []
    for entry in doc["samples"]:
        if split is not None and entry["split"] != split:
            continue
        pixels, maxval = read_pgm(root / entry["image"])
        image = pixels.astype(np.float64) / maxval
        planes = []
        for mf in entry["masks"]:
            plane, mv = read_pgm(root / mf)
            if mv != 1:
                raise DatasetError(f"{root / mf}: mask planes must have maxval 1, got {mv}")
            if plane.shape != image.shape:
                raise DatasetError(f"{root / mf}: mask shape {plane.shape} != image {image.shape}")
            planes.append(plane)
        try:
            boxes = read_boxes(root / entry["boxes"])
        except BoxError as exc:
            raise DatasetError(str(exc)) from None
        for b in boxes:
            if b.category > len(planes):
                raise DatasetError(f"{root / entry['boxes']}: category {b.category} has no mask plane")
            try:
                b.check_inside(image.shape)
            except BoxError as exc:
                raise DatasetError(f"{root / entry['boxes']}: {exc}") from None
        samples.append(Sample(entry["id"], image, np.stack(planes), boxes, entry["split"]))
    return samples
