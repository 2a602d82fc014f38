"""Tight bounding boxes and multiple-instance bags built from them.

Coordinates follow image convention: ``x`` is the column, ``y`` is the row,
and box corners are inclusive.  Bag pixels are ``(row, col)`` pairs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"

# absorbs float error in tan(theta) * k before rounding to a pixel
_ROUND_SLACK = 1e-9


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoxLabel:
    x0: int
    y0: int
    x1: int
    y1: int
    category: int = 1

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1", "category"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise BoxError(f"box field {name} must be an integer, got {value!r}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise BoxError(f"degenerate box: ({self.x0},{self.y0})-({self.x1},{self.y1})")
        if self.category < 1:
            raise BoxError(f"category must be >= 1, got {self.category}")

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    def contains(self, row: int, col: int) -> bool:
        return self.y0 <= row <= self.y1 and self.x0 <= col <= self.x1

    def check_inside(self, image_shape: tuple[int, int]) -> None:
        h, w = image_shape
        if self.x0 < 0 or self.y0 < 0 or self.x1 >= w or self.y1 >= h:
            raise BoxError(f"box {self} lies outside a {h}x{w} image")

    def to_json(self) -> dict:
        return {"x0": int(self.x0), "y0": int(self.y0), "x1": int(self.x1),
                "y1": int(self.y1), "category": int(self.category)}

    @classmethod
    def from_json(cls, obj: dict) -> BoxLabel:
        try:
            return cls(**{k: obj[k] for k in ("x0", "y0", "x1", "y1", "category")})
        except KeyError as exc:
            raise BoxError(f"box record missing field {exc.args[0]!r}") from None
        except TypeError as exc:
            raise BoxError(str(exc)) from None


@dataclass(frozen=True)
class Bag:
    """Ordered pixel list with polarity, category and a provenance descriptor.

    ``provenance`` is a dict, e.g. ``{"theta": 20.0, "family": "A", "offset": 3}``
    for an angled line or ``{"pixel": (r, c)}`` for a singleton negative.
    """

    pixels: tuple[tuple[int, int], ...]
    polarity: str
    category: int
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.pixels:
            raise BoxError("a bag cannot be empty")
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise BoxError(f"unknown polarity {self.polarity!r}")

    def __len__(self):
        return len(self.pixels)

    @property
    def pixel_set(self) -> frozenset:
        return frozenset(self.pixels)


@dataclass(frozen=True)
class AngleSet:
    """Evenly spaced angles ``theta1, theta1 + step, ..., theta2`` in degrees."""

    theta1: float
    theta2: float
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise BoxError(f"angle step must be positive, got {self.step}")
        if self.theta2 < self.theta1:
            raise BoxError(f"empty angle interval ({self.theta1}, {self.theta2})")
        for t in (self.theta1, self.theta2):
            if not -90.0 < t < 90.0:
                raise BoxError(f"angles must lie in (-90, 90), got {t}")

    def values(self) -> list[float]:
        n = int(math.floor((self.theta2 - self.theta1) / self.step + 1e-9))
        return [round(self.theta1 + i * self.step, 10) for i in range(n + 1)]

    @classmethod
    def parse(cls, text: str) -> AngleSet:
        """Parse ``theta1:theta2:step``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise BoxError(f"angle set must look like theta1:theta2:step, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError:
            raise BoxError(f"angle set must look like theta1:theta2:step, got {text!r}") from None

    @classmethod
    def single(cls, theta: float) -> AngleSet:
        return cls(theta, theta, 1.0)

    def __str__(self):
        return f"{self.theta1:g}:{self.theta2:g}:{self.step:g}"


def canonical(pixels) -> tuple[tuple[int, int], ...]:
    """Distinct pixels sorted by (row, col)."""
    return tuple(sorted({(int(r), int(c)) for r, c in pixels}))


def _round(v: float) -> int:
    return int(math.floor(v + 0.5 + _ROUND_SLACK))


def baseline_positive_bags(box: BoxLabel) -> list[Bag]:
    """One bag per box row plus one per box column (``H + W`` bags)."""
    bags = []
    for r in range(box.y0, box.y1 + 1):
        px = tuple((r, c) for c in range(box.x0, box.x1 + 1))
        bags.append(Bag(px, POSITIVE, box.category, {"theta": 0.0, "family": "B", "offset": r}))
    for c in range(box.x0, box.x1 + 1):
        px = tuple((r, c) for r in range(box.y0, box.y1 + 1))
        bags.append(Bag(px, POSITIVE, box.category, {"theta": 0.0, "family": "A", "offset": c}))
    return bags


def _category_boxes(boxes, category):
    return [b for b in boxes if b.category == category]


def category_box_mask(boxes, category: int, image_shape: tuple[int, int]) -> np.ndarray:
    """Boolean map of pixels covered by at least one box of ``category``."""
    mask = np.zeros(image_shape, dtype=bool)
    for b in _category_boxes(boxes, category):
        b.check_inside(image_shape)
        mask[b.y0 : b.y1 + 1, b.x0 : b.x1 + 1] = True
    return mask


def baseline_negative_bags(boxes, category: int, image_shape: tuple[int, int]) -> list[Bag]:
    """Full image rows and columns that touch no box of ``category``."""
    h, w = image_shape
    covered = category_box_mask(boxes, category, image_shape)
    bags = []
    for r in np.flatnonzero(~covered.any(axis=1)):
        px = tuple((int(r), c) for c in range(w))
        bags.append(Bag(px, NEGATIVE, category, {"family": "row", "offset": int(r)}))
    for c in np.flatnonzero(~covered.any(axis=0)):
        px = tuple((r, int(c)) for r in range(h))
        bags.append(Bag(px, NEGATIVE, category, {"family": "col", "offset": int(c)}))
    return bags


def _line_offsets(lo: int, hi: int, drift: float) -> list[int]:
    # integer start offsets whose end offset (start + drift) stays in [lo, hi]
    tol = 1e-9
    return [s for s in range(lo, hi + 1) if lo - tol <= s + drift <= hi + tol]


def angled_lines(box: BoxLabel, theta: float) -> list[Bag]:
    """Rasterized parallel crossing lines of ``box`` at ``theta`` degrees.

    Family ``A`` runs from the top edge to the bottom edge and holds one pixel
    per box row; family ``B`` runs from the left edge to the right edge and
    holds one pixel per box column.  Lines whose far endpoint would leave the
    box are dropped, and identical pixel sets inside a family are kept once.
    """
    slope = math.tan(math.radians(theta))
    bags: list[Bag] = []

    def emit(family, offsets, length, make_pixel):
        seen = set()
        for s in offsets:
            px = canonical(make_pixel(s, k) for k in range(length))
            if px in seen:
                continue
            seen.add(px)
            bags.append(Bag(px, POSITIVE, box.category,
                            {"theta": float(theta), "family": family, "offset": s}))

    h, w = box.height, box.width
    emit(
        "A",
        _line_offsets(box.x0, box.x1, slope * (h - 1)),
        h,
        lambda s, k: (box.y0 + k, min(max(_round(s + slope * k), box.x0), box.x1)),
    )
    emit(
        "B",
        _line_offsets(box.y0, box.y1, slope * (w - 1)),
        w,
        lambda s, k: (min(max(_round(s + slope * k), box.y0), box.y1), box.x0 + k),
    )
    return bags


def generalized_positive_bags(box: BoxLabel, angles: AngleSet | list[float]) -> list[Bag]:
    values = angles.values() if isinstance(angles, AngleSet) else list(angles)
    bags = []
    for theta in values:
        if not -90.0 < theta < 90.0:
            raise BoxError(f"angle {theta} outside (-90, 90)")
        bags.extend(angled_lines(box, theta))
    return bags


def generalized_negative_bags(boxes, category: int, image_shape: tuple[int, int]) -> list[Bag]:
    """One singleton bag for every pixel outside all boxes of ``category``."""
    covered = category_box_mask(boxes, category, image_shape)
    rows, cols = np.nonzero(~covered)
    return [
        Bag(((int(r), int(c)),), NEGATIVE, category, {"pixel": (int(r), int(c))})
        for r, c in zip(rows, cols)
    ]


@dataclass
class BagSet:
    """Bags of one polarity packed for vectorized reduction.

    ``index`` is ``[n_bags, max_len]`` of flat pixel indices; padding repeats a
    bag's first pixel and ``mask`` marks the real entries.
    """

    index: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return self.index.shape[0]

    @classmethod
    def empty(cls) -> BagSet:
        return cls(np.zeros((0, 1), np.intp), np.zeros((0, 1), bool), np.zeros(0, np.intp))

    @classmethod
    def pack(cls, bags: list[Bag], image_shape: tuple[int, int]) -> BagSet:
        if not bags:
            return cls.empty()
        h, w = image_shape
        width = max(len(b) for b in bags)
        index = np.empty((len(bags), width), dtype=np.intp)
        mask = np.zeros((len(bags), width), dtype=bool)
        lengths = np.empty(len(bags), dtype=np.intp)
        for i, bag in enumerate(bags):
            flat = [r * w + c for r, c in bag.pixels]
            if min(flat) < 0 or max(flat) >= h * w:
                raise BoxError(f"bag pixel outside a {h}x{w} image")
            n = len(flat)
            index[i, :n] = flat
            index[i, n:] = flat[0]
            mask[i, :n] = True
            lengths[i] = n
        return cls(index, mask, lengths)


def category_bags(
    boxes, category: int, image_shape: tuple[int, int], mode: str = "generalized",
    angles: AngleSet | list[float] | None = None,
) -> tuple[list[Bag], list[Bag]]:
    """Positive and negative bags of one category under ``mode``."""
    own = _category_boxes(boxes, category)
    for b in own:
        b.check_inside(image_shape)
    if mode == "baseline":
        pos = [bag for b in own for bag in baseline_positive_bags(b)]
        neg = baseline_negative_bags(boxes, category, image_shape)
    elif mode == "generalized":
        if angles is None:
            angles = [0.0]
        pos = [bag for b in own for bag in generalized_positive_bags(b, angles)]
        neg = generalized_negative_bags(boxes, category, image_shape)
    else:
        raise ValueError(f"unknown bag mode {mode!r}")
    return pos, neg


def read_boxes(path) -> list[BoxLabel]:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise BoxError(f"{path}: byte {exc.pos}: invalid JSON ({exc.msg})") from None
    if not isinstance(records, list):
        raise BoxError(f"{path}: expected a JSON array of boxes")
    out = []
    for i, rec in enumerate(records):
        try:
            out.append(BoxLabel.from_json(rec))
        except BoxError as exc:
            raise BoxError(f"{path}: box {i}: {exc}") from None
    return out


def write_boxes(path, boxes) -> None:
    Path(path).write_text(json.dumps([b.to_json() for b in boxes], indent=1) + "\n")
