"""Dice evaluation, method comparison tables and bag overlays."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import segmodel
from .boxbags import Bag, BoxLabel
from .ndgrad import Tensor
from .synthgen import Sample, write_pgm

DICE_NOTE = "dice: 2D per-sample (no 3D volume stacking); threshold {threshold:g}"
REPORT_COLUMNS = ("method", "mean_dice", "std_dice", "n_samples")

# overlay bit layout
NEGATIVE_BIT = 1
EDGE_BIT = 2
COVER_SHIFT = 2
COVER_MAX = 63


def dice(pred_mask, gt_mask) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: mask shapes differ, {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data >= threshold


@dataclass
class EvalReport:
    method: str
    sample_ids: list[str]
    dice: np.ndarray  # [n_samples, C]
    threshold: float = 0.5
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def per_sample(self) -> np.ndarray:
        return self.dice.mean(axis=1)

    @property
    def mean(self) -> float:
        return float(self.per_sample.mean())

    @property
    def std(self) -> float:
        # spread across samples, sample standard deviation
        if len(self.sample_ids) < 2:
            return 0.0
        return float(self.per_sample.std(ddof=1))

    def row(self) -> dict:
        return {"method": self.method, "mean_dice": self.mean, "std_dice": self.std,
                "n_samples": len(self.sample_ids)}

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        n_cat = self.dice.shape[1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id"] + [f"dice_c{c + 1}" for c in range(n_cat)] + ["dice"])
        for sid, row, m in zip(self.sample_ids, self.dice, self.per_sample):
            w.writerow([sid, *(repr(float(v)) for v in row), repr(float(m))])
        return buf.getvalue()


def fingerprint(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def predict(models: dict[str, segmodel.ModelParams], sample: Sample) -> np.ndarray:
    params = segmodel.model_for(models, sample.id)
    return segmodel.forward(params, sample.image).data


def evaluate(models, samples: list[Sample], method: str = "model", threshold: float = 0.5,
             config: dict | None = None) -> EvalReport:
    if not samples:
        raise ValueError("evaluate: no samples")
    scores = []
    for s in samples:
        pred = binarize(predict(models, s), threshold)
        if pred.shape != s.masks.shape:
            raise ValueError(f"{s.id}: prediction {pred.shape} vs masks {s.masks.shape}")
        scores.append([dice(pred[c], s.masks[c]) for c in range(s.n_categories)])
    return EvalReport(method, [s.id for s in samples], np.array(scores), threshold,
                      fingerprint(config) if config is not None else "")


def report_csv(reports: list[EvalReport], threshold: float = 0.5) -> str:
    buf = io.StringIO()
    buf.write("# " + DICE_NOTE.format(threshold=threshold) + "\n")
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        row = r.row()
        row["mean_dice"] = f"{row['mean_dice']:.6f}"
        row["std_dice"] = f"{row['std_dice']:.6f}"
        w.writerow(row)
    return buf.getvalue()


def read_report(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["mean_dice"] = float(r["mean_dice"])
        r["std_dice"] = float(r["std_dice"])
        r["n_samples"] = int(r["n_samples"])
    return rows


# ----------------------------------------------------------------- overlays


def bag_overlay(shape: tuple[int, int], boxes: list[BoxLabel], bags: list[Bag]) -> np.ndarray:
    """Bit-packed label map of boxes and bags.

    bit 0: pixel belongs to a negative bag; bit 1: pixel lies on a box edge;
    bits 2-7: number of positive bags containing the pixel, capped at 63.
    """
    h, w = shape
    neg = np.zeros(shape, dtype=bool)
    edge = np.zeros(shape, dtype=bool)
    cover = np.zeros(shape, dtype=np.int64)
    for bag in bags:
        rows = np.array([p[0] for p in bag.pixels])
        cols = np.array([p[1] for p in bag.pixels])
        keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        rows, cols = rows[keep], cols[keep]
        if bag.polarity == "negative":
            neg[rows, cols] = True
        else:
            np.add.at(cover, (rows, cols), 1)
    for b in boxes:
        y0, y1 = max(b.y0, 0), min(b.y1, h - 1)
        x0, x1 = max(b.x0, 0), min(b.x1, w - 1)
        edge[y0, x0 : x1 + 1] = True
        edge[y1, x0 : x1 + 1] = True
        edge[y0 : y1 + 1, x0] = True
        edge[y0 : y1 + 1, x1] = True
    out = neg.astype(np.int64) * NEGATIVE_BIT + edge.astype(np.int64) * EDGE_BIT
    out += np.minimum(cover, COVER_MAX) << COVER_SHIFT
    return out.astype(np.uint8)


def decode_overlay(overlay: np.ndarray) -> dict[str, np.ndarray]:
    o = np.asarray(overlay, dtype=np.int64)
    return {
        "negative": (o & NEGATIVE_BIT) > 0,
        "edge": (o & EDGE_BIT) > 0,
        "coverage": o >> COVER_SHIFT,
    }


def dump_bags(sample: Sample, bags: list[Bag], path) -> np.ndarray:
    """Write the overlay of ``bags`` on ``sample`` as a P5 PGM and return it."""
    overlay = bag_overlay(sample.shape, sample.boxes, bags)
    write_pgm(path, overlay, 255)
    return overlay


# --------------------------------------------------------------- comparison


def compare(methods, samples: list[Sample], threshold: float = 0.5, threads: int = 1,
            split: str = "val") -> list[EvalReport]:
    """Train (or load) each method and score it on ``split``.

    ``methods`` holds :class:`~boxmil.trainer.ExperimentConfig` objects to
    train, or run directories holding ``checkpoint.json`` and
    ``config_echo.json``.
    """
    from . import trainer

    targets = [s for s in samples if s.split == split] or list(samples)
    reports = []
    for item in methods:
        if isinstance(item, trainer.ExperimentConfig):
            cfg = item
            # per-image logit maps only need fitting where they are scored
            fit_on = targets if cfg.model_kind == segmodel.DIRECT_LOGIT else trainer.training_samples(samples, cfg)
            result = trainer.train(fit_on, cfg, threads=threads)
            models = result.models
        else:
            run = Path(item)
            ckpt = run / "checkpoint.json"
            if not ckpt.exists():
                raise FileNotFoundError(f"missing checkpoint {ckpt}")
            models = segmodel.load_checkpoint(ckpt)
            cfg = trainer.load_run_config(run)
        reports.append(evaluate(models, targets, cfg.name, threshold, cfg.to_json()))
    return reports
