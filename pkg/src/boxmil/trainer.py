"""Adam training of segmentation models under box (MIL) or mask supervision."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from . import segmodel
from .boxbags import AngleSet, BagSet, category_bags
from .milloss import LossConfig, full_supervision_loss, total_loss
from .synthgen import Sample

log = logging.getLogger(__name__)

BOX = "box"
FULL = "full"


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps_adam: float = 1e-8
    batch_size: int = 4
    iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.eps_adam > 0:
            raise ValueError("eps_adam must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run."""

    name: str = "run"
    model_kind: str = segmodel.DIRECT_LOGIT
    supervision: str = BOX
    bag_mode: str = "generalized"
    angles: str | None = "-40:40:20"
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.model_kind not in segmodel.MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {segmodel.MODEL_KINDS}")
        if self.supervision not in (BOX, FULL):
            raise ValueError(f"supervision must be {BOX!r} or {FULL!r}")
        if self.bag_mode not in ("baseline", "generalized"):
            raise ValueError("bag_mode must be 'baseline' or 'generalized'")
        if self.angles is not None:
            AngleSet.parse(self.angles)

    def angle_set(self) -> AngleSet:
        return AngleSet.parse(self.angles) if self.angles else AngleSet.single(0.0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> ExperimentConfig:
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        obj = dict(obj)
        if "loss" in obj:
            obj["loss"] = LossConfig.from_json(obj["loss"])
        if "optim" in obj:
            obj["optim"] = OptimConfig(**obj["optim"])
        return cls(**obj)

    def with_overrides(self, overrides: dict) -> ExperimentConfig:
        merged = self.to_json()
        for key, value in overrides.items():
            if key in ("loss", "optim") and isinstance(value, dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        return ExperimentConfig.from_json(merged)


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, cfg: OptimConfig):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"adam_step: {bad} non-finite gradient entries")
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------- bag cache


class BagCache:
    """Packed bags per (sample, category, bag mode, angle set), built once."""

    def __init__(self):
        self._store: dict[tuple, tuple[BagSet, BagSet]] = {}
        self.builds = 0
        self.hits = 0

    def get(self, sample: Sample, category: int, mode: str, angles: AngleSet):
        key = (sample.id, category, mode, str(angles) if mode == "generalized" else None)
        hit = self._store.get(key)
        if hit is not None:
            self.hits += 1
            return hit
        pos, neg = category_bags(sample.boxes, category, sample.shape, mode, angles)
        packed = (BagSet.pack(pos, sample.shape), BagSet.pack(neg, sample.shape))
        self._store[key] = packed
        self.builds += 1
        return packed

    def for_sample(self, sample: Sample, mode: str, angles: AngleSet) -> dict:
        out = {}
        for c in range(1, sample.n_categories + 1):
            pos, neg = self.get(sample, c, mode, angles)
            if len(pos) + len(neg):
                out[c] = (pos, neg)
        return out


# ------------------------------------------------------------------ run log


@dataclass
class RunLog:
    n_categories: int
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def append(self, iteration: int, total: float, unary, pairwise, wall: float) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValueError("run log iterations must increase")
        rec = {"iteration": iteration, "total_loss": total}
        for c in range(self.n_categories):
            rec[f"unary_c{c + 1}"] = unary[c]
            rec[f"pairwise_c{c + 1}"] = pairwise[c]
        rec["wall_time"] = wall
        self.records.append(rec)

    @property
    def columns(self) -> list[str]:
        cols = ["iteration", "total_loss"]
        for c in range(1, self.n_categories + 1):
            cols += [f"unary_c{c}", f"pairwise_c{c}"]
        return cols + ["wall_time"]

    def losses(self) -> np.ndarray:
        return np.array([r["total_loss"] for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    models: dict[str, segmodel.ModelParams]
    log: RunLog
    cache: BagCache


def _sample_loss(params, sample: Sample, cfg: ExperimentConfig, cache: BagCache):
    probs = segmodel.forward(params, sample.image)
    n_cat = probs.shape[0]
    unary, pairwise = np.zeros(n_cat), np.zeros(n_cat)
    if cfg.supervision == FULL:
        loss = full_supervision_loss(probs, sample.masks)
        for c in range(n_cat):
            unary[c] = full_supervision_loss(probs[c : c + 1].detach(), sample.masks[c : c + 1]).item()
        return loss, unary, pairwise
    terms: dict = {}
    bags = cache.for_sample(sample, cfg.bag_mode, cfg.angle_set())
    loss = total_loss(probs, bags, cfg.loss, terms)
    for c, (u, p) in terms.items():
        unary[c - 1], pairwise[c - 1] = u, p
    return loss, unary, pairwise


def _loss_and_grads(params, sample, cfg, cache):
    params.zero_grad()
    loss, unary, pairwise = _sample_loss(params, sample, cfg, cache)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss on sample {sample.id}")
    nd.backward(loss)
    grads = [t.grad.copy() for t in params.parameters()]
    return value, unary, pairwise, grads


def _apply(params, new_values) -> None:
    for t, v in zip(params.parameters(), new_values):
        t.data = v


def _check_samples(samples: list[Sample]) -> int:
    if not samples:
        raise ValueError("training needs at least one sample")
    cats = {s.n_categories for s in samples}
    if len(cats) != 1:
        raise ValueError(f"samples disagree on category count: {sorted(cats)}")
    return cats.pop()


def train(samples: list[Sample], cfg: ExperimentConfig, threads: int = 1,
          cache: BagCache | None = None, log_every: int = 0) -> TrainResult:
    """Fit ``cfg.model_kind`` to ``samples``.

    A direct-logit model has no shared weights, so every sample gets its own
    logit map and Adam state; one iteration updates all of them.  A tiny-conv
    model is shared and each iteration averages gradients over a random batch.
    """
    n_cat = _check_samples(samples)
    cache = cache if cache is not None else BagCache()
    opt = cfg.optim
    runlog = RunLog(n_cat)
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    mapper = pool.map if pool is not None else map
    try:
        if cfg.model_kind == segmodel.DIRECT_LOGIT:
            models = {
                s.id: segmodel.init(cfg.model_kind, opt.seed, n_cat, s.shape) for s in samples
            }
            states = {s.id: AdamState.zeros_like([t.data for t in models[s.id].parameters()])
                      for s in samples}

            def step(sample):
                params = models[sample.id]
                value, unary, pairwise, grads = _loss_and_grads(params, sample, cfg, cache)
                new, states[sample.id] = adam_step(
                    [t.data for t in params.parameters()], grads, states[sample.id], opt)
                _apply(params, new)
                return value, unary, pairwise

            for s in samples:
                cache.for_sample(s, cfg.bag_mode, cfg.angle_set())
            for it in range(1, opt.iterations + 1):
                results = list(mapper(step, samples))
                _record(runlog, it, results, start, log_every)
        else:
            params = segmodel.init(cfg.model_kind, opt.seed, n_cat, samples[0].shape)
            state = AdamState.zeros_like([t.data for t in params.parameters()])
            rng = np.random.default_rng(opt.seed)
            models = {segmodel.SHARED_KEY: params}
            for it in range(1, opt.iterations + 1):
                batch = [samples[i] for i in rng.integers(len(samples), size=opt.batch_size)]
                workers = [params.copy() for _ in batch] if pool is not None else [params] * len(batch)
                results = list(mapper(
                    lambda pair: _loss_and_grads(pair[0], pair[1], cfg, cache), zip(workers, batch)))
                # fixed reduction order keeps runs bit-identical
                grads = [np.zeros_like(t.data) for t in params.parameters()]
                for res in results:
                    for acc, g in zip(grads, res[3]):
                        acc += g
                grads = [g / len(batch) for g in grads]
                new, state = adam_step([t.data for t in params.parameters()], grads, state, opt)
                _apply(params, new)
                _record(runlog, it, [r[:3] for r in results], start, log_every)
    finally:
        if pool is not None:
            pool.shutdown()
    runlog.final = {
        "iterations": opt.iterations,
        "final_loss": runlog.records[-1]["total_loss"] if runlog.records else None,
        "bag_builds": cache.builds,
        "wall_time": time.perf_counter() - start,
    }
    return TrainResult(models, runlog, cache)


def _record(runlog: RunLog, it: int, results, start: float, log_every: int) -> None:
    values = np.array([r[0] for r in results])
    unary = np.mean([r[1] for r in results], axis=0)
    pairwise = np.mean([r[2] for r in results], axis=0)
    total = float(values.mean())
    runlog.append(it, total, unary.tolist(), pairwise.tolist(), time.perf_counter() - start)
    if log_every and it % log_every == 0:
        log.info("iteration %d loss %.6f", it, total)


def training_samples(samples: list[Sample], cfg: ExperimentConfig) -> list[Sample]:
    """Samples a run fits.

    Direct-logit maps are per image, so every image with box labels is fitted
    (validation masks are never read under box supervision).  Shared models
    train on the training split only.
    """
    if cfg.model_kind == segmodel.DIRECT_LOGIT:
        return list(samples)
    return [s for s in samples if s.split == "train"]


def save_run(out_dir, result: TrainResult, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    segmodel.save_checkpoint(out / "checkpoint.json", result.models)
    result.log.write_csv(out / "runlog.csv")
    echo = {"experiment": cfg.to_json(), **(extra or {})}
    (out / "config_echo.json").write_text(json.dumps(echo, indent=1) + "\n")
    (out / "final.json").write_text(json.dumps(result.log.final, indent=1) + "\n")
    return out


def load_run_config(run_dir) -> ExperimentConfig:
    doc = json.loads((Path(run_dir) / "config_echo.json").read_text())
    return ExperimentConfig.from_json(doc["experiment"])
