"""Differentiable MIL loss stack over per-pixel category probabilities.

Bag predictions use the exact maximum or one of two smooth approximations:

* alpha-softmax: ``sum(x * exp(a x)) / sum(exp(a x))``
* alpha-quasimax: ``log(sum(exp(a x))) / a - log(n) / a``

Both are evaluated with the bag maximum subtracted before exponentiation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndgrad as nd
from .boxbags import Bag, BagSet
from .ndgrad import Tensor

EXACT_MAX = "exact-max"
ALPHA_SOFTMAX = "alpha-softmax"
ALPHA_QUASIMAX = "alpha-quasimax"
BAG_REDUCERS = (EXACT_MAX, ALPHA_SOFTMAX, ALPHA_QUASIMAX)


@dataclass
class LossConfig:
    lambda_pair: float = 10.0
    beta: float = 0.25
    gamma: float = 2.0
    bag_reduce: str = EXACT_MAX
    alpha: float | None = None
    unary_kind: str = "focal"
    epsilon: float = 1e-7
    # apply the smooth maximum to negative bags as well
    smooth_negatives: bool = True

    def __post_init__(self):
        if self.bag_reduce not in BAG_REDUCERS:
            raise ValueError(f"bag_reduce must be one of {BAG_REDUCERS}, got {self.bag_reduce!r}")
        if self.bag_reduce == EXACT_MAX:
            if self.alpha is not None:
                raise ValueError("alpha is only meaningful for a smooth bag reduction")
        elif self.alpha is None or not self.alpha > 0:
            raise ValueError(f"{self.bag_reduce} needs alpha > 0")
        if self.unary_kind not in ("ce", "focal"):
            raise ValueError(f"unary_kind must be 'ce' or 'focal', got {self.unary_kind!r}")
        if self.lambda_pair < 0:
            raise ValueError("lambda_pair must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> LossConfig:
        return cls(**obj)


# ------------------------------------------------------------ smooth maximum


def _segment_max(x: Tensor, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, x.data, -np.inf).max(axis=-1, keepdims=True)


def alpha_softmax(x: Tensor, alpha: float, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax-weighted mean along the last axis, restricted to ``mask``."""
    if axis not in (-1, x.ndim - 1):
        raise ValueError("smooth maxima reduce the last axis only")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    shift = np.broadcast_to(_segment_max(x, mask), x.shape)
    weights = nd.exp(alpha * (x - shift)) * mask.astype(np.float64)
    return nd.sum(x * weights, axis=-1) / nd.sum(weights, axis=-1)


def alpha_quasimax(x: Tensor, alpha: float, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Shifted log-sum-exp minus ``log(n) / alpha`` along the last axis."""
    if axis not in (-1, x.ndim - 1):
        raise ValueError("smooth maxima reduce the last axis only")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    m = _segment_max(x, mask)
    shift = np.broadcast_to(m, x.shape)
    n = mask.sum(axis=-1).astype(np.float64)
    total = nd.sum(nd.exp(alpha * (x - shift)) * mask.astype(np.float64), axis=-1)
    # log n subtracted before scaling keeps equal entries exact
    return (nd.log(total) - np.log(n)) / alpha + m[..., 0]


def exact_max(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    # padded entries repeat a real one, so the mask never changes the result
    return nd.max_reduce(x, axis=-1)


def reduce_bags(values: Tensor, mask: np.ndarray, bag_reduce: str, alpha: float | None) -> Tensor:
    if bag_reduce == EXACT_MAX:
        return exact_max(values, mask)
    if bag_reduce == ALPHA_SOFTMAX:
        return alpha_softmax(values, alpha, mask)
    if bag_reduce == ALPHA_QUASIMAX:
        return alpha_quasimax(values, alpha, mask)
    raise ValueError(f"unknown bag reduction {bag_reduce!r}")


def bag_predictions(probs_c: Tensor, bags: BagSet, cfg: LossConfig, negative: bool = False) -> Tensor:
    """Vector of bag predictions for every bag in ``bags``."""
    if len(bags) == 0:
        return Tensor(np.zeros(0))
    values = nd.take(probs_c, bags.index)
    how = cfg.bag_reduce
    if negative and not cfg.smooth_negatives:
        how = EXACT_MAX
    return reduce_bags(values, bags.mask, how, cfg.alpha)


def bag_prediction(probs_c: Tensor, bag: Bag, cfg: LossConfig) -> Tensor:
    """Scalar prediction of one bag being positive."""
    if len(bag.pixels) == 0:
        raise ValueError("empty bag")
    packed = BagSet.pack([bag], probs_c.shape)
    return bag_predictions(probs_c, packed, cfg, negative=bag.polarity == "negative")[0]


# ------------------------------------------------------------------- losses


def _stack(preds) -> Tensor | None:
    if isinstance(preds, Tensor):
        return preds if preds.size else None
    preds = list(preds)
    if not preds:
        return None
    if all(not isinstance(p, Tensor) for p in preds):
        return Tensor(np.asarray(preds, dtype=np.float64))
    total = None
    for i, p in enumerate(preds):
        onehot = np.zeros(len(preds))
        onehot[i] = 1.0
        term = nd.reshape(p, ()) * onehot
        total = term if total is None else total + term
    return total


def _count(t: Tensor | None) -> int:
    return 0 if t is None else t.size


def unary_ce(bag_preds_pos, bag_preds_neg, cfg: LossConfig) -> Tensor:
    """Bag-level binary cross entropy averaged over all bags."""
    pos, neg = _stack(bag_preds_pos), _stack(bag_preds_neg)
    n = _count(pos) + _count(neg)
    if n == 0:
        raise ValueError("unary_ce: no bags")
    eps = cfg.epsilon
    total = Tensor(0.0)
    if pos is not None:
        total = total + nd.sum(nd.log(nd.clip(pos, eps, 1.0 - eps)))
    if neg is not None:
        total = total + nd.sum(nd.log(1.0 - nd.clip(neg, eps, 1.0 - eps)))
    return -total / float(n)


def unary_focal(bag_preds_pos, bag_preds_neg, cfg: LossConfig) -> Tensor:
    """Focal loss on bag predictions, normalized by ``max(1, #positive bags)``."""
    pos, neg = _stack(bag_preds_pos), _stack(bag_preds_neg)
    if _count(pos) + _count(neg) == 0:
        raise ValueError("unary_focal: no bags")
    eps, beta, gamma = cfg.epsilon, cfg.beta, cfg.gamma
    total = Tensor(0.0)
    if pos is not None:
        p = nd.clip(pos, eps, 1.0 - eps)
        total = total + beta * nd.sum(nd.power(1.0 - p, gamma) * nd.log(p))
    if neg is not None:
        p = nd.clip(neg, eps, 1.0 - eps)
        total = total + (1.0 - beta) * nd.sum(nd.power(p, gamma) * nd.log(1.0 - p))
    return -total / float(max(1, _count(pos)))


def pairwise_smooth(probs_c: Tensor) -> Tensor:
    """Mean squared difference over 4-connected neighbour pairs."""
    if probs_c.ndim != 2:
        raise nd.ShapeError(f"pairwise_smooth expects [H, W], got {probs_c.shape}")
    h, w = probs_c.shape
    n_pairs = h * (w - 1) + (h - 1) * w
    if n_pairs == 0:
        return Tensor(0.0)
    total = Tensor(0.0)
    if w > 1:
        total = total + nd.sum(nd.square(probs_c[:, 1:] - probs_c[:, :-1]))
    if h > 1:
        total = total + nd.sum(nd.square(probs_c[1:, :] - probs_c[:-1, :]))
    return total / float(n_pairs)


def unary_loss(probs_c: Tensor, pos: BagSet, neg: BagSet, cfg: LossConfig) -> Tensor:
    pp = bag_predictions(probs_c, pos, cfg)
    pn = bag_predictions(probs_c, neg, cfg, negative=True)
    if cfg.unary_kind == "ce":
        return unary_ce(pp, pn, cfg)
    return unary_focal(pp, pn, cfg)


def category_terms(probs_c: Tensor, pos: BagSet, neg: BagSet, cfg: LossConfig):
    """``(unary, pairwise)`` for one category; the category loss is ``unary + lambda * pairwise``."""
    return unary_loss(probs_c, pos, neg, cfg), pairwise_smooth(probs_c)


def category_loss(probs_c: Tensor, pos: BagSet, neg: BagSet, cfg: LossConfig) -> Tensor:
    unary, pair = category_terms(probs_c, pos, neg, cfg)
    if cfg.lambda_pair == 0.0:
        return unary
    return unary + cfg.lambda_pair * pair


def total_loss(probs: Tensor, bags: dict, cfg: LossConfig, terms: dict | None = None) -> Tensor:
    """Sum of category losses.

    ``probs`` is ``[C, H, W]``; ``bags`` maps category ``c`` (1-based) to a
    ``(positive BagSet, negative BagSet)`` pair.  Categories missing from
    ``bags`` contribute nothing.  When ``terms`` is given it receives
    ``{c: (unary, pairwise)}`` as floats.
    """
    if probs.ndim != 3:
        raise nd.ShapeError(f"total_loss expects [C, H, W], got {probs.shape}")
    total = None
    for c in sorted(bags):
        if not 1 <= c <= probs.shape[0]:
            raise ValueError(f"category {c} outside 1..{probs.shape[0]}")
        pos, neg = bags[c]
        unary, pair = category_terms(probs[c - 1], pos, neg, cfg)
        loss_c = unary + cfg.lambda_pair * pair if cfg.lambda_pair else unary
        if terms is not None:
            terms[c] = (unary.item(), pair.item())
        total = loss_c if total is None else total + loss_c
    if total is None:
        raise ValueError("total_loss: no categories")
    return total


def full_supervision_loss(probs: Tensor, masks: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Per-pixel binary cross entropy against ground-truth masks ``[C, H, W]``."""
    if probs.shape != masks.shape:
        raise nd.ShapeError(f"probs {probs.shape} vs masks {masks.shape}")
    y = masks.astype(np.float64)
    p = nd.clip(probs, eps, 1.0 - eps)
    ll = nd.log(p) * y + nd.log(1.0 - p) * (1.0 - y)
    return -nd.mean(ll)
