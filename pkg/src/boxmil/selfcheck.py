"""Numerical self checks: finite-difference gradients and smooth-max properties.

The finite-difference oracle only ever calls forward computations, so it stays
independent of the backward pass it checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .boxbags import BagSet, BoxLabel, category_bags
from .milloss import (
    LossConfig,
    alpha_quasimax,
    alpha_softmax,
    pairwise_smooth,
    total_loss,
    unary_ce,
    unary_focal,
)

FD_STEP = 1e-5
GRAD_RTOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst={self.worst:.3e} {self.detail}".rstrip()


def finite_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2.0 * h)
    return g


def autodiff(build, x: np.ndarray) -> tuple[float, np.ndarray]:
    t = nd.Tensor(x, requires_grad=True)
    out = build(t)
    nd.backward(out)
    return out.item(), t.grad


def relative_error(ad: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(fd)), float(np.linalg.norm(ad)), 1e-12)
    return float(np.linalg.norm(ad - fd)) / scale


def gradient_error(build, x: np.ndarray, h: float = FD_STEP) -> float:
    _, ad = autodiff(build, x)
    fd = finite_difference(lambda v: build(nd.Tensor(v)).item(), x, h)
    return relative_error(ad, fd)


# ----------------------------------------------------------- op instances


def _weights(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def op_cases(rng: np.random.Generator) -> dict:
    """``name -> (builder, input)`` for one random instance of every engine op.

    Each builder reduces to a scalar through a fixed random weighting so the
    whole Jacobian is exercised.
    """
    n = 6
    x = rng.uniform(-4.0, 4.0, size=n)
    pos = rng.uniform(0.2, 4.0, size=n)
    other = rng.uniform(-4.0, 4.0, size=n)
    away = rng.uniform(0.5, 4.0, size=n) * rng.choice([-1.0, 1.0], size=n)
    w = _weights(rng, n)
    mat = rng.uniform(-4.0, 4.0, size=(3, 4))
    w_mat = _weights(rng, 3)
    idx = rng.integers(0, n, size=9)
    w_idx = _weights(rng, 9)
    img = rng.uniform(-1.0, 1.0, size=(2, 4, 4))
    kern = rng.uniform(-0.5, 0.5, size=(3, 2, 3, 3))
    bias = rng.uniform(-0.5, 0.5, size=3)
    w_conv = _weights(rng, (3, 4, 4))
    s = float(rng.uniform(-4.0, 4.0))
    return {
        "add": (lambda t: nd.sum(nd.add(t, other) * w), x),
        "sub": (lambda t: nd.sum(nd.sub(other, t) * w), x),
        "mul": (lambda t: nd.sum(nd.mul(t, other) * w), x),
        "mul_scalar": (lambda t: nd.sum(nd.mul(t, s) * w), x),
        "div_numerator": (lambda t: nd.sum(nd.div(t, away) * w), x),
        "div_denominator": (lambda t: nd.sum(nd.div(other, t) * w), away),
        "exp": (lambda t: nd.sum(nd.exp(t) * w), x),
        "log": (lambda t: nd.sum(nd.log(t) * w), pos),
        "sigmoid": (lambda t: nd.sum(nd.sigmoid(t) * w), x),
        "square": (lambda t: nd.sum(nd.square(t) * w), x),
        "power": (lambda t: nd.sum(nd.power(t, 2.5) * w), pos),
        "relu": (lambda t: nd.sum(nd.relu(t) * w), away),
        "sum_axis": (lambda t: nd.sum(nd.sum(t, axis=1) * w_mat), mat),
        "mean_axis": (lambda t: nd.sum(nd.mean(t, axis=1) * w_mat), mat),
        "mean_all": (lambda t: nd.mean(nd.square(t)), x),
        "max_reduce": (lambda t: nd.sum(nd.max_reduce(t, axis=1) * w_mat), mat),
        "max_reduce_all": (lambda t: nd.max_reduce(t) * 1.7, x),
        "take": (lambda t: nd.sum(nd.take(t, idx) * w_idx), x),
        "getitem": (lambda t: nd.sum(nd.square(t[:, 1:] - t[:, :-1])), mat),
        "conv2d_input": (lambda t: nd.sum(nd.conv2d(t, kern, bias) * w_conv), img),
        "conv2d_weight": (lambda t: nd.sum(nd.conv2d(img, t, bias) * w_conv), kern),
    }


def _random_box(rng, h, w, category):
    y0, y1 = sorted(rng.integers(0, h, size=2))
    x0, x1 = sorted(rng.integers(0, w, size=2))
    return BoxLabel(int(x0), int(y0), int(x1), int(y1), category)


def random_loss_instance(rng, shape=(6, 6), n_categories=1, mode=None, angles=None):
    """Random probabilities, boxes and packed bags for a small image."""
    mode = mode or ("generalized" if rng.random() < 0.5 else "baseline")
    angles = angles if angles is not None else [-40.0, -20.0, 0.0, 20.0, 40.0]
    boxes = []
    for c in range(1, n_categories + 1):
        for _ in range(int(rng.integers(1, 3))):
            boxes.append(_random_box(rng, *shape, c))
    bags = {}
    raw = {}
    for c in range(1, n_categories + 1):
        pos, neg = category_bags(boxes, c, shape, mode, angles)
        raw[c] = (pos, neg)
        bags[c] = (BagSet.pack(pos, shape), BagSet.pack(neg, shape))
    probs = rng.uniform(0.05, 0.95, size=(n_categories, *shape))
    return probs, boxes, bags, raw


def loss_cases(rng: np.random.Generator, alphas=(4.0, 6.0, 8.0)) -> dict:
    """``name -> (builder, input)`` for the loss stack on a random instance."""
    probs, _, bags, _ = random_loss_instance(rng, shape=(5, 5))
    pos, neg = bags[1]
    vec = rng.uniform(0.0, 1.0, size=7)
    bag_vals = rng.uniform(0.05, 0.95, size=(4, 5))
    bag_mask = np.ones((4, 5), dtype=bool)
    bag_mask[1, 3:] = False
    bag_mask[3, 1:] = False
    pos_p = rng.uniform(0.05, 0.95, size=int(rng.integers(1, 6)))
    neg_p = rng.uniform(0.05, 0.95, size=int(rng.integers(1, 9)))
    cases = {
        "unary_ce": (lambda t: unary_ce(t[: len(pos_p)], t[len(pos_p):], LossConfig(unary_kind="ce")),
                     np.concatenate([pos_p, neg_p])),
        "unary_focal": (lambda t: unary_focal(t[: len(pos_p)], t[len(pos_p):], LossConfig()),
                        np.concatenate([pos_p, neg_p])),
        "pairwise": (lambda t: pairwise_smooth(t), probs[0]),
        "total_exact_max_focal": (lambda t: total_loss(t, bags, LossConfig()), probs),
        "total_ce": (lambda t: total_loss(t, bags, LossConfig(unary_kind="ce")), probs),
    }
    w = _weights(rng, 4)
    for a in alphas:
        cases[f"softmax_a{a:g}"] = (lambda t, a=a: alpha_softmax(t, a), vec)
        cases[f"quasimax_a{a:g}"] = (lambda t, a=a: alpha_quasimax(t, a), vec)
        cases[f"softmax_bags_a{a:g}"] = (
            lambda t, a=a: nd.sum(alpha_softmax(t, a, bag_mask) * w), bag_vals)
        cases[f"quasimax_bags_a{a:g}"] = (
            lambda t, a=a: nd.sum(alpha_quasimax(t, a, bag_mask) * w), bag_vals)
        cases[f"total_softmax_a{a:g}"] = (
            lambda t, a=a: total_loss(t, bags, LossConfig(bag_reduce="alpha-softmax", alpha=a)), probs)
        cases[f"total_quasimax_a{a:g}"] = (
            lambda t, a=a: total_loss(t, bags, LossConfig(bag_reduce="alpha-quasimax", alpha=a)), probs)
    return cases


def gradient_suite(n_instances: int = 100, seed: int = 0, rtol: float = GRAD_RTOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_instances):
        for family in (op_cases, loss_cases):
            for name, (build, x) in family(rng).items():
                err = gradient_error(build, x)
                worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"grad {k}", v <= rtol, v, f"(n={n_instances}, rtol={rtol:g})")
            for k, v in worst.items()]


# ------------------------------------------------------- smooth maximum


def smoothmax_suite(n_vectors: int = 10_000, seed: int = 0, max_len: int = 12) -> list[CheckResult]:
    """Bound, convergence, mean limit, gradient sign and equal-entry checks."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(2, max_len + 1, size=n_vectors)
    width = int(lengths.max())
    x = rng.uniform(0.0, 1.0, size=(n_vectors, width))
    mask = np.arange(width)[None, :] < lengths[:, None]
    xm = np.where(mask, x, -np.inf)
    true_max = xm.max(axis=1)
    mean = np.where(mask, x, 0.0).sum(axis=1) / lengths
    results = []

    gaps = {}
    for a in (4.0, 6.0, 8.0):
        q = alpha_quasimax(nd.Tensor(x), a, mask).data
        s = alpha_softmax(nd.Tensor(x), a, mask).data
        gaps[a] = (np.abs(s - true_max), np.abs(q - true_max))
        over = float(np.max(q - true_max))
        results.append(CheckResult(f"quasimax a={a:g} <= max", bool(np.all(q <= true_max)), max(over, 0.0)))

    sorted_x = np.sort(np.where(mask, x, np.nan), axis=1)
    distinct = np.all(np.nan_to_num(np.diff(sorted_x, axis=1), nan=1.0) > 0, axis=1)
    for i, label in enumerate(("softmax", "quasimax")):
        shrink = gaps[8.0][i] <= gaps[4.0][i]
        ok = bool(np.all(shrink[distinct]))
        worst = float(np.max((gaps[8.0][i] - gaps[4.0][i])[distinct]))
        results.append(CheckResult(f"{label} gap shrinks a=4 -> a=8", ok, worst,
                                   f"({int(distinct.sum())} distinct vectors)"))

    s0 = alpha_softmax(nd.Tensor(x), 1e-6, mask).data
    dev = float(np.max(np.abs(s0 - mean)))
    results.append(CheckResult("softmax a=1e-6 ~ mean", dev <= 1e-4, dev))

    for a in (4.0, 6.0, 8.0):
        for label, fn in (("softmax", alpha_softmax), ("quasimax", alpha_quasimax)):
            t = nd.Tensor(x, requires_grad=True)
            nd.backward(nd.sum(fn(t, a, mask)))
            if label == "quasimax":
                min_g = float(np.where(mask, t.grad, np.inf).min())
                results.append(CheckResult(f"quasimax a={a:g} partials > 0", min_g > 0.0, min_g))
            else:
                # dS/dx_i = w_i (1 + a (x_i - S)): negative for entries below S - 1/a
                s_val = alpha_softmax(nd.Tensor(x), a, mask).data[:, None]
                w_soft = np.exp(a * (x - true_max[:, None])) * mask
                w_soft /= w_soft.sum(axis=1, keepdims=True)
                expected = w_soft * (1.0 + a * (x - s_val))
                dev = float(np.max(np.abs(np.where(mask, t.grad - expected, 0.0))))
                clear = mask & (np.abs(1.0 + a * (x - s_val)) > 1e-9)
                sign_ok = bool(np.all(np.sign(t.grad[clear]) == np.sign(expected[clear])))
                results.append(CheckResult(f"softmax a={a:g} partials = w(1 + a(x - S))",
                                           sign_ok and dev <= 1e-12, dev))
                pos = np.where(mask, t.grad, -np.inf)
                results.append(CheckResult(f"softmax a={a:g} partials > 0 at and near max",
                                           bool(np.all(pos[mask & (x > s_val - 1.0 / a + 1e-9)] > 0)),
                                           float(pos.max(axis=1).min())))
            if label == "softmax":
                gm = np.where(mask, t.grad, -np.inf)
                arg = np.argmax(xm, axis=1)
                g_at_max = gm[np.arange(n_vectors), arg]
                others = gm.copy()
                others[np.arange(n_vectors), arg] = -np.inf
                margin = g_at_max - others.max(axis=1)
                ok = bool(np.all(margin[distinct] > 0))
                results.append(CheckResult(f"softmax a={a:g} largest partial at max", ok,
                                           float(margin[distinct].min())))

    v = rng.uniform(-5.0, 5.0, size=(n_vectors, 1))
    pair = np.hstack([v, v])
    worst = 0.0
    for a in (4.0, 6.0, 8.0):
        q = alpha_quasimax(nd.Tensor(pair), a).data
        worst = max(worst, float(np.max(np.abs(q - v[:, 0]))))
    results.append(CheckResult("quasimax of two equal entries", worst == 0.0, worst))
    return results
