"""Finite-difference checks for every loss op on randomly drawn instances."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import GradCheckReport, Variable, grad_check
from .data import ScribbleLabel, State
from .trainer import ToyModel

OPS = ("partial_ce", "ssim", "ssc_loss", "lsc_loss", "ncs_loss", "sc_loss", "total_loss")
TOLERANCE = {"total_loss": 1e-3}
# checks through the model use a wider stencil: loss roundoff (~1e-13) / 2e-5 would swamp small gradients
STEP = {"ssc_loss": 1e-4, "total_loss": 1e-4}


def _label(rng, shape) -> ScribbleLabel:
    states = rng.choice([0, 0, 1, 2], size=shape).astype(np.int8)
    states[0, 0], states[-1, -1] = State.FOREGROUND, State.BACKGROUND
    return ScribbleLabel(states)


def _unflatten(v: Variable, shapes) -> list[Variable]:
    parts, off = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        parts.append(ad.reshape(ad.take(v, np.arange(off, off + n)), shp))
        off += n
    return parts


def _model_fn(width: int, rng: np.random.Generator, image: np.ndarray):
    """Flat parameter vector and a map from a Variable over it to a forward closure.

    Seeds are redrawn until the network output varies over ``image``, so the
    check never runs on a dead ReLU stack with identically zero gradients.
    """
    while True:
        model = ToyModel(width=width, seed=int(rng.integers(1 << 30)))
        if model.predict(image).std() > 1e-6:
            break
    shapes = [p.shape for p in model.params]
    flat = np.concatenate([p.ravel() for p in model.params])
    return flat, lambda v: (lambda im: ToyModel.forward(_unflatten(v, shapes), im))


def smooth_coords(f, x: np.ndarray, n: int, rng: np.random.Generator, eps: float = 1e-5) -> np.ndarray:
    """Up to ``n`` random coordinates whose +-eps stencil stays on one smooth piece of ``f``.

    Central differences across a ReLU, abs or clamp kink do not estimate the
    derivative, so such coordinates are not checked.
    """
    def pattern(vec):
        with ad.record_kinks() as log:
            f(Variable(vec))
        return log

    base = pattern(x)
    chosen = []
    for i in rng.permutation(x.size):
        for step in (eps, -eps):
            xp = x.copy()
            xp[i] += step
            if not all(np.array_equal(a, b) for a, b in zip(base, pattern(xp))):
                break
        else:
            chosen.append(i)
            if len(chosen) == n:
                break
    return np.asarray(chosen, dtype=np.int64)


def _buggy_log(x) -> Variable:
    # deliberately wrong derivative, for the negative control
    x = ad.as_variable(x)
    c = np.maximum(x.value, ad.EPS)
    return ad._make(np.log(c), (x,), lambda g: (g / (c + 0.01),), "buggy_log")


def _buggy_partial_ce(pred: Variable, label: ScribbleLabel) -> Variable:
    fg, bg = label.fg.astype(np.float64), label.bg.astype(np.float64)
    pos = ad.sum_(ad.mul(fg, _buggy_log(pred)))
    neg = ad.sum_(ad.mul(bg, _buggy_log(ad.sub(1.0, pred))))
    return ad.mul(ad.add(pos, neg), -1.0 / (fg.sum() + bg.sum()))


def instance(op: str, rng: np.random.Generator, inject_bug: bool = False):
    """One random check: returns (f, x, coords)."""
    if op == "partial_ce":
        shape = tuple(rng.integers(4, 9, 2))
        label = _label(rng, shape)
        pce = _buggy_partial_ce if inject_bug else L.partial_ce
        return (lambda v: pce(v, label)), rng.uniform(0.05, 0.95, shape), None
    if op == "ssim":
        shape = tuple(rng.integers(11, 15, 2))
        y = rng.uniform(0, 1, shape)
        return (lambda v: L.ssim(v, Variable(y))), rng.uniform(0, 1, shape), None
    if op == "ssc_loss":
        img = rng.uniform(0, 1, (44, 44, 3))
        flat, fn = _model_fn(2, rng, img)
        f = lambda v: L.ssc_loss(fn(v), img)
        return f, flat, smooth_coords(f, flat, 12, rng, STEP[op])
    if op == "lsc_loss":
        shape = tuple(4 * rng.integers(3, 6, 2))
        img = rng.uniform(0, 1, shape + (3,))
        return (lambda v: L.lsc_loss(v, img)), rng.uniform(0, 1, shape), None
    if op == "ncs_loss":
        n = int(rng.integers(5, 30))
        b = rng.normal(size=n)
        return (lambda v: L.ncs_loss(v, Variable(b))), rng.normal(size=n), None
    if op == "sc_loss":
        shape = tuple(rng.integers(11, 15, 2))
        other = rng.uniform(0, 1, shape)
        if rng.random() < 0.5:
            return (lambda v: L.sc_loss(v, Variable(other))), rng.uniform(0, 1, shape), None
        return (lambda v: L.sc_loss(Variable(other), v)), rng.uniform(0, 1, shape), None
    if op == "total_loss":
        size = 44
        img = rng.uniform(0, 1, (size, size, 3))
        label = _label(rng, (size, size))
        syn = np.clip(img + rng.normal(0, 0.1, img.shape), 0, 1)
        mask = np.zeros((size, size), np.uint8)
        r, c = rng.integers(4, size - 14, 2)
        mask[r:r + 10, c:c + 10] = 1
        slabel = label.copy()
        slabel.states[mask > 0] = State.BACKGROUND
        flat, fn = _model_fn(3, rng, img)
        f = lambda v: L.total_loss(fn(v), img, label, L.LossConfig(), syn, slabel, mask)[0]
        return f, flat, smooth_coords(f, flat, 10, rng, STEP[op])
    raise ValueError(f"unknown op {op!r}")


def check_op(op: str, n_instances: int, rng: np.random.Generator, inject_bug: bool = False) -> GradCheckReport:
    """Worst case over ``n_instances`` random instances of ``op``."""
    tol = TOLERANCE.get(op, 1e-4)
    reports = []
    for _ in range(n_instances):
        f, x, coords = instance(op, rng, inject_bug)
        reports.append(grad_check(f, x, eps=STEP.get(op, 1e-5), tolerance=tol, op_name=op, coords=coords))
    return GradCheckReport(
        op_name=op,
        max_rel_error=max(r.max_rel_error for r in reports),
        max_abs_error=max(r.max_abs_error for r in reports),
        passed=all(r.passed for r in reports),
        tolerance=tol,
        n_checked=sum(r.n_checked for r in reports),
        max_rel_above_floor=max(r.max_rel_above_floor for r in reports),
        n_floor=sum(r.n_floor for r in reports),
    )


def run_suite(seed: int = 0, n_instances: int = 20, inject_bug: bool = False,
              log: Callable[[str], None] | None = None) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = []
    for op in OPS:
        rep = check_op(op, n_instances, rng, inject_bug)
        if log:
            log(rep.line())
        out.append(rep)
    return out
