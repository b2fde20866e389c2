"""Differentiable loss terms for the two-branch scribble-supervised objective.

Saliency maps are ``Variable[H, W]`` with values in (0, 1); images are plain
float64 arrays ``[H, W, 3]`` (they are inputs, never differentiated).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .data import ScribbleLabel


@dataclass
class LossConfig:
    alpha1: float = 0.5
    alpha2: float = 0.85
    alpha3: float = 0.5
    gamma: float = 0.3
    stage_weights: list[float] = field(default_factory=lambda: [1.0])
    sigma_I: float = 0.1
    sigma_P: float = 6.0
    lsc_radius: int = 5
    lsc_downscale: float = 0.25
    ssc_downscale: float = 0.25
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    sc_stop_gradient: bool = False

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} must lie in [0, 1]")
        if not all(np.isfinite(self.stage_weights)) or not np.isfinite(self.gamma):
            raise ValueError("loss weights must be finite")
        if self.lsc_radius < 1:
            raise ValueError("lsc_radius must be >= 1")
        for name in ("lsc_downscale", "ssc_downscale"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1]")


@dataclass
class LossBreakdown:
    total: float = 0.0
    global_: float = 0.0
    boundary: float = 0.0
    sc: float = 0.0
    pce_g: float = 0.0
    lsc_g: float = 0.0
    ssc: float = 0.0
    pce_b: float = 0.0
    lsc_b: float = 0.0
    sc_ssim: float = 0.0
    sc_mse: float = 0.0
    sc_ncs: float = 0.0

    def as_dict(self) -> dict[str, float]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["global"] = d.pop("global_")
        return d


def _scaled(n: int, factor: float) -> int:
    return max(1, int(round(n * factor)))


def resize_map(s: Variable, factor: float) -> Variable:
    h, w = s.shape
    out = ad.bilinear_resize(ad.reshape(s, (1, h, w)), _scaled(h, factor), _scaled(w, factor))
    return ad.reshape(out, out.shape[1:])


def resize_image(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    chw = np.moveaxis(np.asarray(img, dtype=np.float64), -1, 0)
    out = ad.bilinear_resize(Variable(chw), _scaled(h, factor), _scaled(w, factor)).value
    return np.moveaxis(out, 0, -1)


# ---------------------------------------------------------------- partial CE

def partial_ce(pred: Variable, label: ScribbleLabel) -> Variable:
    """Binary cross-entropy averaged over scribble-labelled pixels only."""
    if pred.shape != label.shape:
        raise ad.DimensionError(f"partial_ce: pred {pred.shape} vs label {label.shape}")
    fg = label.fg.astype(np.float64)
    bg = label.bg.astype(np.float64)
    n = fg.sum() + bg.sum()
    if n == 0:
        raise ad.UsageError("partial_ce: no labelled pixels")
    pos = ad.sum_(ad.mul(fg, ad.log(pred)))
    neg = ad.sum_(ad.mul(bg, ad.log(ad.sub(1.0, pred))))
    return ad.mul(ad.add(pos, neg), -1.0 / n)


# ---------------------------------------------------------------- SSIM

@lru_cache(maxsize=8)
def _gauss_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)[None, None]


def ssim(x: Variable, y: Variable, config: LossConfig | None = None) -> Variable:
    """Mean single-scale SSIM over valid Gaussian-window positions."""
    cfg = config or LossConfig()
    x, y = ad.as_variable(x), ad.as_variable(y)
    if x.shape != y.shape:
        raise ad.DimensionError(f"ssim: shapes {x.shape} and {y.shape} differ")
    h, w = x.shape
    if h < cfg.ssim_window or w < cfg.ssim_window:
        raise ValueError(f"ssim: map {h}x{w} smaller than window {cfg.ssim_window}")
    k = Variable(_gauss_window(cfg.ssim_window, cfg.ssim_sigma))

    def filt(v):
        return ad.conv2d(ad.reshape(v, (1, h, w)), k)

    mx, my = filt(x), filt(y)
    sxx = ad.sub(filt(ad.square(x)), ad.square(mx))
    syy = ad.sub(filt(ad.square(y)), ad.square(my))
    sxy = ad.sub(filt(ad.mul(x, y)), ad.mul(mx, my))
    num = ad.mul(ad.add(ad.mul(2.0, ad.mul(mx, my)), cfg.ssim_c1), ad.add(ad.mul(2.0, sxy), cfg.ssim_c2))
    den = ad.mul(ad.add(ad.add(ad.square(mx), ad.square(my)), cfg.ssim_c1),
                 ad.add(ad.add(sxx, syy), cfg.ssim_c2))
    return ad.mean(ad.div(num, den))


def ssim_l1_mix(a: Variable, b: Variable, weight: float, config: LossConfig) -> tuple[Variable, Variable, Variable]:
    """(weight * (1 - SSIM)/2, (1 - weight) * mean|a - b|, sum)."""
    t_ssim = ad.mul(ad.sub(1.0, ssim(a, b, config)), weight / 2.0)
    t_l1 = ad.mul(ad.mean(ad.abs_(ad.sub(a, b))), 1.0 - weight)
    return t_ssim, t_l1, ad.add(t_ssim, t_l1)


def ssc_from_maps(s_small_input: Variable, s_downscaled: Variable, config: LossConfig | None = None) -> Variable:
    cfg = config or LossConfig()
    return ssim_l1_mix(s_small_input, s_downscaled, cfg.alpha2, cfg)[2]


def ssc_loss(model: Callable[[np.ndarray], Variable], image: np.ndarray, config: LossConfig | None = None,
             full_pred: Variable | None = None) -> Variable:
    """Scale consistency between ``model(downscale(image))`` and ``downscale(model(image))``.

    ``full_pred`` reuses an existing full-resolution prediction.
    """
    cfg = config or LossConfig()
    h, w = image.shape[:2]
    if _scaled(h, cfg.ssc_downscale) < cfg.ssim_window or _scaled(w, cfg.ssc_downscale) < cfg.ssim_window:
        raise ValueError(f"ssc_loss: downscaled size smaller than SSIM window {cfg.ssim_window}")
    s_small = model(resize_image(image, cfg.ssc_downscale))
    s_full = full_pred if full_pred is not None else model(image)
    return ssc_from_maps(s_small, resize_map(s_full, cfg.ssc_downscale), cfg)


# ---------------------------------------------------------------- LSC

def lsc_kernel(image: np.ndarray, radius: int, sigma_I: float, sigma_P: float):
    """Normalised appearance/position affinities over each pixel's square neighbourhood.

    Returns (centre flat indices, neighbour flat indices, weights); the
    weights attached to each centre sum to one.
    """
    h, w = image.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    ci, nj, wt = [], [], []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            r2, c2 = rows + dy, cols + dx
            ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
            r1, c1, r2, c2 = rows[ok], cols[ok], r2[ok], c2[ok]
            d_col = ((image[r1, c1] - image[r2, c2]) ** 2).sum(-1)
            e = np.exp(-d_col / (2 * sigma_I ** 2) - (dy * dy + dx * dx) / (2 * sigma_P ** 2))
            ci.append(r1 * w + c1)
            nj.append(r2 * w + c2)
            wt.append(e)
    ci, nj, wt = np.concatenate(ci), np.concatenate(nj), np.concatenate(wt)
    norm = np.bincount(ci, weights=wt, minlength=h * w)
    return ci, nj, wt / norm[ci]


def lsc_loss(pred: Variable, image: np.ndarray, config: LossConfig | None = None) -> Variable:
    """Kernel-weighted |S_i - S_j| over local neighbourhoods, averaged over pixels."""
    cfg = config or LossConfig()
    if pred.shape != image.shape[:2]:
        raise ad.DimensionError(f"lsc_loss: pred {pred.shape} vs image {image.shape[:2]}")
    s = resize_map(pred, cfg.lsc_downscale) if cfg.lsc_downscale != 1.0 else pred
    img = resize_image(image, cfg.lsc_downscale) if cfg.lsc_downscale != 1.0 else np.asarray(image, float)
    ci, nj, wt = lsc_kernel(img, cfg.lsc_radius, cfg.sigma_I, cfg.sigma_P)
    d = ad.abs_(ad.sub(ad.take(s, ci), ad.take(s, nj)))
    return ad.mul(ad.sum_(ad.mul(wt, d)), 1.0 / s.size)


# ---------------------------------------------------------------- self-consistency

def ncs_loss(a: Variable, b: Variable) -> Variable:
    a, b = ad.as_variable(a), ad.as_variable(b)
    if a.shape != b.shape:
        raise ad.DimensionError(f"ncs_loss: shapes {a.shape} and {b.shape} differ")
    na = ad.clamp_min(ad.sqrt(ad.sum_(ad.square(a))), 1e-8)
    nb = ad.clamp_min(ad.sqrt(ad.sum_(ad.square(b))), 1e-8)
    return ad.mul(ad.div(ad.sum_(ad.mul(a, b)), ad.mul(na, nb)), -1.0)


def remove_region(s_gib: Variable, concave_mask: np.ndarray) -> Variable:
    """Zero the concave region out of the GIB map (no gradient flows there)."""
    if s_gib.shape != np.shape(concave_mask):
        raise ad.DimensionError("remove_region: mask shape mismatch")
    keep = 1.0 - (np.asarray(concave_mask) > 0).astype(np.float64)
    return ad.mul(s_gib, keep)


def sc_terms(s_rgib: Variable, s_bab: Variable, config: LossConfig | None = None) -> dict[str, Variable]:
    cfg = config or LossConfig()
    if cfg.sc_stop_gradient:
        s_rgib = ad.stop_gradient(s_rgib)
    t_ssim = ad.mul(ad.sub(1.0, ssim(s_rgib, s_bab, cfg)), cfg.alpha3 / 2.0)
    t_mse = ad.mul(ad.mean(ad.square(ad.sub(s_rgib, s_bab))), 1.0 - cfg.alpha3)
    t_ncs = ncs_loss(s_rgib, s_bab)
    return {"sc_ssim": t_ssim, "sc_mse": t_mse, "sc_ncs": t_ncs, "sc": ad.add(ad.add(t_ssim, t_mse), t_ncs)}


def sc_loss(s_rgib: Variable, s_bab: Variable, config: LossConfig | None = None) -> Variable:
    return sc_terms(s_rgib, s_bab, config)["sc"]


# ---------------------------------------------------------------- composite

def _staged(stage_preds: Sequence[Variable], image, label, cfg: LossConfig) -> tuple[Variable, Variable, Variable]:
    if len(stage_preds) != len(cfg.stage_weights):
        raise ValueError(f"{len(stage_preds)} stage predictions but {len(cfg.stage_weights)} stage weights")
    total = pce_sum = lsc_sum = Variable(0.0)
    for lam, pred in zip(cfg.stage_weights, stage_preds):
        pce = partial_ce(pred, label)
        lsc = lsc_loss(pred, image, cfg)
        total = ad.add(total, ad.mul(ad.add(ad.mul(lsc, cfg.gamma), pce), lam))
        pce_sum = ad.add(pce_sum, ad.mul(pce, lam))
        lsc_sum = ad.add(lsc_sum, ad.mul(lsc, lam))
    return total, pce_sum, lsc_sum


def global_loss(stage_preds: Sequence[Variable], image: np.ndarray, label: ScribbleLabel,
                ssc: Variable, config: LossConfig | None = None) -> dict[str, Variable]:
    cfg = config or LossConfig()
    staged, pce, lsc = _staged(stage_preds, image, label, cfg)
    return {"global": ad.add(ssc, staged), "pce_g": pce, "lsc_g": lsc, "ssc": ssc}


def boundary_loss(stage_preds: Sequence[Variable], image: np.ndarray, label: ScribbleLabel,
                  config: LossConfig | None = None) -> dict[str, Variable]:
    cfg = config or LossConfig()
    staged, pce, lsc = _staged(stage_preds, image, label, cfg)
    return {"boundary": staged, "pce_b": pce, "lsc_b": lsc}


def _as_stages(out) -> list[Variable]:
    return list(out) if isinstance(out, (list, tuple)) else [out]


def total_loss(
    model: Callable[[np.ndarray], Variable | Sequence[Variable]],
    image: np.ndarray,
    label: ScribbleLabel,
    config: LossConfig | None = None,
    synth_image: np.ndarray | None = None,
    synth_label: ScribbleLabel | None = None,
    concave_mask: np.ndarray | None = None,
    use_bab: bool = True,
    use_sc: bool = True,
) -> tuple[Variable, LossBreakdown]:
    """Full objective: global + boundary + alpha1 * self-consistency.

    The boundary and self-consistency terms are dropped (zero) when no
    synthetic image is given or their flags are off. The last stage map is
    the one used for scale and self-consistency.
    """
    cfg = config or LossConfig()
    gib = _as_stages(model(image))
    ssc = ssc_loss(lambda im: _as_stages(model(im))[-1], image, cfg, full_pred=gib[-1])
    g = global_loss(gib, image, label, ssc, cfg)
    terms: dict[str, Variable] = dict(g)
    total = g["global"]
    if synth_image is not None and (use_bab or use_sc):
        if synth_label is None or concave_mask is None:
            raise ValueError("synthetic image needs its label and concave mask")
        bab = _as_stages(model(synth_image))
        if use_bab:
            b = boundary_loss(bab, synth_image, synth_label, cfg)
            terms.update(b)
            total = ad.add(total, b["boundary"])
        if use_sc:
            sc = sc_terms(remove_region(gib[-1], concave_mask), bab[-1], cfg)
            terms.update(sc)
            total = ad.add(total, ad.mul(sc["sc"], cfg.alpha1))
    bd = LossBreakdown(total=total.item())
    for name, v in terms.items():
        setattr(bd, "global_" if name == "global" else name, v.item())
    return total, bd
