"""Synthetic concave-region generation.

A background scribble point B and a foreground scribble point A are joined by
a one-pixel-per-step path; windows of varying half-width slid along the path
form the concave region, which is filled with mirrored background texture,
feathered into the image and labelled background.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .data import GenerationError, Sample, ScribbleLabel, State, SyntheticSample
from .imaging import gaussian_blur, local_variance_map, patch_similarity, skeletonize, srgb_to_lab

Point = tuple[int, int]  # (row, col)


@dataclass
class SynthConfig:
    k_min: int = 10
    k_max: int = 15
    beta1_range: tuple[float, float] = (-1.0, 1.0)
    beta2_range: tuple[float, float] = (1.0, 2.0)
    patch_window: int = 15
    n_variants: int = 10
    feather_sigma_range: tuple[float, float] = (1.0, 3.0)
    strategy_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    max_retries: int = 20

    def __post_init__(self):
        if self.k_min > self.k_max:
            raise ValueError("k_min must be <= k_max")
        for name in ("beta1_range", "beta2_range", "feather_sigma_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a nonempty range")
        if self.n_variants < 1:
            raise ValueError("n_variants must be >= 1")
        w = np.asarray(self.strategy_weights, dtype=float)
        if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("strategy_weights must be three nonnegative weights")


@dataclass(frozen=True)
class EndpointPair:
    fg: Point
    bg: Point
    strategy: int


@dataclass
class PathSkeleton:
    points: list[Point]

    @property
    def N(self) -> int:
        return len(self.points)


@dataclass
class ConcaveRegion:
    mask: np.ndarray
    path: PathSkeleton
    k: int
    beta: tuple[tuple[float, float], tuple[float, float]]  # (upper-left, lower-right) (beta1, beta2)
    halfwidths: list[tuple[float, float]] = field(default_factory=list)


def _points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(mask > 0)  # row-major order


def _skeletons(label: ScribbleLabel) -> tuple[np.ndarray, np.ndarray]:
    fg = _points(skeletonize(label.fg))
    bg = _points(skeletonize(label.bg))
    if len(fg) == 0 or len(bg) == 0:
        raise GenerationError("scribble skeleton is empty (need foreground and background scribbles)")
    return fg, bg


def generate_path(b: Point, a: Point) -> PathSkeleton:
    """Greedy walk from ``b`` to ``a``: diagonal while both deltas are nonzero, then straight."""
    r, c = int(b[0]), int(b[1])
    ar, ac = int(a[0]), int(a[1])
    pts = [(r, c)]
    while (r, c) != (ar, ac):
        r += int(np.sign(ar - r))
        c += int(np.sign(ac - c))
        pts.append((r, c))
    return PathSkeleton(pts)


def _line_rule(fg_pt: Point, bg_pt: Point, fg_set: set, bg_set: set) -> tuple[Point, Point]:
    """Shrink the pair until the path between them holds no other skeleton point."""
    while True:
        pts = generate_path(bg_pt, fg_pt).points
        f = next(i for i, p in enumerate(pts) if p in fg_set)
        b = max(i for i in range(f) if pts[i] in bg_set) if f > 0 else 0
        if (f, b) == (len(pts) - 1, 0):
            return fg_pt, bg_pt
        fg_pt, bg_pt = pts[f], pts[b]


def select_endpoints(
    label: ScribbleLabel,
    lab: np.ndarray,
    strategy: int,
    rng: np.random.Generator,
    window: int = 15,
) -> EndpointPair:
    fg, bg = _skeletons(label)
    if strategy == 1:
        d2 = ((fg[:, None, :] - bg[None, :, :]) ** 2).sum(-1)
        i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
        fg_pt, bg_pt = tuple(fg[i]), tuple(bg[j])
    elif strategy == 2:
        var = local_variance_map(lab, window)[bg[:, 0], bg[:, 1]]
        bg_pt = tuple(bg[int(np.argmin(var))])
        fg_pt = tuple(fg[int(rng.integers(len(fg)))])
    elif strategy == 3:
        fg_pt = tuple(fg[int(rng.integers(len(fg)))])
        bg_pt = tuple(bg[int(rng.integers(len(bg)))])
    else:
        raise ValueError(f"unknown endpoint strategy {strategy}")
    fg_pt = (int(fg_pt[0]), int(fg_pt[1]))
    bg_pt = (int(bg_pt[0]), int(bg_pt[1]))

    if strategy in (1, 3):
        dist = math.dist(fg_pt, bg_pt)
        cand = bg[np.sqrt(((bg - np.array(fg_pt)) ** 2).sum(1)) <= 1.5 * dist + 1e-9]
        scores = [patch_similarity(lab, fg_pt, tuple(p), window) for p in cand]
        best = cand[int(np.argmin(scores))]
        bg_pt = (int(best[0]), int(best[1]))

    fg_set = {tuple(map(int, p)) for p in fg}
    bg_set = {tuple(map(int, p)) for p in bg}
    fg_pt, bg_pt = _line_rule(fg_pt, bg_pt, fg_set, bg_set)
    return EndpointPair(fg_pt, bg_pt, strategy)


def halfwidth(n: int, N: int, k: float, beta1: float, beta2: float) -> float:
    if not 0 <= n < N:
        raise ValueError(f"halfwidth: need 0 <= n < N, got n={n}, N={N}")
    if not 10 <= k <= 15:
        raise ValueError(f"halfwidth: k={k} outside [10, 15]")
    if not -1 < beta1 < 1:
        raise ValueError(f"halfwidth: beta1={beta1} outside (-1, 1)")
    if not 1 < beta2 < 2:
        raise ValueError(f"halfwidth: beta2={beta2} outside (1, 2)")
    t = n / N
    return (k / 2.0) * (1.0 + beta1 * t * math.sin(beta2 * t * math.pi))


def _draw_open(rng: np.random.Generator, lo: float, hi: float) -> float:
    while True:
        v = float(rng.uniform(lo, hi))
        if lo < v < hi:
            return v


def expand_path(
    path: PathSkeleton,
    label: ScribbleLabel,
    k: int,
    rng: np.random.Generator | None = None,
    beta: tuple[tuple[float, float], tuple[float, float]] | None = None,
    config: SynthConfig | None = None,
) -> ConcaveRegion:
    """Union of per-point windows, clipped to the image, minus scribble-labelled pixels.

    The window at point n spans ``round(d_ul(n))`` pixels up/left and
    ``round(d_lr(n))`` down/right of the point (inclusive); each corner uses
    its own (beta1, beta2) draw.
    """
    config = config or SynthConfig()
    if beta is None:
        if rng is None:
            raise ValueError("expand_path needs rng or explicit beta")
        beta = tuple(
            (_draw_open(rng, *config.beta1_range), _draw_open(rng, *config.beta2_range)) for _ in range(2)
        )
    (b1u, b2u), (b1l, b2l) = beta
    h, w = label.shape
    mask = np.zeros((h, w), dtype=np.uint8)
    widths = []
    N = path.N
    for n, (r, c) in enumerate(path.points):
        du = halfwidth(n, N, k, b1u, b2u)
        dl = halfwidth(n, N, k, b1l, b2l)
        widths.append((du, dl))
        iu, il = int(math.floor(du + 0.5)), int(math.floor(dl + 0.5))
        mask[max(r - iu, 0):min(r + il + 1, h), max(c - iu, 0):min(c + il + 1, w)] = 1
    mask[label.labeled > 0] = 0
    if not mask.any():
        raise GenerationError("concave region is empty after removing labelled pixels")
    return ConcaveRegion(mask, path, k, beta, widths)


def generate_texture(img: np.ndarray, bg_point: Point, out_h: int, out_w: int, size: int = 15) -> np.ndarray:
    """Mirror-tile the ``size`` x ``size`` patch around ``bg_point``.

    The tile grid is anchored at the patch's own image position, so the
    texture coincides with the image inside that patch.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("texture size must be >= 1")
    H, W = img.shape[:2]
    half = size // 2
    r, c = bg_point
    r0, c0 = r - half, c - half
    rs0, rs1 = max(r0, 0), min(r0 + size, H)
    cs0, cs1 = max(c0, 0), min(c0 + size, W)
    patch = img[rs0:rs1, cs0:cs1]
    pad = [(rs0 - r0, r0 + size - rs1), (cs0 - c0, c0 + size - cs1)] + [(0, 0)] * (img.ndim - 2)
    patch = np.pad(patch, pad, mode="edge")

    def idx(n, origin):
        t = np.arange(n) - origin
        q, o = np.divmod(t, size)
        return np.where(q % 2 == 0, o, size - 1 - o)

    return patch[idx(out_h, r0)][:, idx(out_w, c0)]


def feather_and_compose(
    img: np.ndarray,
    mask: np.ndarray,
    texture: np.ndarray,
    rng: np.random.Generator | None = None,
    sigma: float | None = None,
    config: SynthConfig | None = None,
    hard: bool = False,
) -> tuple[np.ndarray, float]:
    """Alpha-blend ``texture`` into ``img`` with a blurred region mask; returns (image, sigma)."""
    if texture.shape != img.shape:
        raise ValueError(f"texture shape {texture.shape} != image shape {img.shape}")
    config = config or SynthConfig()
    m = (np.asarray(mask) > 0).astype(np.float64)
    if hard:
        alpha, sigma = m, 0.0
    else:
        if sigma is None:
            sigma = float(rng.uniform(*config.feather_sigma_range))
        alpha = np.clip(gaussian_blur(m, sigma), 0.0, 1.0)
        alpha[alpha < 1e-12] = 0.0
    a = alpha[..., None] if img.ndim == 3 else alpha
    out = np.where(a > 0, a * texture + (1.0 - a) * img, img)
    return out, sigma


def _adjacent_to(mask: np.ndarray, target: np.ndarray) -> bool:
    grown = ndimage.binary_dilation(target > 0, structure=np.ones((3, 3)))
    return bool((grown & (mask > 0)).any())


def synthesize(sample: Sample, config: SynthConfig | None = None, seed: int = 0) -> SyntheticSample:
    """One synthetic variant of ``sample``, deterministic in (sample, config, seed)."""
    config = config or SynthConfig()
    rng = np.random.default_rng(seed)
    lab = srgb_to_lab(sample.image)
    fg_scribble = sample.label.fg
    weights = np.asarray(config.strategy_weights, dtype=float)
    weights = weights / weights.sum()
    last_err = None
    for attempt in range(config.max_retries):
        strategy = int(rng.choice(3, p=weights)) + 1
        k = int(rng.integers(config.k_min, config.k_max + 1))
        try:
            ends = select_endpoints(sample.label, lab, strategy, rng, config.patch_window)
            path = generate_path(ends.bg, ends.fg)
            region = expand_path(path, sample.label, k, rng, config=config)
        except GenerationError as e:
            last_err = e
            continue
        if not _adjacent_to(region.mask, fg_scribble):
            last_err = GenerationError("concave region does not touch the foreground scribble")
            continue
        h, w = sample.label.shape
        texture = generate_texture(sample.image, ends.bg, h, w, config.patch_window)
        image, sigma = feather_and_compose(sample.image, region.mask, texture, rng, config=config)
        states = sample.label.states.copy()
        states[region.mask > 0] = State.BACKGROUND
        params = {
            "k": k,
            "beta_ul": list(region.beta[0]),
            "beta_lr": list(region.beta[1]),
            "feather_sigma": sigma,
            "fg_point": list(ends.fg),
            "bg_point": list(ends.bg),
            "path_length": path.N,
            "attempt": attempt,
        }
        return SyntheticSample(sample.id, image, ScribbleLabel(states), region.mask, strategy, params, seed)
    raise GenerationError(f"sample {sample.id}: no valid concave region after {config.max_retries} attempts"
                          + (f" ({last_err})" if last_err else ""))


def variant_seed(master_seed: int, sample_index: int, variant: int) -> int:
    ss = np.random.SeedSequence([master_seed, sample_index, variant])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def synthesize_variants(sample: Sample, config: SynthConfig, master_seed: int, sample_index: int) -> list[SyntheticSample]:
    return [synthesize(sample, config, variant_seed(master_seed, sample_index, j)) for j in range(config.n_variants)]


def config_dict(config: SynthConfig) -> dict:
    return asdict(config)
