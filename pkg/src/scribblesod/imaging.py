"""Image primitives: PNG I/O, sRGB/CIELAB conversion, thinning, blur, flips and
local-window Lab statistics.

Images are float64 arrays in [0, 1], shaped [H, W, 3] (RGB) or [H, W] (gray).
Binary masks are uint8 arrays with values in {0, 1}.
"""
from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

# D65 reference white
_WHITE = np.array([0.95047, 1.0, 1.08883])
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_DELTA = 6.0 / 29.0


class ImageIOError(IOError):
    pass


def load_png(path) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ImageIOError(f"{path}: no such file")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(f"{path}: not a PNG file")
            im.load()
            mode = im.mode
            if mode in ("1", "L", "P"):
                arr = np.asarray(im.convert("L"))
            elif mode in ("RGB", "RGBA"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise ImageIOError(f"{path}: unsupported PNG mode {mode!r} (need 8-bit gray or RGB)")
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        if isinstance(e, ImageIOError):
            raise
        raise ImageIOError(f"{path}: malformed PNG ({e})") from None
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    path = os.fspath(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 2:
        mode = "L"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        mode = "RGB"
    else:
        raise ImageIOError(f"{path}: cannot save array of shape {arr.shape}")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    # fixed encoder settings keep output bytes reproducible
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    rgb = np.asarray(img, dtype=np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB2XYZ.T / _WHITE
    f = np.where(xyz > _DELTA ** 3, np.cbrt(xyz), xyz / (3 * _DELTA ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab: np.ndarray) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > _DELTA, f ** 3, 3 * _DELTA ** 2 * (f - 4.0 / 29.0)) * _WHITE
    lin = xyz @ _XYZ2RGB.T
    lin = np.clip(lin, 0.0, None)
    return np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)


def _neighbours(img: np.ndarray) -> list[np.ndarray]:
    """P2..P9 (N, NE, E, SE, S, SW, W, NW) for every pixel, zero-padded."""
    p = np.pad(img, 1)
    h, w = img.shape
    return [
        p[0:h, 1:w + 1], p[0:h, 2:w + 2], p[1:h + 1, 2:w + 2], p[2:h + 2, 2:w + 2],
        p[2:h + 2, 1:w + 1], p[2:h + 2, 0:w], p[1:h + 1, 0:w], p[0:h, 0:w],
    ]


def _zhang_suen(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.uint8).copy()
    while True:
        changed = False
        for step in (0, 1):
            n = _neighbours(img)
            p2, p3, p4, p5, p6, p7, p8, p9 = n
            b = sum(x.astype(np.int32) for x in n)
            seq = n + [p2]
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32) for i in range(8))
            if step == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            delete = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if delete.any():
                img[delete] = 0
                changed = True
        if not changed:
            return img


def _is_simple(win: np.ndarray) -> bool:
    """Whether removing the centre of a 3x3 window keeps its 8-neighbours 8-connected."""
    pts = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1) and win[r, c]]
    if len(pts) <= 1:
        return False  # end point or isolated: keep
    seen = {pts[0]}
    stack = [pts[0]]
    while stack:
        r, c = stack.pop()
        for q in pts:
            if q not in seen and max(abs(q[0] - r), abs(q[1] - c)) == 1:
                seen.add(q)
                stack.append(q)
    return len(seen) == len(pts)


def _remove_blocks(img: np.ndarray) -> np.ndarray:
    # Zhang-Suen can leave 2x2 blocks on diagonal staircases; drop simple pixels in them
    img = img.copy()
    h, w = img.shape
    changed = True
    while changed:
        changed = False
        blocks = img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]
        for r, c in zip(*np.nonzero(blocks)):
            if not (img[r, c] and img[r + 1, c] and img[r, c + 1] and img[r + 1, c + 1]):
                continue
            for rr, cc in ((r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)):
                win = np.zeros((3, 3), dtype=np.uint8)
                r0, c0 = max(rr - 1, 0), max(cc - 1, 0)
                sub = img[r0:rr + 2, c0:cc + 2]
                win[r0 - rr + 1:r0 - rr + 1 + sub.shape[0], c0 - cc + 1:c0 - cc + 1 + sub.shape[1]] = sub
                if _is_simple(win):
                    img[rr, cc] = 0
                    changed = True
                    break
    return img


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    from scipy import ndimage
    return ndimage.label(mask, structure=np.ones((3, 3), dtype=int))


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning followed by removal of residual 2x2 blocks.

    Components that thinning would erase entirely (2x2 squares) keep the
    pixel nearest their centroid.
    """
    m = (np.asarray(mask) > 0).astype(np.uint8)
    if not m.any():
        return m
    sk = _remove_blocks(_zhang_suen(m))
    labels, n = label_components(m)
    for k in range(1, n + 1):
        comp = labels == k
        if not (sk & comp).any():
            pts = np.argwhere(comp)
            c = pts.mean(axis=0)
            r, cc = pts[np.argmin(((pts - c) ** 2).sum(axis=1))]
            sk[r, cc] = 1
    return sk


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge-replicate padding, radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ValueError(f"gaussian_blur: sigma must be > 0, got {sigma}")
    img = np.asarray(img, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="edge")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, wt in enumerate(k):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(i, i + n)
            acc += wt * p[tuple(sl)]
        out = acc
    return out


def flip(img: np.ndarray, mode: str) -> np.ndarray:
    if mode == "horizontal":
        return np.asarray(img)[:, ::-1].copy()
    if mode == "vertical":
        return np.asarray(img)[::-1].copy()
    if mode == "both":
        return np.asarray(img)[::-1, ::-1].copy()
    raise ValueError(f"unknown flip mode {mode!r}")


def _window(shape, center, window: int) -> tuple[slice, slice]:
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    h = window // 2
    r, c = center
    return slice(max(r - h, 0), min(r + h + 1, shape[0])), slice(max(c - h, 0), min(c + h + 1, shape[1]))


def local_patch_variance(lab: np.ndarray, center, window: int = 15) -> float:
    """Sum over the three Lab channels of the variance inside the clipped window."""
    rs, cs = _window(lab.shape, center, window)
    patch = lab[rs, cs].reshape(-1, lab.shape[2])
    return float(patch.var(axis=0).sum())


def local_variance_map(lab: np.ndarray, window: int = 15) -> np.ndarray:
    """``local_patch_variance`` at every pixel, via box sums."""
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    h, w, _ = lab.shape
    half = window // 2

    def box(a):
        s = np.zeros((h + 1, w + 1) + a.shape[2:])
        s[1:, 1:] = a.cumsum(0).cumsum(1)
        r0 = np.clip(np.arange(h) - half, 0, h)
        r1 = np.clip(np.arange(h) + half + 1, 0, h)
        c0 = np.clip(np.arange(w) - half, 0, w)
        c1 = np.clip(np.arange(w) + half + 1, 0, w)
        return (s[r1][:, c1] - s[r0][:, c1] - s[r1][:, c0] + s[r0][:, c0])

    n = box(np.ones((h, w)))[..., None]
    m1 = box(lab) / n
    m2 = box(lab * lab) / n
    return np.clip(m2 - m1 * m1, 0.0, None).sum(axis=-1)


def patch_similarity(lab: np.ndarray, center_a, center_b, window: int = 15) -> float:
    """Mean squared Lab distance between two aligned patches (offsets valid for both)."""
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    h = window // 2
    H, W = lab.shape[:2]
    (ra, ca), (rb, cb) = center_a, center_b
    dy0 = max(-h, -ra, -rb)
    dy1 = min(h, H - 1 - ra, H - 1 - rb)
    dx0 = max(-h, -ca, -cb)
    dx1 = min(h, W - 1 - ca, W - 1 - cb)
    pa = lab[ra + dy0:ra + dy1 + 1, ca + dx0:ca + dx1 + 1]
    pb = lab[rb + dy0:rb + dy1 + 1, cb + dx0:cb + dx1 + 1]
    return float(((pa - pb) ** 2).sum(axis=-1).mean())
