"""Scribble-annotated samples, the toy corpus and manifest I/O."""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .imaging import ImageIOError, load_png, save_png, skeletonize, to_uint8


class FormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class ManifestError(IOError):
    pass


class State(IntEnum):
    UNKNOWN = 0
    FOREGROUND = 1
    BACKGROUND = 2


# PNG encoding of scribble states
_STATE_TO_PIXEL = {State.UNKNOWN: 0, State.BACKGROUND: 128, State.FOREGROUND: 255}


@dataclass
class ScribbleLabel:
    states: np.ndarray  # int8 [H, W] of State values

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int8)

    @classmethod
    def from_masks(cls, fg: np.ndarray, bg: np.ndarray) -> "ScribbleLabel":
        s = np.zeros(np.shape(fg), dtype=np.int8)
        s[np.asarray(bg) > 0] = State.BACKGROUND
        s[np.asarray(fg) > 0] = State.FOREGROUND
        return cls(s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.states.shape

    @property
    def fg(self) -> np.ndarray:
        return (self.states == State.FOREGROUND).astype(np.uint8)

    @property
    def bg(self) -> np.ndarray:
        return (self.states == State.BACKGROUND).astype(np.uint8)

    @property
    def labeled(self) -> np.ndarray:
        return (self.states != State.UNKNOWN).astype(np.uint8)

    def is_trainable(self) -> bool:
        return bool(self.fg.any() and self.bg.any())

    def copy(self) -> "ScribbleLabel":
        return ScribbleLabel(self.states.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, ScribbleLabel) and np.array_equal(self.states, other.states)


def encode_scribble(label: ScribbleLabel) -> np.ndarray:
    out = np.zeros(label.shape, dtype=np.uint8)
    for state, px in _STATE_TO_PIXEL.items():
        out[label.states == state] = px
    return out


def decode_scribble(pixels: np.ndarray, source: str = "<array>") -> ScribbleLabel:
    px = np.asarray(pixels)
    bad = ~np.isin(px, (0, 128, 255))
    if bad.any():
        value = int(px[bad][0])
        raise FormatError(f"{source}: invalid scribble pixel value {value} (allowed: 0, 128, 255)")
    s = np.zeros(px.shape, dtype=np.int8)
    s[px == 128] = State.BACKGROUND
    s[px == 255] = State.FOREGROUND
    return ScribbleLabel(s)


def load_scribble(path) -> ScribbleLabel:
    arr = load_png(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: scribble must be a grayscale PNG")
    return decode_scribble(np.rint(arr * 255).astype(np.int32), str(path))


def save_scribble(label: ScribbleLabel, path) -> None:
    save_png(encode_scribble(label), path)


def load_mask(path) -> np.ndarray:
    arr = load_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr >= 0.5).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    save_png((np.asarray(mask) > 0).astype(np.uint8) * 255, path)


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    label: ScribbleLabel
    id: str
    gt: np.ndarray | None = None  # pixel-wise ground truth, when available

    def __post_init__(self):
        if self.image.shape[:2] != self.label.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape[:2]} and label {self.label.shape} differ")


@dataclass
class SyntheticSample:
    base_id: str
    image: np.ndarray
    label: ScribbleLabel
    concave_mask: np.ndarray
    strategy: int
    params: dict
    seed: int


# ---------------------------------------------------------------- toy corpus

def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """A star-shaped blob with a few lobes, giving concave boundary stretches."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r0 = rng.uniform(0.14, 0.26) * size
    cy = rng.uniform(r0 + 6, size - r0 - 6)
    cx = rng.uniform(r0 + 6, size - r0 - 6)
    theta = np.arctan2(yy - cy, xx - cx)
    rad = np.ones_like(theta)
    for m in rng.choice(np.arange(2, 6), size=2, replace=False):
        rad += rng.uniform(0.2, 0.4) * np.sin(m * theta + rng.uniform(0, 2 * np.pi))
    rad = np.maximum(rad, 0.2)
    dist = np.hypot(yy - cy, xx - cx)
    return (dist <= r0 * rad).astype(np.uint8)


def _background(rng: np.random.Generator, size: int, base: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    fy, fx = rng.uniform(0.1, 0.5, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(fy * yy + fx * xx + phase)
    amp = rng.uniform(0.04, 0.10)
    for c in range(3):
        img[..., c] = base[c] + amp * wave
    img += rng.normal(0.0, 0.03, size=img.shape)
    return img


def _toy_one(rng: np.random.Generator, size: int, idx: int) -> tuple[Sample, np.ndarray]:
    for _ in range(20):
        n_blobs = int(rng.integers(1, 3))
        gt = np.zeros((size, size), dtype=np.uint8)
        for _ in range(n_blobs):
            gt |= _blob_mask(rng, size)
        frac = gt.mean()
        if not 0.05 <= frac <= 0.40:
            continue
        # salient objects are saturated; backgrounds are near-neutral
        bg_color = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=3)
        fg_color = np.asarray(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 0.9), rng.uniform(0.55, 0.95)))
        if np.linalg.norm(fg_color - bg_color) < 0.35:
            continue
        img = _background(rng, size, bg_color)
        # shading fades toward the rim, away from the skeleton scribble
        depth = np.minimum(ndimage.distance_transform_edt(gt) / 4.0, 1.0)[..., None]
        rim = bg_color + 0.45 * (fg_color - bg_color)
        shade = rng.normal(0.0, 0.03, size=(size, size, 3)) + rim + depth * (fg_color - rim)
        img = np.where(gt[..., None] > 0, shade, img)
        img = np.clip(img, 0.0, 1.0)
        # quantise so PNG round-trips are exact
        img = to_uint8(img).astype(np.float64) / 255.0

        fg = skeletonize(gt)
        near = ndimage.binary_dilation(gt, iterations=5, structure=np.ones((3, 3)))
        band = np.zeros_like(gt)
        width = 5
        band[:width] = band[-width:] = 1
        band[:, :width] = band[:, -width:] = 1
        band = band & ~near
        if band.sum() < 10:
            continue
        bg = skeletonize(band)
        if not fg.any() or not bg.any():
            continue
        label = ScribbleLabel.from_masks(fg, bg)
        return Sample(img, label, f"toy_{idx:05d}", gt.copy()), gt
    raise GenerationError(f"toy sample {idx}: degenerate geometry after 20 attempts")


def generate_toy_dataset(n_samples: int, image_size: int = 64, seed: int = 0) -> list[Sample]:
    """Blobs on a textured background with skeleton scribbles and exact ground truth.

    Each sample draws from its own generator seeded by (seed, index), so the
    result does not depend on generation order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    out = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        sample, _ = _toy_one(rng, image_size, i)
        out.append(sample)
    return out


# ---------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    id: str
    image: str
    label: str
    synthetic: list[str] = field(default_factory=list)
    gt: str | None = None
    split: str = "train"

    def to_json(self) -> dict:
        d = {"id": self.id, "image": self.image, "label": self.label, "synthetic": list(self.synthetic)}
        if self.gt is not None:
            d["gt"] = self.gt
        d["split"] = self.split
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: str = "."  # directory relative paths resolve against

    def resolve(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def referenced_paths(self) -> list[str]:
        paths = []
        for e in self.entries:
            paths += [e.image, e.label] + list(e.synthetic)
            paths += [synthetic_companion(p, "label") for p in e.synthetic]
            paths += [synthetic_companion(p, "mask") for p in e.synthetic]
            if e.gt is not None:
                paths.append(e.gt)
        return paths

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.entries == other.entries


def synthetic_companion(image_path: str, kind: str) -> str:
    """``synthetic/<id>/variant_<j>.png`` -> ``variant_<j>_{label,mask}.png`` / ``.json``."""
    stem, _ = os.path.splitext(image_path)
    if kind == "provenance":
        return stem + ".json"
    return f"{stem}_{kind}.png"


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ManifestError(f"{path}: manifest not found")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                entries.append(ManifestEntry(
                    id=str(d["id"]), image=d["image"], label=d["label"],
                    synthetic=list(d.get("synthetic", [])), gt=d.get("gt"), split=d.get("split", "train"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ManifestError(f"{path}:{lineno}: malformed manifest record ({e})") from None
    manifest = DatasetManifest(entries, root=os.path.dirname(os.path.abspath(path)))
    if check_paths:
        missing = [p for p in manifest.referenced_paths() if not os.path.exists(manifest.resolve(p))]
        if missing:
            raise ManifestError(f"{path}: missing referenced files: " + ", ".join(missing))
    return manifest


def load_sample(manifest: DatasetManifest, entry: ManifestEntry) -> Sample:
    image = load_png(manifest.resolve(entry.image))
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    label = load_scribble(manifest.resolve(entry.label))
    gt = load_mask(manifest.resolve(entry.gt)) if entry.gt else None
    return Sample(image, label, entry.id, gt)


def load_synthetic(manifest: DatasetManifest, entry: ManifestEntry, j: int) -> SyntheticSample:
    p = entry.synthetic[j]
    image = load_png(manifest.resolve(p))
    label = load_scribble(manifest.resolve(synthetic_companion(p, "label")))
    mask = load_mask(manifest.resolve(synthetic_companion(p, "mask")))
    prov_path = manifest.resolve(synthetic_companion(p, "provenance"))
    prov = {}
    if os.path.exists(prov_path):
        with open(prov_path, encoding="utf-8") as fh:
            prov = json.load(fh)
    return SyntheticSample(entry.id, image, label, mask, int(prov.get("strategy", 0)),
                           prov.get("params", {}), int(prov.get("seed", 0)))


def write_toy_dataset(samples: list[Sample], out_dir, n_test: int = 0) -> DatasetManifest:
    """Write ``images/``, ``scribbles/``, ``gt/`` and ``manifest.jsonl``; last ``n_test`` are the test split."""
    out_dir = os.fspath(out_dir)
    entries = []
    for i, s in enumerate(samples):
        img_rel = os.path.join("images", f"{s.id}.png")
        lab_rel = os.path.join("scribbles", f"{s.id}.png")
        save_png(s.image, os.path.join(out_dir, img_rel))
        save_scribble(s.label, os.path.join(out_dir, lab_rel))
        gt_rel = None
        if s.gt is not None:
            gt_rel = os.path.join("gt", f"{s.id}.png")
            save_mask(s.gt, os.path.join(out_dir, gt_rel))
        split = "test" if i >= len(samples) - n_test else "train"
        entries.append(ManifestEntry(s.id, img_rel, lab_rel, [], gt_rel, split))
    manifest = DatasetManifest(entries, root=os.path.abspath(out_dir))
    write_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest


def validate_synthetic(base: Sample, syn: SyntheticSample, feather_radius: int | None = None) -> list[str]:
    """Check the synthetic-variant invariants; returns a list of violations (empty when valid)."""
    problems = []
    mask = np.asarray(syn.concave_mask) > 0
    if (mask & (base.label.fg > 0)).any():
        problems.append("concave mask overlaps foreground scribble")
    if (mask & (base.label.bg > 0)).any():
        problems.append("concave mask overlaps background scribble")
    expected = base.label.states.copy()
    expected[mask] = State.BACKGROUND
    if not np.array_equal(expected, syn.label.states):
        problems.append("synthetic label differs from base label with concave region set to background")
    if feather_radius is None:
        sigma = syn.params.get("feather_sigma")
        feather_radius = int(np.ceil(3 * sigma)) if sigma else 0
    support = ndimage.binary_dilation(mask, iterations=feather_radius, structure=np.ones((3, 3))) \
        if feather_radius > 0 else mask
    outside = ~support
    if not np.array_equal(base.image[outside], syn.image[outside]):
        problems.append("image differs from base outside the feathered concave region")
    return problems


def validate_manifest(manifest: DatasetManifest) -> dict[str, list[str]]:
    """Run :func:`validate_synthetic` over every variant in the manifest."""
    report: dict[str, list[str]] = {}
    for entry in manifest.entries:
        if not entry.synthetic:
            continue
        base = load_sample(manifest, entry)
        for j in range(len(entry.synthetic)):
            try:
                syn = load_synthetic(manifest, entry, j)
            except (ImageIOError, FormatError) as e:
                report[entry.synthetic[j]] = [str(e)]
                continue
            problems = validate_synthetic(base, syn)
            if problems:
                report[entry.synthetic[j]] = problems
    return report
