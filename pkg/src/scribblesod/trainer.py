"""Shared-weight two-branch training at desk scale.

The global integral branch (GIB) sees the original image; the boundary-aware
branch (BAB) sees a synthetic variant. Both run through the same parameters.
The first ``gib_only_fraction`` of epochs trains GIB alone.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .data import Sample, ScribbleLabel, SyntheticSample
from .losses import LossBreakdown, LossConfig, total_loss
from .metrics import EvalResult, evaluate_dataset
from .synthgen import SynthConfig, synthesize_variants


class TrainingError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 22
    gib_only_fraction: float = 28 / 55
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_min: float = 1e-5
    lr_max: float = 5e-3
    lr_peak_fraction: float = 0.25
    input_size: int = 64
    hflip_p: float = 0.5
    rotate: bool = True
    seed: int = 0
    use_bab: bool = True
    use_sc: bool = True
    width: int = 16
    workers: int = 1
    eval_every: int = 1

    def __post_init__(self):
        if not 0 < self.gib_only_fraction < 1:
            raise ValueError("gib_only_fraction must lie in (0, 1)")
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be < lr_max")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def gib_only_epochs(self) -> int:
        return int(round(self.epochs * self.gib_only_fraction))


# ---------------------------------------------------------------- model

class ToyModel:
    """3 -> w -> w -> w -> 1 stack of 3x3 convolutions with ReLU and a sigmoid head."""

    def __init__(self, width: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        chans = [3, width, width, width, 1]
        self.params: list[np.ndarray] = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            bound = math.sqrt(1.0 / (cin * 9))
            self.params.append(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
            self.params.append(rng.uniform(-bound, bound, size=(cout,)))

    @staticmethod
    def forward(params: Sequence[Variable], image: np.ndarray) -> Variable:
        x = Variable(np.moveaxis(np.asarray(image, dtype=np.float64), -1, 0) - 0.5)
        n_layers = len(params) // 2
        for i in range(n_layers):
            x = ad.conv2d(x, params[2 * i], stride=1, padding=1, bias=params[2 * i + 1])
            x = ad.relu(x) if i < n_layers - 1 else ad.sigmoid(x)
        return ad.reshape(x, x.shape[1:])

    def bind(self, requires_grad: bool = True):
        """Fresh leaf Variables over the current parameters and a forward closure using them."""
        vars_ = [Variable(p, requires_grad=requires_grad) for p in self.params]
        return (lambda image: self.forward(vars_, image)), vars_

    def __call__(self, image: np.ndarray) -> Variable:
        return self.forward([Variable(p) for p in self.params], image)

    def predict(self, image: np.ndarray) -> np.ndarray:
        return self(image).value

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- optimisation

def triangular_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warm-up from lr_min to lr_max, then linear decay back to lr_min at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    last = total_steps - 1
    if last < 2:
        return config.lr_min
    peak = min(max(int(round(config.lr_peak_fraction * last)), 1), last - 1)
    frac = step / peak if step <= peak else (last - step) / (last - peak)
    # both ends exact: lr_min at frac 0, lr_max at frac 1
    return config.lr_max if frac == 1 else config.lr_min + (config.lr_max - config.lr_min) * frac


@dataclass
class OptimizerState:
    velocity: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], 0)


def sgd_step(params: list[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState,
             lr: float, config: TrainConfig) -> None:
    """In place: v <- momentum * v + g + wd * p; p <- p - lr * v."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at step {state.step}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = config.momentum * state.velocity[i] + g + config.weight_decay * p
        state.velocity[i] = v
        params[i] = p - lr * v
    state.step += 1


# ---------------------------------------------------------------- steps

@dataclass
class TrainItem:
    sample: Sample
    variants: list[SyntheticSample] = field(default_factory=list)


def _augment(arr: np.ndarray, flip: bool, rot: int) -> np.ndarray:
    out = np.rot90(arr, rot, axes=(0, 1)) if rot else arr
    return np.ascontiguousarray(out[:, ::-1] if flip else out)


def _element(model: ToyModel, item: TrainItem, phase: str, loss_cfg: LossConfig, cfg: TrainConfig,
             flip: bool, rot: int, variant: int | None):
    s = item.sample
    image = _augment(s.image, flip, rot)
    label = ScribbleLabel(_augment(s.label.states, flip, rot))
    kwargs = {}
    if phase == "full" and variant is not None:
        v = item.variants[variant]
        kwargs = dict(synth_image=_augment(v.image, flip, rot),
                      synth_label=ScribbleLabel(_augment(v.label.states, flip, rot)),
                      concave_mask=_augment(v.concave_mask, flip, rot),
                      use_bab=cfg.use_bab, use_sc=cfg.use_sc)
    fn, vars_ = model.bind()
    loss, bd = total_loss(fn, image, label, loss_cfg, **kwargs)
    ad.backward(loss)
    return [v.grad if v.grad is not None else np.zeros_like(v.value) for v in vars_], bd


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    out = LossBreakdown()
    for name in out.__dataclass_fields__:
        setattr(out, name, float(np.mean([getattr(p, name) for p in parts])))
    return out


def train_step(model: ToyModel, batch: Sequence[TrainItem], phase: str, loss_cfg: LossConfig,
               cfg: TrainConfig, rng: np.random.Generator, state: OptimizerState, lr: float) -> LossBreakdown:
    """One SGD step on the batch mean of the per-element objective.

    Per-element gradients are reduced in batch order, so the result does not
    depend on ``cfg.workers``.
    """
    if phase not in ("gib_only", "full"):
        raise ValueError(f"unknown phase {phase!r}")
    branches = phase == "full" and (cfg.use_bab or cfg.use_sc)
    plans = []
    for item in batch:
        flip = bool(rng.random() < cfg.hflip_p)
        rot = int(rng.integers(4)) if cfg.rotate else 0
        variant = None
        if branches:
            if not item.variants:
                raise TrainingError(f"sample {item.sample.id} has no synthetic variants for the full phase")
            variant = int(rng.integers(len(item.variants)))
        plans.append((item, flip, rot, variant))
    phase_eff = "full" if branches else "gib_only"

    def run(plan):
        item, flip, rot, variant = plan
        return _element(model, item, phase_eff, loss_cfg, cfg, flip, rot, variant)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, plans))
    else:
        results = [run(p) for p in plans]
    n = len(results)
    grads = [sum(r[0][i] for r in results) / n for i in range(len(model.params))]
    sgd_step(model.params, grads, state, lr, cfg)
    return _mean_breakdown([r[1] for r in results])


# ---------------------------------------------------------------- report

@dataclass
class TrainReport:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    final: dict | None = None
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def lr_trace(self) -> list[float]:
        return [s["lr"] for s in self.steps]

    def to_json(self) -> str:
        # wall time is left out so identical runs serialise identically
        d = {"config": self.config, "steps": self.steps, "epochs": self.epochs, "final": self.final}
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        d = json.loads(text)
        return cls(d["steps"], d["epochs"], d["final"], d["config"])


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"SSODCKPT"
_VERSION = 1


def save_checkpoint(path, model: ToyModel, state: OptimizerState, epoch: int, meta: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, shape table, little-endian float64 payload."""
    tensors = [("param", p) for p in model.params] + [("velocity", v) for v in state.velocity]
    header = json.dumps({"step": state.step, "epoch": epoch, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for kind, t in tensors:
            name = kind.encode()
            fh.write(struct.pack("<B", len(name)) + name)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[list[np.ndarray], OptimizerState, int, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        header = json.loads(data[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<B", data, off)
            name = data[off + 1:off + 1 + nlen].decode()
            off += 1 + nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
            off += 1 + 4 * ndim
            table.append((name, shape))
        params, vel = [], []
        for name, shape in table:
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            (params if name == "param" else vel).append(arr)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    return params, OptimizerState(vel, int(header["step"])), int(header["epoch"]), header.get("meta", {})


# ---------------------------------------------------------------- loop

def evaluate_model(model: ToyModel, samples: Sequence[Sample]) -> EvalResult:
    return evaluate_dataset([model.predict(s.image) for s in samples], [s.gt for s in samples])


def precompute_variants(samples: Sequence[Sample], synth_cfg: SynthConfig, seed: int) -> list[list[SyntheticSample]]:
    return [synthesize_variants(s, synth_cfg, seed, i) for i, s in enumerate(samples)]


def train(
    train_samples: Sequence[Sample],
    train_cfg: TrainConfig | None = None,
    loss_cfg: LossConfig | None = None,
    synth_cfg: SynthConfig | None = None,
    test_samples: Sequence[Sample] = (),
    variants: Sequence[Sequence[SyntheticSample]] | None = None,
    resume: str | None = None,
    checkpoint_dir: str | None = None,
    log=None,
) -> tuple[ToyModel, TrainReport]:
    """Two-phase training; evaluates on ``test_samples`` every ``eval_every`` epochs.

    Randomness for epoch e comes from a generator seeded with (seed, e), so a
    run resumed from an epoch checkpoint continues exactly as the original.
    """
    cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    synth_cfg = synth_cfg or SynthConfig()
    if not train_samples:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    needs_variants = cfg.use_bab or cfg.use_sc
    if variants is None:
        variants = precompute_variants(train_samples, synth_cfg, cfg.seed) if needs_variants \
            else [[] for _ in train_samples]
    items = [TrainItem(s, list(v)) for s, v in zip(train_samples, variants)]

    model = ToyModel(cfg.width, seed=cfg.seed)
    state = OptimizerState.zeros_like(model.params)
    start_epoch = 0
    if resume is not None:
        params, state, last_epoch, _ = load_checkpoint(resume)
        model.params = params
        start_epoch = last_epoch + 1

    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    report = TrainReport(config={"train": asdict(cfg), "loss": asdict(loss_cfg), "synth": asdict(synth_cfg)})
    for epoch in range(start_epoch, cfg.epochs):
        phase = "gib_only" if epoch < cfg.gib_only_epochs else "full"
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(items))
        for b in range(steps_per_epoch):
            batch = [items[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = triangular_lr(state.step, total_steps, cfg)
            step = state.step
            bd = train_step(model, batch, phase, loss_cfg, cfg, rng, state, lr)
            report.steps.append({"step": step, "epoch": epoch, "phase": phase, "lr": lr, **bd.as_dict()})
        if test_samples and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            res = evaluate_model(model, test_samples)
            report.epochs.append({"epoch": epoch, **res.row()})
            if log:
                log(f"epoch {epoch} phase={phase} loss={report.steps[-1]['total']:.4f} "
                    f"F={res.mean_fbeta:.4f} S={res.s_measure:.4f} MAE={res.mae:.4f}")
        if checkpoint_dir is not None:
            save_checkpoint(f"{checkpoint_dir}/epoch_{epoch:03d}.ckpt", model, state, epoch)
    if test_samples:
        report.final = report.epochs[-1] if report.epochs else evaluate_model(model, test_samples).row()
    report.wall_time = time.perf_counter() - t0
    return model, report
