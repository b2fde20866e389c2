"""Command-line entry point: ``scribblesod {gen-toy,synth,train,eval,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
validation failure. Verbosity comes from ``SCRIBBLESOD_LOG_LEVEL``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace

import numpy as np

from . import data as D
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .imaging import ImageIOError, load_png, save_png
from .metrics import MetricError, evaluate, evaluate_dataset
from .synthgen import synthesize_variants
from .trainer import CheckpointError, TrainingError, train

log = logging.getLogger("scribblesod")

CONFIG_ECHO = "config.resolved.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _prepare_out(path: str, cfg: RunConfig) -> str:
    try:
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, CONFIG_ECHO), "w", encoding="utf-8") as fh:
            fh.write(dump_config(cfg))
    except OSError as e:
        raise RuntimeError(f"cannot write to {path}: {e.strerror}") from None
    return path


def _resolve(args, run: dict) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "config", None):
        cfg = load_config(args.config, overrides)
    else:
        cfg = parse_config("", "<defaults>", overrides)
    cfg.run = {**cfg.run, **run}
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen_toy(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    n_test = args.n // 5 if args.n_test is None else args.n_test
    if not 0 <= n_test < args.n:
        raise UsageError(f"--n-test must lie in [0, {args.n}), got {n_test}")
    cfg = _resolve(args, {"command": "gen-toy", "n": args.n, "seed": args.seed, "size": args.size, "n_test": n_test})
    out = _prepare_out(args.out, cfg)
    samples = D.generate_toy_dataset(args.n, args.size, args.seed)
    manifest = D.write_toy_dataset(samples, out, n_test=n_test)
    print(f"wrote {len(manifest.entries)} samples ({n_test} test) to {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _resolve(args, {"command": "synth", "manifest": args.manifest, "seed": args.seed})
    if args.variants is not None:
        cfg.synth = replace(cfg.synth, n_variants=args.variants)
    manifest = D.read_manifest(args.manifest)
    out = _prepare_out(args.out, cfg)
    entries, failures = [], 0
    with open(os.path.join(out, "errors.jsonl"), "w", encoding="utf-8") as err_fh:
        for idx, entry in enumerate(manifest.entries):
            rel = lambda p: os.path.relpath(manifest.resolve(p), out) if p else None
            new = D.ManifestEntry(entry.id, rel(entry.image), rel(entry.label), [], rel(entry.gt), entry.split)
            try:
                sample = D.load_sample(manifest, entry)
                variants = synthesize_variants(sample, cfg.synth, args.seed, idx)
            except (D.GenerationError, D.FormatError, ImageIOError) as e:
                failures += 1
                err_fh.write(json.dumps({"id": entry.id, "error": str(e)}) + "\n")
                log.warning("%s: %s", entry.id, e)
                entries.append(new)
                continue
            for j, v in enumerate(variants):
                img_rel = os.path.join("synthetic", entry.id, f"variant_{j}.png")
                save_png(v.image, os.path.join(out, img_rel))
                D.save_scribble(v.label, os.path.join(out, D.synthetic_companion(img_rel, "label")))
                D.save_mask(v.concave_mask, os.path.join(out, D.synthetic_companion(img_rel, "mask")))
                prov = {"base_id": v.base_id, "variant": j, "strategy": v.strategy, "seed": v.seed,
                        "params": v.params}
                with open(os.path.join(out, D.synthetic_companion(img_rel, "provenance")), "w",
                          encoding="utf-8") as fh:
                    json.dump(prov, fh, sort_keys=True, default=_json_default)
                new.synthetic.append(img_rel)
            entries.append(new)
            log.info("%s: %d variants", entry.id, len(variants))
    D.write_manifest(D.DatasetManifest(entries, out), os.path.join(out, "manifest.jsonl"))
    n = len(manifest.entries)
    print(f"synthesised {n - failures}/{n} images x {cfg.synth.n_variants} variants; {failures} failures")
    return 2 if n and failures == n else 0


def _load_split(manifest: D.DatasetManifest, split: str):
    samples, variants = [], []
    for e in manifest.entries:
        if e.split != split:
            continue
        samples.append(D.load_sample(manifest, e))
        variants.append([D.load_synthetic(manifest, e, j) for j in range(len(e.synthetic))])
    return samples, variants


def cmd_train(args) -> int:
    run = {"command": "train", "data": args.data, "baseline": bool(args.baseline)}
    if args.resume:
        run["resume"] = args.resume
    cfg = _resolve(args, run)
    if args.baseline:
        cfg.train = replace(cfg.train, use_bab=False, use_sc=False)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    manifest_path = os.path.join(args.data, "manifest.jsonl")
    if not os.path.isfile(manifest_path):
        raise RuntimeError(f"no manifest.jsonl in data directory {args.data}")
    manifest = D.read_manifest(manifest_path)
    train_samples, variants = _load_split(manifest, "train")
    test_samples, _ = _load_split(manifest, "test")
    test_samples = [s for s in test_samples if s.gt is not None]
    if not train_samples:
        raise RuntimeError(f"{manifest_path}: no training samples")
    needs = cfg.train.use_bab or cfg.train.use_sc
    # variants from a previous ``synth`` run are used when present, otherwise generated in memory
    if not needs:
        variants = [[] for _ in train_samples]
    elif not all(variants):
        variants = None

    out = _prepare_out(args.out, cfg)
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    model, report = train(train_samples, cfg.train, cfg.loss, cfg.synth, test_samples, variants,
                          resume=args.resume, checkpoint_dir=ckpt_dir, log=log.info)
    shutil.copyfile(os.path.join(ckpt_dir, f"epoch_{cfg.train.epochs - 1:03d}.ckpt"), os.path.join(out, "final.ckpt"))
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    # paired folders ready for ``scribblesod eval``
    for s in test_samples:
        save_png(model.predict(s.image), os.path.join(out, "eval", "pred", f"{s.id}.png"))
        D.save_mask(s.gt, os.path.join(out, "eval", "gt", f"{s.id}.png"))
    if report.final:
        f = report.final
        print(f"final F={f['mean_fbeta']:.4f} S={f['s_measure']:.4f} MAE={f['mae']:.4f} E={f['e_measure']:.4f}")
    print(f"{len(report.steps)} steps; report and checkpoints in {out}")
    return 0


def _png_names(path: str) -> set[str]:
    if not os.path.isdir(path):
        raise RuntimeError(f"not a directory: {path}")
    return {f for f in os.listdir(path) if f.lower().endswith(".png")}


def cmd_eval(args) -> int:
    cfg = _resolve(args, {"command": "eval", "pred": args.pred, "gt": args.gt})
    preds, gts = _png_names(args.pred), _png_names(args.gt)
    if not preds and not gts:
        raise RuntimeError("no PNG files in either directory")
    unmatched = sorted(preds ^ gts)
    if unmatched:
        raise RuntimeError("unmatched filenames: " + ", ".join(unmatched))
    _prepare_out(os.path.dirname(os.path.abspath(args.out)), cfg)
    names = sorted(preds)
    p_maps, g_maps, rows = [], [], []
    for name in names:
        p = load_png(os.path.join(args.pred, name)).astype(np.float64)
        if p.ndim == 3:
            p = p.mean(axis=2)
        p_maps.append(p)
        g_maps.append(D.load_mask(os.path.join(args.gt, name)))
        rows.append({"id": os.path.splitext(name)[0], **evaluate(p_maps[-1], g_maps[-1]).row()})
    agg = evaluate_dataset(p_maps, g_maps)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in rows + [{"id": "__mean__", **agg.row()}]:
            fh.write(json.dumps(r, sort_keys=True, allow_nan=True) + "\n")
    print(f"mean over {agg.n_images} images: S={agg.s_measure:.4f} F={agg.mean_fbeta:.4f} "
          f"MAE={agg.mae:.4f} E={agg.e_measure:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    reports = run_suite(args.seed, args.instances, inject_bug=args.inject_bug, log=print)
    failed = [r.op_name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} ops passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 2 if failed else 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scribblesod", description="Scribble-supervised saliency toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_opts(sp):
        sp.add_argument("--config", help="plain-text run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    g = sub.add_parser("gen-toy", help="write a synthetic toy corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=250)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--n-test", type=int, default=None, help="held-out count (default n // 5)")
    config_opts(g)
    g.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("synth", help="generate synthetic concave-region variants")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variants", type=int, default=None, help="variants per image (default from config, 10)")
    s.add_argument("--seed", type=int, default=0)
    config_opts(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the toy model")
    t.add_argument("--data", required=True, help="directory holding manifest.jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--baseline", action="store_true", help="GIB-only training (no BAB, no SC)")
    t.add_argument("--resume", help="epoch checkpoint to continue from")
    t.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    config_opts(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score prediction PNGs against ground-truth masks")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="JSON-lines output, one row per image plus __mean__")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--inject-bug", action="store_true", help="negative control with a wrong derivative")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    level = os.environ.get("SCRIBBLESOD_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError, ValueError, D.ManifestError, D.FormatError, ImageIOError, MetricError,
            TrainingError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
