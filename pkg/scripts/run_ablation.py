"""Paired baseline vs. full-framework runs on the toy corpus.

    python scripts/run_ablation.py --pairs 5 --epochs 22 --out ablation.json
"""
import argparse
import json
import time

from scribblesod.data import generate_toy_dataset
from scribblesod.losses import LossConfig
from scribblesod.synthgen import SynthConfig
from scribblesod.trainer import TrainConfig, precompute_variants, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--pairs", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=22)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    data = generate_toy_dataset(args.n_train + args.n_test, args.size, args.data_seed)
    tr, te = data[:args.n_train], data[args.n_train:]
    synth = SynthConfig()
    variants = precompute_variants(tr, synth, args.data_seed)
    rows = []
    for seed in range(args.pairs):
        res = {}
        for name, flags in (("baseline", False), ("full", True)):
            cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=seed, use_bab=flags, use_sc=flags,
                              eval_every=args.epochs)
            t0 = time.perf_counter()
            _, rep = train(tr, cfg, LossConfig(), synth, te, variants if flags else None)
            res[name] = rep.final
            print(f"seed={seed} {name:8s} F={rep.final['mean_fbeta']:.4f} S={rep.final['s_measure']:.4f} "
                  f"MAE={rep.final['mae']:.4f} E={rep.final['e_measure']:.4f} ({time.perf_counter() - t0:.0f}s)",
                  flush=True)
        rows.append({"seed": seed, **res})
    wins = sum(r["full"]["mean_fbeta"] > r["baseline"]["mean_fbeta"] for r in rows)
    gain = sum(r["full"]["mean_fbeta"] - r["baseline"]["mean_fbeta"] for r in rows) / len(rows)
    print(f"full > baseline in {wins}/{len(rows)} pairs; mean F gain {gain:+.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"args": vars(args), "pairs": rows, "wins": wins, "mean_gain": gain}, fh, indent=1)


if __name__ == "__main__":
    main()
