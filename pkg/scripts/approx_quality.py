"""Approximate vs exact attributions on 16-element inputs to a random per-scale MLP.

Desk-scale analogue of the approximation study: draws random inputs, keeps
those whose evidential score for the top class is at least ``--min-evidential``,
and reports mean relative error, LAD slope and Pearson r per (m, iterations)
cell, plus the share of subsequences visited per iteration.

    python scripts/approx_quality.py --videos 100 --seeds 0
"""

import argparse
import time

import numpy as np

from esv.analysis import EvalItem, batch_quality
from esv.models import load_model, random_model_spec
from esv.sequence import FeatureSequence


def make_items(n_items, n=16, dim=8, n_classes=5, hidden=32, n_max=8, model_seed=0, data_seed=1):
    model = load_model(random_model_spec("per-scale-mlp", n_classes, dim, hidden=hidden, n_max=n_max, seed=model_seed))
    rng = np.random.default_rng(data_seed)
    return model, [EvalItem(model, FeatureSequence(rng.normal(size=(n, dim))), None, f"x{k:03d}") for k in range(n_items)]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--videos", type=int, default=100)
    ap.add_argument("--m-grid", default="32,64,128,256,512,1024")
    ap.add_argument("--iterations-grid", default="1,2,4")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--min-evidential", type=float, default=0.05)
    args = ap.parse_args()
    ints = lambda s: [int(v) for v in s.split(",")]

    _, items = make_items(args.videos)
    t0 = time.perf_counter()
    grid = batch_quality(items, ints(args.m_grid), ints(args.iterations_grid), ints(args.seeds),
                         min_evidential=args.min_evidential)
    kept = len({r["name"] for r in next(iter(grid.values())).per_video}) if grid else 0
    print(f"{kept}/{len(items)} inputs pass the evidential filter; {time.perf_counter() - t0:.1f}s")
    print(f"{'m':>5} {'iters':>5} {'rel.err':>8} {'LAD':>6} {'r':>6} {'% subseq/iter':>14}")
    for (m, it), rep in grid.items():
        print(f"{m:>5} {it:>5} {rep.relative_error:8.4f} {rep.lad_slope:6.3f} {rep.pearson_r:6.3f} "
              f"{100 * rep.sampled_fraction:14.2f}")


if __name__ == "__main__":
    main()
