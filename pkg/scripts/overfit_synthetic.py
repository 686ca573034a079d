"""Overfit a small FPN + DACF model on generated data and report loss and train MAE.

    python3 scripts/overfit_synthetic.py --steps 500 --width 16 --out runs/overfit
"""
import argparse
import math
import time
from pathlib import Path

import numpy as np

from cpdr.data import SynthSpec, generate_synthetic
from cpdr.network import ModelConfig, build_model, count_params, save_checkpoint
from cpdr.training import LossConfig, Schedule, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--count", type=int, default=16)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--refine", default="dacf", choices=["none", "dacf", "adf_auf"])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    data = generate_synthetic(SynthSpec(count=args.count, size=args.size, seed=args.seed))
    w = args.width
    model = build_model(ModelConfig(backbone_widths=(w, w, w, w), decoder_width=w, refine=args.refine,
                                    input_size=(args.size, args.size), seed=args.seed))
    spe = args.count // args.batch
    sched = Schedule(base_lr=args.lr, warmup_epochs=5, total_epochs=max(6, math.ceil(args.steps / spe)),
                     gamma=3.0, steps_per_epoch=spe)
    print(f"params {count_params(model)}  steps {args.steps}  epochs {sched.total_epochs}")

    start = time.perf_counter()
    log = train(model, data, sched, LossConfig(), batch_size=args.batch, seed=args.seed, max_steps=args.steps)
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.write_csv(out / "log.csv")
    save_checkpoint(model, out / "model.ckpt")
    train_mae = np.mean([np.abs(model.predict(s.image)[0] - s.mask.data[0, 0]).mean() for s in data])
    first = log.steps[min(9, len(log.steps) - 1)].total
    print(f"loss step 10 {first:.4f}  last {log.steps[-1].total:.4f}  ratio {log.steps[-1].total / first:.3f}")
    print(f"train MAE {train_mae:.4f}  time {elapsed:.0f}s  outputs in {out}")


if __name__ == "__main__":
    main()
