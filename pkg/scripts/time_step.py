"""Median wall time of one training step per objective variant.

    python scripts/time_step.py [--steps 200] [--hidden 32] [--batch 8]
"""

import argparse
import statistics
import time

from selfflow import ablation as A
from selfflow import model as M
from selfflow import runner as R
from selfflow.flow import TokenBatch
from selfflow.objectives import TrainState, train_step
from selfflow.rng import stream

def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--batch", type=int, default=8)
    args = p.parse_args()
    R.tune_allocator()
    base = A.desk_config()
    model = M.TransformerConfig(**{**base.model.to_dict(), "hidden": args.hidden})
    base = base.with_overrides(model=model, train={"batch_size": args.batch})
    _, (xt, yt), _ = R.datasets(base.dataset, base.data_seed)
    for variant, cfg in A.suite_variants("core", base).items():
        state = TrainState.fresh(M.init_params(cfg.model, stream(0, "init")))
        times = []
        for step in range(1, args.steps + 1):
            rng = stream(0, "train", step)
            idx = rng.integers(0, len(xt), args.batch)
            x1 = rng.standard_normal((args.batch, *xt.shape[1:]))
            t0 = time.perf_counter()
            state, _ = train_step(
                state, TokenBatch(xt[idx], yt[idx]), x1, cfg.objective, cfg.schedule, cfg.optimizer, cfg.model, rng
            )
            times.append(time.perf_counter() - t0)
        ms = 1e3 * statistics.median(times[10:])
        print(f"{variant:20s} {ms:7.2f} ms/step  ({ms * cfg.train.steps / 6e4:.1f} min per {cfg.train.steps} steps)")

if __name__ == "__main__":
    main()
