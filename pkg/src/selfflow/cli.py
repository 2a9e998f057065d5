"""Command line entry point: ``selfflow <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation as A
from . import checkpoint as ckpt
from . import config as C
from . import data as D
from . import evaluation as E
from . import runner as R
from .flow import SamplingError
from .objectives import TrainingDivergence
from .rng import stream
from .schedules import eval_grid

log = logging.getLogger("selfflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    """Bad arguments or inconsistent inputs; maps to the config exit code."""


def _spec_hash(spec: D.DatasetSpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> dict:
    spec = C.load_dataset_spec(args.spec) if args.spec else D.DatasetSpec()
    out = Path(args.out)
    paths = {split: out / f"{split}.bin" for split in D.SPLITS}
    existing = [p for p in paths.values() if p.exists()]
    if existing and not args.force:
        raise UsageError(f"{existing[0]} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    spec = D.normalize_spec(spec, args.seed)
    h = _spec_hash(spec)
    for split, path in paths.items():
        n = spec.n_train if split == "train" else spec.n_eval
        tokens, labels = D.generate(spec, args.seed, n, split)
        D.write_dataset(path, spec, args.seed, split, tokens, labels, config_hash=h)
    return {"out": str(out), "spec": spec.to_dict(), "config_hash": h}


def cmd_train(args) -> dict:
    cfg = C.load(args.config)
    if args.steps:
        cfg = cfg.with_overrides(train={"steps": args.steps})
    res = R.train(cfg, args.out, force=args.force, resume_from=args.resume_from)
    last = res.evals[-1] if res.evals else {}
    return {"out": str(res.out), "step": res.state.step, "resumed_from": res.resumed_from, **last}


def _load_run(path):
    header, state = ckpt.load(path)
    cfg = C.RunConfig.from_dict(header["config"])
    return header, state, cfg


def write_pgm(path, images: np.ndarray, cols: int = 8) -> None:
    """Binary greyscale grid of [-1, 1] images, one pixel gap between tiles."""
    n, S, _ = images.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    grid = np.zeros((rows * (S + 1) + 1, cols * (S + 1) + 1), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        tile = np.round((np.clip(img, -1, 1) + 1) * 127.5).astype(np.uint8)
        grid[1 + r * (S + 1) : 1 + r * (S + 1) + S, 1 + c * (S + 1) : 1 + c * (S + 1) + S] = tile
    h, w = grid.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + grid.tobytes())


def cmd_sample(args) -> dict:
    header, state, cfg = _load_run(args.checkpoint)
    K = cfg.model.num_classes
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.cls is not None and not 0 <= args.cls < K:
        raise UsageError(f"--class must lie in [0, {K}), got {args.cls}")
    rng = stream(args.seed, "sample")
    labels = np.full(args.n, args.cls) if args.cls is not None else rng.integers(0, K, args.n)
    grid = eval_grid(args.steps, args.sampleshift)
    tokens = E.generate_samples(state.teacher, cfg.model, args.n, grid, rng, labels)
    spec = D.normalize_spec(cfg.dataset, cfg.data_seed)
    D.write_dataset(args.out, spec, args.seed, "samples", tokens, labels, config_hash=header["config_hash"])
    if args.pgm:
        write_pgm(args.pgm, D.to_pixels(tokens, spec))
    return {"out": args.out, "n": args.n, "step": header["step"]}


def _heldout(args, cfg):
    spec = D.normalize_spec(cfg.dataset, cfg.data_seed)
    if args.dataset:
        fh, tokens, labels = D.read_dataset(args.dataset, expect_spec=spec)
        return spec, tokens, labels
    _, _, (tokens, labels) = R.datasets(cfg.dataset, cfg.data_seed)
    return spec, tokens, labels


def _append(run_dir: Path, rec: dict) -> None:
    with open(run_dir / "eval.jsonl", "a") as f:
        f.write(json.dumps(rec) + "\n")


def cmd_eval(args) -> dict:
    header, state, cfg = _load_run(args.checkpoint)
    spec, tokens, _ = _heldout(args, cfg)
    n = args.n or cfg.eval.n_samples
    grid = eval_grid(args.steps or cfg.eval.sample_steps, cfg.eval.sampleshift)
    fd = E.score_model(state.teacher, cfg.model, tokens, spec, n, grid, stream(args.seed, "eval", header["step"]))
    rec = {
        "step": header["step"],
        "event": "eval",
        "fd_pixel": fd,
        "fd_floor": E.noise_floor(tokens, spec),
        "n": n,
        "seed": args.seed,
        "config_hash": header["config_hash"],
    }
    _append(Path(args.checkpoint).parent, rec)
    return rec


def cmd_probe(args) -> dict:
    header, state, cfg = _load_run(args.checkpoint)
    _, tokens, labels = _heldout(args, cfg)
    n = min(args.n or cfg.eval.probe_samples, len(tokens))
    tau = cfg.eval.tau_probe if args.tau is None else args.tau
    accs = E.probe_all_layers(state.teacher, cfg.model, tokens[:n], labels[:n], tau, stream(args.seed, "probe"))
    rec = {"step": header["step"], "event": "probe", "tau_probe": tau, "config_hash": header["config_hash"]}
    rec |= {f"probe_acc_layer_{d}": a for d, a in enumerate(accs)}
    _append(Path(args.checkpoint).parent, rec)
    return rec


def cmd_ablate(args) -> dict:
    base = C.load(args.config) if args.config else A.desk_config()
    if args.steps:
        s = args.steps
        base = base.with_overrides(train={"steps": s, "eval_every": min(base.train.eval_every, s),
                                          "checkpoint_every": min(base.train.checkpoint_every, s)})
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    A.suite_variants(args.suite, base)  # validate before any work
    res = A.run_suite(args.suite, range(args.seeds), args.out, base, force=args.force)
    return {"out": args.out, "variants": res["variants"], "rows": len(res["rows"]), "cpu_seconds": res["cpu_seconds"]}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/heldout dataset files")
    g.add_argument("--spec", "--dataset-spec", dest="spec", help="dataset spec TOML (defaults if omitted)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train (or resume) a run")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--resume-from", help="checkpoint to resume from (default: latest in --out)")
    t.add_argument("--force", action="store_true", help="discard existing run state")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint's EMA weights")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--sampleshift", type=float, default=1.0)
    s.add_argument("--class", dest="cls", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--pgm", help="also write an image grid")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="pixel Fréchet distance against held-out data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="held-out dataset file (regenerated from the config if omitted)")
    e.add_argument("--n", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("probe", help="layer-wise linear probe accuracy")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--dataset")
    pr.add_argument("--tau", type=float)
    pr.add_argument("--n", type=int)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(fn=cmd_probe)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", required=True, help="fig3b | fig10a | scaling | core")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="base run config (desk preset if omitted)")
    a.add_argument("--steps", type=int)
    a.add_argument("--force", action="store_true")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    R.tune_allocator()
    try:
        result = args.fn(args)
    except (UsageError, C.ConfigError, D.DatasetFormatError, ckpt.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, SamplingError, E.EigenError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
