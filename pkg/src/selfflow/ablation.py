"""Ablation suites: named objective variants trained under shared seeds.

Each suite maps variant names to config overrides applied to a base run
config. Results go to ``<out>/<variant>/seed<k>/`` (one writer per
directory), a CSV summary and a markdown report of medians.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import config as C
from . import runner as R
from .model import TransformerConfig

log = logging.getLogger(__name__)


def _noise(plan: str) -> dict:
    return {"objective": {"variant": "vanilla", "plan_mode": plan}}


def _obj(variant: str) -> dict:
    return {"objective": {"variant": variant}}


SUITES: dict[str, dict[str, dict]] = {
    # noise-schedule baselines, all without a representation loss
    "fig3b": {
        "vanilla": _noise("vanilla"),
        "dual_no_ssl": _noise("dual"),
        "full_mask": _noise("full_mask"),
        "diffusion_forcing": _noise("diffusion_forcing"),
    },
    # component ablation around the full objective
    "fig10a": {
        "selfflow": _obj("selfflow"),
        "no_rep_loss": _noise("dual"),
        "no_mask": _obj("selfflow_no_mask"),
        "near_dual": _obj("selfflow_near_dual"),
        "l1": _obj("selfflow_l1"),
    },
    # the union needed by the directional acceptance checks; no_rep_loss is
    # the same run as dual_no_ssl, so it is trained once
    "core": {
        "vanilla": _noise("vanilla"),
        "dual_no_ssl": _noise("dual"),
        "full_mask": _noise("full_mask"),
        "diffusion_forcing": _noise("diffusion_forcing"),
        "selfflow": _obj("selfflow"),
    },
}

SCALING_DEPTHS = (2, 4, 6, 8)


def suite_variants(name: str, base: C.RunConfig) -> dict[str, C.RunConfig]:
    if name == "scaling":
        out = {}
        for d in SCALING_DEPTHS:
            model = TransformerConfig(**{**base.model.to_dict(), "depth": d})
            for v, ov in (("vanilla", _noise("vanilla")), ("selfflow", _obj("selfflow"))):
                out[f"{v}_d{d}"] = base.with_overrides(model=model, **ov)
        return out
    if name not in SUITES:
        raise C.ConfigError(f"unknown suite {name!r}; choose from {sorted([*SUITES, 'scaling'])}")
    return {v: base.with_overrides(**ov) for v, ov in SUITES[name].items()}


def desk_config(**train) -> C.RunConfig:
    """Base config for ablations sized for a single CPU core.

    Smaller than the default model (width 32), a faster EMA (0.999, since
    0.9999 averages over more steps than a 20k-step run has), one
    evaluation at the end with 2560 samples (10x the pixel feature
    dimension) and 25 Euler steps.
    """
    base = C.RunConfig(model=TransformerConfig(hidden=32, heads=4))
    return base.with_overrides(
        objective={"ema_decay": 0.999},
        train={"steps": 20_000, "batch_size": 8, "eval_every": 20_000, "checkpoint_every": 20_000, **train},
        eval={"n_samples": 2560, "sample_steps": 25, "probe_samples": 2048},
    )


@dataclass(frozen=True)
class Job:
    variant: str
    seed: int
    cfg: C.RunConfig
    out: Path
    force: bool


def _run(job: Job) -> tuple[str, int, list, float]:
    R.tune_allocator()
    if not job.force and R.is_done(job.out, job.cfg):
        log.info("skip %s seed %d (done)", job.variant, job.seed)
        done = R.load_done(job.out)
        return job.variant, job.seed, done["evals"], done.get("cpu_seconds", 0.0)
    res = R.train(job.cfg, job.out, force=job.force, keep_checkpoints=False)
    log.info("%s seed %d finished in %.0fs (%.0fs CPU)", job.variant, job.seed, res.seconds, res.cpu_seconds)
    return job.variant, job.seed, res.evals, res.cpu_seconds


def workers() -> int:
    try:
        return max(1, int(os.environ.get("SELFFLOW_THREADS", "1")))
    except ValueError:
        raise C.ConfigError("SELFFLOW_THREADS must be an integer") from None


def run_suite(name: str, seeds, out, base: C.RunConfig | None = None, force: bool = False) -> dict:
    """Train every (variant, seed) pair, then write ``summary.csv`` and ``report.md``."""
    base = base or desk_config()
    seeds = list(seeds)
    out = Path(out)
    variants = suite_variants(name, base)
    jobs = [
        Job(v, s, cfg.with_overrides(seed=s), out / v / f"seed{s}", force)
        for s in seeds
        for v, cfg in variants.items()
    ]
    n = workers()
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(j) for j in jobs]
    rows = collect(results)
    cpu = sum(r[3] for r in results)
    by_variant: dict[str, float] = {}
    for variant, _, _, seconds in results:
        by_variant[variant] = by_variant.get(variant, 0.0) + seconds
    write_csv(rows, out / "summary.csv", C.config_hash(base))
    (out / "report.md").write_text(report(name, rows, cpu))
    meta = {"suite": name, "seeds": list(seeds), "variants": list(variants), "jobs": len(jobs), "cpu_seconds": cpu}
    meta["cpu_seconds_by_variant"] = by_variant
    (out / "suite.json").write_text(json.dumps(meta, indent=1))
    return {"rows": rows, "variants": list(variants), "cpu_seconds": cpu}


def collect(results) -> list[dict]:
    rows = []
    for variant, seed, evals, *_ in results:
        for rec in evals:
            row = {"variant": variant, "seed": seed, "step": rec["step"], "fd": rec["fd_pixel"]}
            row["fd_floor"] = rec.get("fd_floor")
            row |= {k: v for k, v in rec.items() if k.startswith("probe_acc_layer_")}
            rows.append(row)
    return rows


def write_csv(rows: list[dict], path, base_hash: str) -> None:
    keys = ["variant", "seed", "step", "fd", "fd_floor"]
    extra = sorted({k for r in rows for k in r} - set(keys), key=lambda k: int(k.rsplit("_", 1)[1]))
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={base_hash}\n")
        w = csv.DictWriter(f, fieldnames=keys + extra)
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path) as f:
        lines = [l for l in f if not l.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        row = {"variant": r["variant"], "seed": int(r["seed"]), "step": int(r["step"])}
        row |= {k: float(v) for k, v in r.items() if k not in row and v not in ("", None)}
        rows.append(row)
    return rows


def medians(rows: list[dict], key: str = "fd") -> dict[tuple[str, int], float]:
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        if key in r and r[key] is not None:
            groups.setdefault((r["variant"], r["step"]), []).append(r[key])
    return {k: statistics.median(v) for k, v in groups.items()}


def report(name: str, rows: list[dict], cpu_seconds: float | None = None) -> str:
    fd = medians(rows)
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    steps = sorted({r["step"] for r in rows})
    seeds = sorted({r["seed"] for r in rows})
    floor = [r["fd_floor"] for r in rows if r.get("fd_floor") is not None]
    lines = [f"# {name}: median pixel Fréchet distance", ""]
    lines.append(f"seeds: {', '.join(map(str, seeds))}")
    if floor:
        lines.append(f"held-out noise floor: {statistics.median(floor):.4f}")
    if cpu_seconds:
        lines.append(f"total training CPU time: {cpu_seconds / 3600:.2f} h")
    lines += ["", "| variant | " + " | ".join(f"step {s}" for s in steps) + " |"]
    lines.append("|---" * (len(steps) + 1) + "|")
    for v in variants:
        cells = [f"{fd[(v, s)]:.4f}" if (v, s) in fd else "" for s in steps]
        lines.append(f"| {v} | " + " | ".join(cells) + " |")
    layers = sorted({k for r in rows for k in r if k.startswith("probe_acc_layer_")}, key=lambda k: int(k[16:]))
    if layers:
        last = steps[-1]
        lines += ["", f"## median linear-probe accuracy per layer (step {last})", ""]
        lines.append("| variant | " + " | ".join(f"layer {k[16:]}" for k in layers) + " |")
        lines.append("|---" * (len(layers) + 1) + "|")
        for v in variants:
            cells = []
            for k in layers:
                vals = [r[k] for r in rows if r["variant"] == v and r["step"] == last and k in r]
                cells.append(f"{statistics.median(vals):.3f}" if vals else "")
            lines.append(f"| {v} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
