"""Training loop with periodic evaluation, checkpoints and exact resume.

Per-step randomness comes from ``stream(seed, "train", step)``, so a run
is a pure function of its config and the only state a checkpoint needs
besides parameters and optimizer moments is the step counter.
"""

from __future__ import annotations

import ctypes
import functools
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from . import data as D
from . import evaluation as E
from . import model as M
from .flow import TokenBatch
from .objectives import TrainingDivergence, TrainState, train_step
from .rng import stream
from .schedules import eval_grid

log = logging.getLogger(__name__)

METRICS = "metrics.jsonl"
CONFIG = "config.toml"
DONE = "done.json"


def tune_allocator() -> bool:
    """Keep freed numpy buffers in the heap instead of returning them to the OS.

    glibc's default thresholds make every large temporary a fresh mmap, and
    the page faults cost more than the arithmetic at these model sizes.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 32 << 20)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 256 << 20)  # M_TOP_PAD
        return True
    except (OSError, AttributeError):
        return False


@functools.lru_cache(maxsize=4)
def _datasets(spec: D.DatasetSpec, seed: int):
    spec = D.normalize_spec(spec, seed)
    train = D.generate(spec, seed, spec.n_train, "train")
    heldout = D.generate(spec, seed, spec.n_eval, "heldout")
    for arr in (*train, *heldout):
        arr.flags.writeable = False
    return spec, train, heldout


def datasets(spec: D.DatasetSpec, seed: int):
    """(normalized spec, (train tokens, labels), (heldout tokens, labels)), cached per process."""
    return _datasets(spec, seed)


@functools.lru_cache(maxsize=8)
def _floor(spec: D.DatasetSpec, seed: int) -> float:
    norm_spec, _, (xh, _) = datasets(spec, seed)
    return E.noise_floor(xh, norm_spec)


def evaluate(state: TrainState, cfg: C.RunConfig, step: int, encoder: dict | None = None) -> dict:
    """Fréchet score of teacher samples and layer-wise probe accuracies.

    With a frozen encoder and ``eval.feature_space = "probe_encoder"`` the
    same samples are also scored in the encoder's feature space.
    """
    spec, _, (xh, yh) = datasets(cfg.dataset, cfg.data_seed)
    ev, mc = cfg.eval, cfg.model
    grid = eval_grid(ev.sample_steps, ev.sampleshift)
    feat_dim = spec.image_size**2
    if ev.n_samples < 10 * feat_dim:
        log.warning("n_samples=%d is below 10x the feature dimension (%d)", ev.n_samples, feat_dim)
    samples = E.generate_samples(state.teacher, mc, ev.n_samples, grid, stream(cfg.seed, "eval", step))
    rec = {"step": step, "event": "eval", "fd_pixel": E.score_samples(samples, xh, spec)}
    rec["fd_floor"] = _floor(cfg.dataset, cfg.data_seed)
    if encoder is not None and ev.feature_space == "probe_encoder":
        rec["fd_probe"] = E.score_samples(samples, xh, spec, "probe_encoder", encoder, mc)
    n = min(ev.probe_samples, len(xh))
    accs = E.probe_all_layers(state.teacher, mc, xh[:n], yh[:n], ev.tau_probe, stream(cfg.seed, "probe", step))
    rec |= {f"probe_acc_layer_{d}": a for d, a in enumerate(accs)}
    return rec


@dataclass
class RunResult:
    out: Path
    state: TrainState
    evals: list
    resumed_from: int
    seconds: float
    cpu_seconds: float


def latest_checkpoint(out: Path) -> Path | None:
    found = sorted(out.glob("ckpt_*.bin"), key=lambda p: ckpt.read_header(p)["step"])
    found = [p for p in found if p.name != "ckpt_last_good.bin"]
    return found[-1] if found else None


def _truncate_metrics(path: Path, step: int) -> list[dict]:
    kept = []
    if path.exists():
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("step", 0) <= step:
                kept.append(rec)
    path.write_text("".join(json.dumps(r) + "\n" for r in kept))
    return kept


def read_metrics(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def prepare_out(out: Path, cfg: C.RunConfig, force: bool = False) -> str:
    """Create or validate the run directory; returns the config hash."""
    h = C.config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cpath = out / CONFIG
    if cpath.exists() and not force:
        existing = C.config_hash(C.load(cpath))
        if existing != h:
            raise C.ConfigError(f"{out} holds a run with config hash {existing}, not {h}; use --force")
    if force:
        for p in [*out.glob("ckpt_*.bin"), out / METRICS, out / DONE]:
            p.unlink(missing_ok=True)
    C.save(cfg, cpath)
    return h


def train(
    cfg: C.RunConfig,
    out,
    *,
    force: bool = False,
    resume_from=None,
    stop_at: int | None = None,
    keep_checkpoints: bool = True,
    encoder: dict | None = None,
) -> RunResult:
    """Run (or resume) training into ``out``.

    ``stop_at`` ends the loop early without marking the run done, which is
    how interrupted runs are simulated in tests.
    """
    t_start, cpu_start = time.perf_counter(), time.process_time()
    out = Path(out)
    h = prepare_out(out, cfg, force)
    spec, (xt, yt), _ = datasets(cfg.dataset, cfg.data_seed)
    mc = cfg.model
    metrics_path = out / METRICS

    src = Path(resume_from) if resume_from else (None if force else latest_checkpoint(out))
    if src is not None:
        header, state = ckpt.load(src)
        if header["config_hash"] != h:
            raise C.ConfigError(f"checkpoint {src} was written by config {header['config_hash']}, not {h}")
        evals = [r for r in _truncate_metrics(metrics_path, state.step) if r.get("event") == "eval"]
        log.info("resuming %s from step %d", out, state.step)
    else:
        state = TrainState.fresh(M.init_params(mc, stream(cfg.seed, "init")))
        evals = []
        metrics_path.write_text(json.dumps({"step": 0, "event": "start", "config_hash": h}) + "\n")
    resumed_from = state.step

    last = cfg.train.steps if stop_at is None else min(stop_at, cfg.train.steps)
    tc = cfg.train
    with open(metrics_path, "a") as mf:

        def emit(rec):
            mf.write(json.dumps(rec) + "\n")

        def save(st, name):
            mf.flush()
            ckpt.save(out / name, st, cfg.to_dict(), h, cfg.seed)

        if state.step == 0 and cfg.eval.eval_at_start and not evals:
            rec = evaluate(state, cfg, 0, encoder)
            evals.append(rec)
            emit(rec)
        while state.step < last:
            step = state.step + 1
            rng = stream(cfg.seed, "train", step)
            idx = rng.integers(0, len(xt), tc.batch_size)
            batch = TokenBatch(xt[idx], yt[idx])
            x1 = rng.standard_normal(batch.x.shape)
            t0 = time.perf_counter()
            try:
                state_new, m = train_step(
                    state, batch, x1, cfg.objective, cfg.schedule, cfg.optimizer, mc, rng, encoder
                )
            except TrainingDivergence as err:
                save(state, "ckpt_last_good.bin")
                emit({"step": step, "event": "diverged", "message": str(err)})
                mf.flush()
                raise
            state = state_new
            m["wall_ms"] = round(1e3 * (time.perf_counter() - t0), 3)
            if step % tc.log_every == 0:
                emit(m)
            if step % tc.eval_every == 0 or step == tc.steps:
                rec = evaluate(state, cfg, step, encoder)
                evals.append(rec)
                emit(rec)
                log.info("step %d fd_pixel %.4f", step, rec["fd_pixel"])
            if step % tc.checkpoint_every == 0 or step == tc.steps:
                name = f"ckpt_{step:07d}.bin" if keep_checkpoints else "ckpt_latest.bin"
                save(state, name)
    wall, cpu = time.perf_counter() - t_start, time.process_time() - cpu_start
    if state.step == tc.steps:
        done = {"config_hash": h, "step": state.step, "evals": evals, "wall_seconds": wall, "cpu_seconds": cpu}
        (out / DONE).write_text(json.dumps(done, indent=1))
    return RunResult(out, state, evals, resumed_from, wall, cpu)


def is_done(out, cfg: C.RunConfig) -> bool:
    p = Path(out) / DONE
    if not p.exists():
        return False
    return json.loads(p.read_text()).get("config_hash") == C.config_hash(cfg)


def load_done(out) -> dict:
    return json.loads((Path(out) / DONE).read_text())
