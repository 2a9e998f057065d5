"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The directional checks read the results of the desk-scale ablation
(``scripts/run_acceptance.sh``), written to ``results/core`` or to the
directory named by ``SELFFLOW_RESULTS``. They fail, rather than skip, when
those results are missing.
"""

import json
import os
import statistics
import time
import zlib
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from selfflow import ablation as A
from selfflow import diffcore as dc
from selfflow import dualts, flow
from selfflow import evaluation as E
from selfflow import model as M
from selfflow import objectives as O
from selfflow import runner as R
from selfflow import schedules as S
from selfflow.rng import split, stream

RESULTS = Path(os.environ.get("SELFFLOW_RESULTS", Path(__file__).resolve().parents[1] / "results" / "core"))
FINAL_STEP = 20_000
SEEDS = 5


VERDICTS: list[str] = []  # echoed in the terminal summary by conftest.py


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, detail


_CORE: list = []


def core_rows(name: str) -> list[dict]:
    """Final-step rows of the desk-scale ablation; a missing or partial run is a FAIL."""
    if not _CORE:
        path = RESULTS / "summary.csv"
        if not path.exists():
            verdict(name, False, f"{path} missing; run scripts/run_acceptance.sh first")
        _CORE.extend(r for r in A.read_csv(path) if r["step"] == FINAL_STEP)
    seeds = {v: len({r["seed"] for r in _CORE if r["variant"] == v}) for v in A.SUITES["core"]}
    incomplete = {v: n for v, n in seeds.items() if n < SEEDS}
    if incomplete:
        verdict(name, False, f"seeds finished at step {FINAL_STEP}: {incomplete} (need {SEEDS})")
    return _CORE


def _median(rows, variant, key="fd"):
    return statistics.median(r[key] for r in rows if r["variant"] == variant)


# --------------------------------------------------------------------------


def test_gradient_correctness():
    from test_diffcore import PRIMITIVES, _weighted

    t0 = time.perf_counter()
    worst = {}
    for name, (build, fn) in PRIMITIVES.items():
        r = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(20):
            inputs = build(r)
            w = r.standard_normal(fn(*[dc.Tensor(x) for x in inputs]).shape)
            err = dc.finite_diff_check(lambda ts: _weighted(fn(*ts), w), inputs, eps=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)

    cfg = M.TransformerConfig(depth=6)
    r = np.random.default_rng(0)
    params = {k: v + 0.02 * r.standard_normal(v.shape) for k, v in M.init_params(cfg, stream(0, "init")).items()}
    names = list(params)
    x0, x1 = r.standard_normal((2, cfg.tokens, cfg.token_dim)), r.standard_normal((2, cfg.tokens, cfg.token_dim))
    labels = np.array([0, 3])
    plans = dualts.sample_plans(S.LogitNormal(), 0.25, cfg.tokens, "dual", split(stream(0, "plans"), 2))
    x_tau, x_min = dualts.apply_plan(plans, x0, x1)
    tau, tau_min = dualts.plan_arrays(plans)
    l, k = cfg.default_taps()
    _, hs = M.forward(params, x_min, np.repeat(tau_min[:, None], cfg.tokens, 1), labels, heads=cfg.heads, upto=k)

    def loss(ts):
        p = dict(zip(names, ts))
        v, hid = M.forward(p, x_tau, tau, labels, heads=cfg.heads)
        return flow.gen_loss(v, x0, x1) + 0.8 * O.rep_loss(M.project_head(p, hid[l]), hs[k].data)

    worst["full_loss_D6"] = dc.finite_diff_check(loss, [params[n] for n in names], max_coords=300, rng=r)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    verdict(
        "gradient correctness",
        worst[top] < 1e-4 and elapsed < 120,
        f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks, {elapsed:.1f}s",
    )


def test_schedule_correctness():
    from test_schedules import DISTS, _kinks, simpson

    t0 = time.perf_counter()
    quad = max(abs(simpson(lambda t: S.density(d, t), breaks=_kinks(d)) - 1.0) for d in DISTS)
    ks = 0.0
    z = stream(0, "acceptance", 1).standard_normal(100_000)
    from scipy.special import expit

    for alpha in (0.5, 1.78, 3.0):
        pushed = S.timeshift(alpha, expit(z))
        ks = max(ks, stats.kstest(pushed, lambda t: S.logit_normal_cdf(t, np.log(alpha), 1.0)).statistic)
    t = stream(0, "acceptance", 2).random(10_000)
    inv = max(float(np.abs(S.timeshift(1 / a, S.timeshift(a, t)) - t).max()) for a in (0.01, 0.3, 1.78, 7.0, 100.0))
    elapsed = time.perf_counter() - t0
    verdict(
        "schedule correctness",
        quad < 1e-6 and ks < 0.01 and inv < 1e-12 and elapsed < 60,
        f"quadrature err {quad:.1e}, pushforward KS {ks:.4f}, group inverse {inv:.1e}, {elapsed:.1f}s",
    )


def test_dual_timestep_marginal():
    # 10^5 independent plans; every token position is tested on its own because
    # the tokens of one plan share t and are not independent draws
    dist = S.LogitNormal()
    plans = dualts.sample_plans(dist, 0.25, 16, "dual", split(stream(0, "acceptance", 3), 100_000))
    tau = np.stack([p.tau for p in plans])
    ks = [stats.kstest(tau[:, i], lambda t: S.cdf(dist, t)).statistic for i in range(tau.shape[1])]
    verdict(
        "dual-timestep marginal",
        max(ks) < 0.01,
        f"max KS {max(ks):.4f} over {tau.shape[1]} token positions, n={len(plans)} each",
    )


def test_oracle_sampling():
    r = np.random.default_rng(0)
    worst = 0.0
    for steps in (1, 2, 7, 25, 50, 200):
        for shift in (0.3, 1.0, 3.0):
            x0, x1 = r.standard_normal((4, 16, 16)), r.standard_normal((4, 16, 16))

            def oracle(x, tau, _):
                t = tau[..., None]
                return np.where(t > 0, (x - x0) / np.where(t > 0, t, 1.0), 0.0)

            worst = max(worst, float(np.abs(flow.euler_sample(oracle, x1, S.eval_grid(steps, shift)) - x0).max()))
    verdict("oracle sampling", worst < 1e-10, f"max |x - x0| {worst:.1e} over 18 grids")


def test_frechet_oracle():
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        m1, m2, s1, s2 = r.normal(), r.normal(), r.uniform(0.1, 3), r.uniform(0.1, 3)
        fa, fb = E.GaussianFit(np.array([m1]), np.array([[s1**2]]), 2), E.GaussianFit(np.array([m2]), np.array([[s2**2]]), 2)
        worst = max(worst, abs(E.frechet(fa, fb) - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
        n = 8
        q, _ = np.linalg.qr(r.standard_normal((n, n)))
        la, lb = r.uniform(0.1, 4, n), r.uniform(0.1, 4, n)
        ma, mb = r.standard_normal(n), r.standard_normal(n)
        fa, fb = E.GaussianFit(ma, (q * la) @ q.T, 2), E.GaussianFit(mb, (q * lb) @ q.T, 2)
        exact = ((ma - mb) ** 2).sum() + ((np.sqrt(la) - np.sqrt(lb)) ** 2).sum()
        for solver in ("lapack", "jacobi"):
            worst = max(worst, abs(E.frechet(fa, fb, solver) - exact))
    floors = [row.get("fd_floor") for row in core_rows("Fréchet oracle")]
    reported = all(f is not None and f > 0 for f in floors)
    verdict(
        "Fréchet oracle",
        worst < 1e-8 and reported,
        f"max closed-form err {worst:.1e}; noise floor reported in {sum(f is not None for f in floors)}/{len(floors)} "
        f"runs (median {statistics.median(floors):.3f})",
    )


BASELINES = ("vanilla", "dual_no_ssl", "full_mask", "diffusion_forcing")


def test_noising_baselines_ordering():
    rows = core_rows("noising baselines ordering")
    fd = {v: _median(rows, v) for v in BASELINES}
    ordered = fd["full_mask"] > fd["vanilla"] and fd["diffusion_forcing"] > fd["vanilla"]
    ordered = ordered and fd["dual_no_ssl"] <= fd["vanilla"]
    suite = json.loads((RESULTS / "suite.json").read_text())
    by_variant = suite.get("cpu_seconds_by_variant")
    if by_variant is None:
        verdict("noising baselines ordering", False, "suite.json has no per-variant CPU times; rerun the suite")
    cpu_h = sum(by_variant[v] for v in BASELINES) / 3600
    detail = ", ".join(f"{k} {v:.3f}" for k, v in fd.items())
    verdict(
        "noising baselines ordering",
        ordered and cpu_h <= 2.0,
        f"median FD {detail}; training CPU for the four baselines x {SEEDS} seeds {cpu_h:.2f} h "
        f"(whole core suite incl. selfflow {suite['cpu_seconds'] / 3600:.2f} h)",
    )


def test_selfflow_gain():
    rows = core_rows("self-flow generation gain")
    sf, van, no_rep = (_median(rows, v) for v in ("selfflow", "vanilla", "dual_no_ssl"))
    verdict(
        "self-flow generation gain",
        sf < van and sf < no_rep,
        f"median FD selfflow {sf:.3f}, vanilla {van:.3f}, no_rep_loss {no_rep:.3f}",
    )


def test_representation_gain():
    rows = core_rows("representation gain")
    d = round(0.5 * 6)
    key = f"probe_acc_layer_{d}"
    sf = [r[key] for r in rows if r["variant"] == "selfflow"]
    van = [r[key] for r in rows if r["variant"] == "vanilla"]
    margin = statistics.median(sf) - statistics.median(van)
    spread = max(statistics.stdev(sf), statistics.stdev(van))
    verdict(
        "representation gain",
        margin > spread,
        f"layer {d} probe median selfflow {statistics.median(sf):.3f} vs vanilla {statistics.median(van):.3f}; "
        f"margin {margin:+.3f} vs seed std {spread:.3f}",
    )


def test_ema_teacher_hygiene():
    cfg = M.TransformerConfig(depth=4, hidden=16, heads=2, token_dim=4, tokens=6, num_classes=3)
    opt, dist = O.OptimizerConfig(), S.LogitNormal()
    r = np.random.default_rng(0)
    x0, x1 = r.standard_normal((4, 6, 4)), r.standard_normal((4, 6, 4))
    batch = flow.TokenBatch(x0, np.array([0, 1, 2, 0]))
    blends = True
    for decay in (0.0, 1.0, 0.9999):
        variant = "vanilla" if decay == 0 else "selfflow"
        state = O.TrainState.fresh(M.init_params(cfg, stream(0, "init")))
        for step in range(1, 4):
            new, _ = O.train_step(state, batch, x1, O.ObjectiveConfig(variant=variant, ema_decay=decay), dist, opt, cfg,
                                  stream(0, "train", step))
            for k in new.teacher:
                blends &= new.teacher[k].tobytes() == (decay * state.teacher[k] + (1 - decay) * new.student[k]).tobytes()
            state = new

    def run(obj):
        state = O.TrainState.fresh(M.init_params(cfg, stream(0, "init")))
        for step in range(1, 4):
            state, _ = O.train_step(state, batch, x1, obj, dist, opt, cfg, stream(0, "train", step))
        return state

    pairs = [
        (O.ObjectiveConfig(variant="selfflow", gamma=0.0), O.ObjectiveConfig(variant="vanilla", plan_mode="dual")),
        (O.ObjectiveConfig(variant="selfflow", gamma=0.0, mask_ratio=0.0), O.ObjectiveConfig(variant="vanilla")),
    ]
    same = True
    for a, b in pairs:
        sa, sb = run(a), run(b)
        same &= all(sa.student[k].tobytes() == sb.student[k].tobytes() for k in sa.student)
        same &= all(sa.teacher[k].tobytes() == sb.teacher[k].tobytes() for k in sa.teacher)
    verdict("EMA/teacher hygiene", blends and same, f"exact EMA blend: {blends}; gamma=0 bitwise match: {same}")


def test_reproducibility(tiny_config, tmp_path):
    def stream_of(out):
        return [{k: v for k, v in rec.items() if k != "wall_ms"} for rec in R.read_metrics(out / R.METRICS)]

    ref = tmp_path / "ref"
    R.train(tiny_config, ref)
    expected = stream_of(ref)
    checkpoints = sorted(ckpt_step for ckpt_step in range(1, tiny_config.train.steps + 1)
                         if ckpt_step % tiny_config.train.checkpoint_every == 0)
    mismatches = []
    for step in checkpoints:
        out = tmp_path / f"resume{step}"
        R.train(tiny_config, out, stop_at=step)
        R.train(tiny_config, out)
        if stream_of(out) != expected:
            mismatches.append(step)
    verdict(
        "reproducibility",
        not mismatches,
        f"resumed from steps {checkpoints}: {len(expected)} records each, mismatches at {mismatches or 'none'}",
    )
