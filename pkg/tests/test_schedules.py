import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import expit

from selfflow import schedules as S
from selfflow.rng import stream

DISTS = [
    S.Uniform(),
    S.ShiftedUniform(1.0),
    S.ShiftedUniform(3.0),
    S.ShiftedUniform(0.4),
    S.LogitNormal(0.0, 1.0, 1.0),
    S.LogitNormal(-0.5, 0.8, 2.5),
    S.PlateauLogitNormal(0.0, 1.0, 1.0),
    S.PlateauLogitNormal(0.3, 1.2, 1.78),
    S.LowSnrMixture(S.LogitNormal(0.0, 1.0, 1.0)),
    S.LowSnrMixture(S.PlateauLogitNormal(0.0, 1.0, 1.0), 0.1, (0.9, 1.0)),
]


def simpson(f, a=0.0, b=1.0, panels=200_000, breaks=()):
    """Composite Simpson on [a, b], split at the density's kinks."""
    pts = [a, *sorted(x for x in breaks if a < x < b), b]
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        n = max(2, int(panels * (hi - lo)) // 2 * 2)
        x = np.linspace(lo, hi, n + 1)
        # one-sided limits at the break points, where the density may jump
        x[0], x[-1] = np.nextafter(lo, hi), np.nextafter(hi, lo)
        y = f(x)
        total += (hi - lo) / (3 * n) * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())
    return total


def _kinks(d):
    if isinstance(d, S.PlateauLogitNormal):
        return (S.plateau_mode(d.shifted_mu, d.sigma)[0],)
    if isinstance(d, S.LowSnrMixture):
        return (*d.interval, *_kinks(d.base))
    return ()


@pytest.mark.parametrize("dist", DISTS, ids=repr)
def test_density_integrates_to_one(dist):
    assert abs(simpson(lambda t: S.density(dist, t), breaks=_kinks(dist)) - 1.0) < 1e-6


@pytest.mark.parametrize("dist", DISTS, ids=repr)
def test_samples_match_cdf(dist):
    x = S.sample(dist, stream(0, "ks"), 100_000)
    assert ((x >= 0) & (x <= 1)).all()
    ks = stats.kstest(x, lambda t: S.cdf(dist, t)).statistic
    assert ks < 0.01


@pytest.mark.parametrize("dist", DISTS, ids=repr)
def test_cdf_is_integral_of_density(dist):
    for t in (0.1, 0.37, 0.5, 0.93, 0.97):
        integral = simpson(lambda u: S.density(dist, u), 0.0, t, panels=100_000, breaks=_kinks(dist))
        assert abs(integral - S.cdf(dist, t)) < 1e-6


def test_timeshift_examples():
    assert S.timeshift(1.0, 0.37) == 0.37
    for a in (0.1, 1.0, 3.0, 17.0):
        assert S.timeshift(a, 1.0) == 1.0
        assert S.timeshift(a, 0.0) == 0.0
    assert S.timeshift(2.0, 0.5) == pytest.approx(2 / 3, abs=1e-15)


def test_timeshift_rejects_bad_input():
    with pytest.raises(ValueError):
        S.timeshift(0.0, 0.5)
    with pytest.raises(ValueError):
        S.timeshift(1.5, 1.2)


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(1e-2, 1e2), t=st.floats(0.0, 1.0))
def test_timeshift_group_inverse(alpha, t):
    assert abs(S.timeshift(1.0 / alpha, S.timeshift(alpha, t)) - t) < 1e-12


@settings(max_examples=100, deadline=None)
@given(alpha=st.floats(1e-2, 1e2), a=st.floats(0.0, 1.0), b=st.floats(0.0, 1.0))
def test_timeshift_monotone_and_composes(alpha, a, b):
    lo, hi = min(a, b), max(a, b)
    assert S.timeshift(alpha, lo) <= S.timeshift(alpha, hi)
    beta = 1.7
    assert S.timeshift(beta, S.timeshift(alpha, a)) == pytest.approx(S.timeshift(alpha * beta, a), abs=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.78, 3.0])
def test_logit_normal_pushforward(alpha):
    # timeshifted unshifted logit-normal samples follow the mu + log(alpha) law
    z = stream(1, "push").standard_normal(100_000)
    pushed = S.timeshift(alpha, expit(z))
    ks = stats.kstest(pushed, lambda t: S.logit_normal_cdf(t, math.log(alpha), 1.0)).statistic
    assert ks < 0.01


def test_density_examples():
    assert S.density(S.ShiftedUniform(1.0), 0.3) == 1.0
    assert S.density(S.LogitNormal(0, 1, 1), 0.5) == pytest.approx(4 / math.sqrt(2 * math.pi), abs=1e-12)
    assert S.density(S.LogitNormal(0, 1, 1), 0.0) == 0.0


def test_shifted_uniform_density_formula():
    a = 3.0
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(S.density(S.ShiftedUniform(a), t), a / (a + (1 - a) * t) ** 2)


def test_plateau_flat_above_mode():
    d = S.PlateauLogitNormal(0.0, 1.0, 1.0)
    mode, peak, z = S.plateau_mode(0.0, 1.0)
    assert mode == pytest.approx(0.5, abs=1e-12)
    above = S.density(d, np.linspace(mode + 1e-6, 1.0, 50))
    np.testing.assert_allclose(above, z * peak, rtol=1e-14)
    below = S.density(d, np.array([0.2, 0.4]))
    np.testing.assert_allclose(below, z * S.logit_normal_pdf(np.array([0.2, 0.4]), 0.0, 1.0))


def test_plateau_rejects_bimodal():
    with pytest.raises(ValueError, match="unimodal"):
        S.PlateauLogitNormal(0.0, 3.0, 1.0)


def test_uniform_mean():
    x = S.sample(S.Uniform(), stream(5, "u"), 100_000)
    assert abs(x.mean() - 0.5) < 0.005


def test_low_snr_mixture_mass():
    base = S.LogitNormal(0, 1, 1)
    d = S.LowSnrMixture(base, 0.05, (0.95, 1.0))
    x = S.sample(d, stream(2, "mix"), 100_000)
    base_mass = 1.0 - S.cdf(base, 0.95)
    expected = 0.05 + 0.95 * base_mass
    assert abs(((x >= 0.95) & (x <= 1.0)).mean() - expected) < 0.01


def test_eval_grid_examples():
    np.testing.assert_array_equal(S.eval_grid(2, 1.0).timesteps, [1.0, 0.5, 0.0])
    g = S.eval_grid(50, 1.78)
    assert len(g.timesteps) == 51 and g.timesteps[0] == 1.0 and g.timesteps[-1] == 0.0
    assert (np.diff(g.timesteps) < 0).all()
    np.testing.assert_allclose(g.timesteps, S.timeshift(1.78, np.arange(50, -1, -1) / 50), rtol=0, atol=0)


@pytest.mark.parametrize("dist", DISTS, ids=repr)
def test_serialization_round_trip(dist):
    assert S.from_dict(S.to_dict(dist)) == dist
