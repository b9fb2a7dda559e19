import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from berryline import randomize as rz
from berryline.apt import phase_coefficients
from berryline.errors import ConfigError

KINDS = ("uniform", "triangular", "smooth-bump")


def _quad_chi(dist, xi):
    # independent oracle: direct quadrature of the density (points split at the kink)
    lo, hi = dist.support
    f = lambda x, fn: float(dist.density(x)) * fn(xi * x)
    re = quad(f, lo, hi, args=(np.cos,), points=[1.0], limit=400, epsabs=1e-13)[0]
    im = quad(f, lo, hi, args=(np.sin,), points=[1.0], limit=400, epsabs=1e-13)[0]
    return re + 1j * im


@pytest.mark.parametrize("kind", KINDS)
def test_density_normalized(kind):
    d = rz.RuntimeDistribution(kind, 0.3, 2.0)
    lo, hi = d.support
    assert abs(quad(lambda x: float(d.density(x)), lo, hi, points=[1.0])[0] - 1.0) < 1e-10
    assert d.density(hi + 0.01) == 0.0


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("xi", [0.0, 3.0, 40.0, 250.0])
def test_characteristic_matches_quadrature(kind, xi):
    d = rz.RuntimeDistribution(kind, 0.2, 1.0)
    assert abs(rz.characteristic(d, xi) - _quad_chi(d, xi)) < 1e-9


@given(kind=st.sampled_from(KINDS), lam=st.floats(0.01, 0.9), xi=st.floats(-500, 500))
@settings(max_examples=60, deadline=None)
def test_characteristic_bounded(kind, lam, xi):
    d = rz.RuntimeDistribution(kind, lam, 1.0)
    assert abs(rz.characteristic(d, xi)) <= 1.0 + 1e-12


def test_decay_ordering():
    # uniform decays as 1/xi, triangular as 1/xi^2, bump faster than any power
    xi = np.array([2000.0])
    u, t, b = (abs(rz.characteristic(rz.RuntimeDistribution(k, 0.2), xi)[0]) for k in KINDS)
    assert b < t < u


@pytest.mark.parametrize("kind", KINDS)
def test_nodes_reproduce_moments(kind):
    d = rz.RuntimeDistribution(kind, 0.25, 1.5)
    x, w = d.nodes(200)
    lo, hi = d.support
    m2 = quad(lambda v: float(d.density(v)) * v * v, lo, hi, points=[1.0])[0]
    assert abs(w.sum() - 1) < 1e-14
    assert abs(w @ x - 1.0) < 1e-12
    assert abs(w @ x**2 - m2) < 1e-10


@given(kind=st.sampled_from(KINDS), lam=st.floats(0.05, 0.6), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_samples_in_support_and_deterministic(kind, lam, seed):
    d = rz.RuntimeDistribution(kind, lam)
    a = rz.sample_runtimes(d, 50.0, 300, seed)
    b = rz.sample_runtimes(d, 50.0, 300, seed)
    assert np.array_equal(a, b)
    assert np.all(a >= 50.0 * (1 - lam)) and np.all(a <= 50.0 * (1 + lam))


@pytest.mark.parametrize("kind,var", [("uniform", 1 / 3), ("triangular", 1 / 6)])
def test_sample_variance(kind, var):
    x = rz.sample_unit(rz.RuntimeDistribution(kind, 0.2), 200_000, np.random.default_rng(3))
    assert abs(x.mean() - 1.0) < 5e-4
    assert abs(x.var() / (0.04 * var) - 1) < 0.02


def test_bump_samples_match_density():
    d = rz.RuntimeDistribution("smooth-bump", 0.2, 2.0)
    x = rz.sample_unit(d, 200_000, np.random.default_rng(5))
    xs, w = d.nodes(200)
    assert abs(x.var() / (w @ (xs - 1) ** 2) - 1) < 0.02


def test_invalid_distributions():
    with pytest.raises(ConfigError):
        rz.RuntimeDistribution("gaussian")
    with pytest.raises(ConfigError):
        rz.RuntimeDistribution("uniform", 1.0)
    with pytest.raises(ConfigError):
        rz.RuntimeDistribution("smooth-bump", 0.2, 0.0)
    with pytest.raises(ConfigError):
        rz.sample_unit(rz.RuntimeDistribution("smooth-bump", 0.2, 1e5), 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        rz.sample_runtimes(rz.RuntimeDistribution(), -1.0, 10, 0)


def test_point_mass_prediction(cone_frame):
    ab = phase_coefficients(cone_frame)
    T = np.array([80.0, 120.0])
    assert np.allclose(rz.bias_prediction(cone_frame, None, T), ab.richardson_osc(T) / T**2)


def test_prediction_forms_agree_at_leading_order(cone_frame):
    d = rz.RuntimeDistribution("uniform", 0.2)
    T = np.linspace(150, 160, 21)
    ex = rz.bias_prediction(cone_frame, d, T)
    le = rz.bias_prediction(cone_frame, d, T, form="leading")
    # both are O(T^-3); they differ by a relative O(lam)
    assert np.max(np.abs(ex - le)) < 0.5 * np.max(np.abs(le)) + 1e-9
    with pytest.raises(ConfigError):
        rz.bias_prediction(cone_frame, d, T, form="guess")


def test_randomization_suppresses_bias(cone_frame):
    T = np.linspace(150, 170, 81)
    raw = np.max(np.abs(rz.bias_prediction(cone_frame, None, T)))
    uni = np.max(np.abs(rz.bias_prediction(cone_frame, rz.RuntimeDistribution("uniform", 0.2), T)))
    bump = np.max(np.abs(rz.bias_prediction(cone_frame, rz.RuntimeDistribution("smooth-bump", 0.2), T)))
    assert bump < uni < raw


@given(T=st.floats(20, 500), kind=st.sampled_from(KINDS))
@settings(max_examples=20, deadline=None)
def test_variance_bound_holds(cone_frame, T, kind):
    rep = rz.variance_report(cone_frame, rz.RuntimeDistribution(kind, 0.2), T, N=2000)
    assert rep["empirical"] <= rep["predicted_bound"]


def test_mean_fluctuation_scaling(cone_frame):
    s = rz.mean_fluctuation(cone_frame, rz.RuntimeDistribution("uniform", 0.2), 100.0, [100, 1600], reps=400)
    assert abs(np.log(s[1] / s[0]) / np.log(16) + 0.5) < 0.08


def test_randomized_estimate_and_csv(tmp_path, cone_frame):
    d = rz.RuntimeDistribution("uniform", 0.2)
    coarse = rz.shared_coarse(cone_frame)
    a = rz.randomized_richardson(cone_frame, d, 60.0, N=300, seed=2, coarse=coarse)
    b = rz.randomized_richardson(cone_frame, d, 60.0, N=300, seed=2, coarse=coarse.value)
    assert a.mean == b.mean and a.dropped == 0
    pred = float(rz.bias_prediction(cone_frame, d, 60.0))
    assert abs(a.bias - pred) < 4 * a.se + 2e-5  # T^-4 remainder at this runtime
    q = rz.expected_estimate(cone_frame, d, 60.0, coarse=coarse.value)
    assert abs(a.bias - q) < 4 * a.se
    p1 = a.write_csv(tmp_path / "a.csv")
    p2 = b.write_csv(tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().splitlines()[0] == "j,X_j,T_j,estimate"
    assert '"bias"' in a.write_summary(tmp_path / "s.json", predicted_bias=pred).read_text()
