import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from berryline import estimators as es
from berryline.errors import AmbiguousLiftError, ConfigError, UnliftedEstimateError
from berryline.measure import ExactPhaseSource
from berryline.spectral import berry_phase_oracle

from conftest import cone_berry

angles = st.floats(0.0, 2 * np.pi, exclude_max=True)


def test_first_order_weights():
    w = es.RichardsonScheme(2.0, 1).weights
    assert np.allclose(w, [-1.0 / 3.0, 4.0 / 3.0])


@given(alpha=st.floats(1.2, 4.0), m=st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_weights_annihilate_inverse_even_powers(alpha, m):
    sc = es.RichardsonScheme(alpha, m)
    w = sc.weights
    x = alpha ** -np.arange(m + 1.0)
    assert abs(w.sum() - 1.0) < 1e-12 * sc.weight_sum
    for j in range(1, m + 1):
        assert abs(w @ x ** (2 * j)) < 1e-12 * sc.weight_sum
    # T^-(2m+2) survives
    assert abs(w @ x ** (2 * m + 2)) > 1e-6 * alpha ** (-(2 * m + 2) * m)


@given(alpha=st.floats(1.2, 5.0), m=st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_weight_norm_below_bound(alpha, m):
    sc = es.RichardsonScheme(alpha, m)
    assert sc.weight_sum <= sc.weight_bound * (1 + 1e-12)


def test_scheme_validation():
    with pytest.raises(ConfigError):
        es.RichardsonScheme(1.0, 1)
    with pytest.raises(ConfigError):
        es.RichardsonScheme(2.0, 0)
    with pytest.raises(ConfigError):
        es.RichardsonScheme(2.0, 1).apply([1.0])
    assert np.allclose(es.RichardsonScheme(3.0, 2).runtimes(5.0), [5.0, 15.0, 45.0])


@given(theta=angles, off=st.floats(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6))
@settings(max_examples=200)
def test_lift_round_trip(theta, off):
    coarse = theta + off
    lp = es.lift(theta % np.pi, coarse)
    assert abs(lp.value - theta - 2 * np.pi * round((lp.value - theta) / (2 * np.pi))) < 1e-9
    lo, hi = lp.interval
    assert lo < lp.value < hi


@given(est=st.floats(0, np.pi, exclude_max=True), coarse=st.floats(-10, 10))
@settings(max_examples=200)
def test_lift_lands_in_interval(est, coarse):
    assume(abs(((coarse - est) % np.pi) - np.pi / 2) > 1e-8)
    v = es.lift(est, coarse).value
    assert abs(v - coarse) < np.pi / 2
    assert abs(math.remainder(v - est, np.pi)) < 1e-9
    assert abs(es.lift_array([est], coarse)[0] - v) < 1e-12


def test_lift_edge_is_ambiguous():
    with pytest.raises(AmbiguousLiftError):
        es.lift(1.0, 1.0 + np.pi / 2)


def test_richardson_requires_lifted_and_common_center():
    sc = es.RichardsonScheme(2.0, 1)
    with pytest.raises(UnliftedEstimateError):
        es.richardson(sc, [0.1, 0.2])
    with pytest.raises(UnliftedEstimateError):
        es.richardson(sc, [es.lift(0.1, 0.0), es.lift(0.1, 0.5)])
    with pytest.raises(ConfigError):
        es.richardson(sc, [es.lift(0.1, 0.0)])
    assert abs(es.richardson(sc, [es.lift(0.1, 0.0), es.lift(0.1, 0.0)]) - 0.1) < 1e-15


@given(tb=angles, td=st.floats(-1e3, 1e3), e=st.floats(-0.3, 0.3))
@settings(max_examples=200)
def test_forward_reverse_cancels_dynamical_phase(tb, td, e):
    pair = es.PhasePair(10.0, -td + tb + e, td + tb + e)
    got = es.forward_reverse_estimate(pair)
    assert 0.0 <= got < np.pi
    assert es.circ_dist_pi(got, tb + e) < 1e-9
    assert abs(es.fwd_rev_from_phases(pair.forward, pair.reverse) - got) < 1e-15


def test_phase_pair_validation():
    with pytest.raises(ConfigError):
        es.PhasePair(1.0, 0.1, 0.2, source="guess")
    p = es.PhasePair(1.0, -0.5, 7.0)
    assert 0 <= p.forward < 2 * np.pi and 0 <= p.reverse < 2 * np.pi


@given(tb=angles, E=st.floats(-3, 3), T=st.floats(1, 50))
@settings(max_examples=200)
def test_scaling_combination_removes_linear_phase(tb, E, T):
    ap = 1.0 + np.pi / (T * max(abs(E), 1e-12) + np.pi)
    got = es.scaling_combination(tb - T * E, tb - ap * T * E, ap)
    assert es.circ_dist(got, tb) < 1e-7


def test_circular_helpers():
    assert abs(es.circ_dist(0.1, 2 * np.pi - 0.1) - 0.2) < 1e-15
    assert abs(es.circ_dist_pi(0.1, np.pi - 0.1) - 0.2) < 1e-15
    assert 0 <= es.wrap_2pi(-1e-18) < 2 * np.pi


def test_series_round_trip():
    s = es.EstimateSeries(oracle=0.25, model={"kind": "spin-cone"})
    s.add(10.0, 0.3, "fwd-rev", 1, (0.0, 1.0))
    s.add(20.0, 0.26, "richardson-m1", 1)
    back = es.EstimateSeries.from_dict(json.loads(s.to_json()))
    assert back == s
    assert np.allclose(back.errors(), [0.05, 0.01])


def test_branch_resolution_on_cone(cone_frame):
    c = es.branch_resolve(cone_frame, ExactPhaseSource(cone_frame))
    assert es.circ_dist(c.value, cone_berry()) < np.pi / 8
    assert c.T1 >= 2 * np.pi / cone_frame.gap_min


def test_branch_resolution_gives_up():
    from berryline.errors import BranchResolutionError

    class Noisy:
        rng = np.random.default_rng(0)

        def __call__(self, Ts):
            return self.rng.uniform(0, 2 * np.pi, len(Ts))

    from berryline.hamiltonians import build_spin_cone
    from berryline.spectral import decompose

    f = decompose(build_spin_cone(1.0, 0.4), 256)
    with pytest.raises(BranchResolutionError):
        es.branch_resolve(f, Noisy(), es.BranchConfig(max_doublings=3, agreement=1e-6))


def test_algorithm_runtime_scaling(cone_frame):
    t1 = es.algorithm_runtime(cone_frame, 1e-3, 2.0)
    t2 = es.algorithm_runtime(cone_frame, 2.5e-4, 2.0)
    assert abs(t2 / t1 - 2.0) < 1e-12
    assert es.algorithm_runtime(cone_frame, 0.9, 1e-6) == 1.0


@pytest.mark.parametrize("mode", ["exact", "qpe"])
def test_pipeline_meets_target(cone_frame, mode):
    r = es.full_qpe_pipeline(cone_frame, es.PipelineConfig(eps=3e-3, mode=mode, seed=4))
    assert r.abs_err <= 3e-3
    assert abs(r.theta_oracle - berry_phase_oracle(cone_frame)) < 1e-15
    assert r.cost_total_T > 0 and len(r.lifted) == 2
    assert set(r.summary()) >= {"theta_hat", "abs_err", "T0", "coarse"}


def test_pipeline_config_validation(cone_frame):
    with pytest.raises(ConfigError):
        es.full_qpe_pipeline(cone_frame, es.PipelineConfig(eps=2.0))
    with pytest.raises(ConfigError):
        es.full_qpe_pipeline(cone_frame, es.PipelineConfig(mode="oracle"))
