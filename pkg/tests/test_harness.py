import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from berryline import harness as hs
from berryline.errors import ConfigError
from berryline.hamiltonians import ModelSpec

CONE = ModelSpec("spin-cone", {"B": 1.0, "theta": 0.4})


@given(slope=st.floats(-4, -0.5), c=st.floats(0.1, 10), seed=st.integers(0, 2**31))
@settings(max_examples=50)
def test_fit_recovers_power_law_with_noise(slope, c, seed):
    x = 50 * 2 ** (np.arange(13) / 3)
    y = c * x**slope * (1 + 0.01 * np.random.default_rng(seed).standard_normal(x.size))
    f = hs.fit_scaling(x, y)
    assert abs(f.slope - slope) < 0.02
    assert abs(f.coefficient / c - 1) < 0.1
    assert f.reliable


def test_fit_rejects_degenerate_input():
    with pytest.raises(ConfigError):
        hs.fit_scaling([1.0, 2.0], [0.0, 0.0])


def test_fixed_slope_coefficient():
    x = np.array([10.0, 20.0, 40.0])
    assert abs(hs.fixed_slope_coefficient(x, 3 / x, -1.0) - 3.0) < 1e-12


def test_required_runtime_tail_supremum():
    T = np.arange(1.0, 11.0)
    err = np.array([1, 0.5, 0.1, 0.3, 0.05, 0.04, 0.2, 0.01, 0.01, 0.005])
    assert np.allclose(hs.required_runtime(T, err, [0.25, 0.02, 1e-4])[:2], [5.0, 8.0])
    assert np.isnan(hs.required_runtime(T, err, [1e-4])[0])


def test_envelope_requirement_inverts_power_law():
    T = np.geomspace(50, 500, 6)
    b = -2.0 * T**-3.0
    eps = np.array([1e-5, 1e-6])
    assert np.allclose(hs.envelope_requirement(T, b, eps), (2.0 / eps) ** (1 / 3), rtol=1e-9)


def test_residual_spectrum_finds_tone():
    T = np.linspace(100, 300, 1601)
    f, a = hs.residual_spectrum(T, (0.7 * np.cos(1.3 * T) + 0.2 * np.cos(2.6 * T)) / T**2)
    i = np.argmax(a)
    assert abs(f[i] - 1.3) <= f[1]
    assert abs(a[i] - 0.7) < 0.1
    assert hs.low_frequency_fraction(f, a, 1.0) < 1e-3
    assert hs.low_frequency_fraction(f, a, 2.0) > 0.99
    with pytest.raises(ConfigError):
        hs.residual_spectrum(np.array([1.0, 2.0, 4.0]), np.zeros(3))


def test_crossover():
    eps = np.array([1e-1, 1e-2, 1e-3])
    assert hs.crossover({"single": np.array([1, 10, 100.0]), "fwd-rev": np.array([2, 8, 50.0])}, eps) == 1e-2
    assert hs.crossover({"single": np.array([1, 10, 100.0])}, eps) is None


def test_config_validation():
    with pytest.raises(ConfigError):
        hs.SweepConfig(CONE, stack="magic").validate()
    with pytest.raises(ConfigError):
        hs.SweepConfig(CONE, count=2).validate()
    with pytest.raises(ConfigError):
        hs.sweep_config_from({"model": {"kind": "spin-cone"}, "sweep": {"ratio": 0.5}})


@pytest.fixture(scope="module")
def small_sweeps(cone_frame_small):
    out = {}
    for stack in ("single", "fwd-rev", "richardson"):
        out[stack] = hs.sweep(hs.SweepConfig(CONE, stack=stack, T_start=40, count=5, grid=1024), cone_frame_small)
    out["randomized"] = hs.sweep(
        hs.SweepConfig(CONE, stack="randomized", T_start=40, count=4, N=200, grid=1024), cone_frame_small
    )
    return out


def test_sweep_orders(small_sweeps):
    assert abs(small_sweeps["single"].fits["raw"].slope + 1) < 0.15
    assert abs(small_sweeps["fwd-rev"].fits["period-averaged"].slope + 2) < 0.2
    assert small_sweeps["richardson"].fits["residual-averaged"].slope < -2.5
    assert "se" in small_sweeps["randomized"].extra


def test_persist_round_trip(tmp_path, small_sweeps):
    for stack, r in small_sweeps.items():
        d = hs.persist(r, tmp_path / stack)
        back = hs.load_result(d)
        assert back.config == r.config
        assert np.array_equal(back.errors, r.errors)
        assert back.fits == r.fits
        assert json.dumps(back.to_dict(), sort_keys=True) == json.dumps(r.to_dict(), sort_keys=True)
    assert (tmp_path / "randomized" / "bias_vs_T.csv").exists()
    assert not (tmp_path / "single" / "bias_vs_T.csv").exists()


def test_plotdata(tmp_path, small_sweeps):
    p = hs.emit_plotdata(small_sweeps["fwd-rev"], "error-vs-T", tmp_path / "e.csv")
    lines = p.read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "T,estimate,error,abs_error,tag"
    with pytest.raises(ConfigError):
        hs.emit_plotdata(small_sweeps["fwd-rev"], "bias-vs-T", tmp_path / "b.csv")
    with pytest.raises(ConfigError):
        hs.emit_plotdata(small_sweeps["fwd-rev"], "histogram", tmp_path / "h.csv")


def test_compare_report(small_sweeps):
    text, table = hs.compare_report(list(small_sweeps.values()))
    assert "phi1" in text and "fwd-rev" in text
    assert table.splitlines()[0].startswith("stack,window,slope")
    with pytest.raises(ConfigError):
        hs.compare_report([])
    with pytest.raises(ConfigError):
        hs.compare_report([small_sweeps["single"]])


def test_compare_refuses_mixed_models(small_sweeps, three_frame):
    other = hs.sweep(hs.SweepConfig(ModelSpec("three-level"), stack="single", T_start=40, count=4,
                                    grid=2048, period_average=False), three_frame)
    with pytest.raises(ConfigError):
        hs.compare_report([small_sweeps["single"], other])


def test_cost_monotone(small_sweeps):
    c = hs.cost_at_accuracy(small_sweeps["fwd-rev"], [1e-2, 1e-3, 1e-4])
    ok = c[~np.isnan(c)]
    assert np.all(np.diff(ok) >= 0)


def test_fits_restricted_to_expansion_window(small_sweeps):
    for r in small_sweeps.values():
        assert all(r.extra["expansion_valid"])
    rnd = small_sweeps["randomized"].extra
    assert len(rnd["predicted_bias_leading"]) == len(rnd["predicted_bias"])


def test_sweep_rejects_runtimes_outside_expansion(cone_frame_small):
    with pytest.raises(ConfigError):
        hs.sweep(hs.SweepConfig(CONE, stack="single", T_start=0.05, ratio=1.1, count=3, grid=1024),
                 cone_frame_small)
