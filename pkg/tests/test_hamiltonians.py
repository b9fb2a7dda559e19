import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from berryline.errors import ConfigError
from berryline.hamiltonians import (
    ModelSpec, build_from_config, build_spin_cone, build_three_level, check_closure,
    matrix_path, spec_from_mapping, with_fd_derivatives,
)

from conftest import CONFIGS


def _fd(fn, s, h=1e-5):
    return (fn(s + h) - fn(s - h)) / (2 * h)


@pytest.mark.parametrize("H", [build_spin_cone(1.3, 0.7), build_three_level()])
def test_derivatives_match_finite_differences(H):
    s = np.linspace(0, 1, 17)
    assert np.allclose(H.derivative(s), _fd(H.evaluate, s), atol=1e-7)
    assert np.allclose(H.second_derivative(s), _fd(H.derivative, s), atol=1e-5)


def test_loops_close_and_are_hermitian():
    for H in (build_spin_cone(1.0, 0.4), build_three_level()):
        assert check_closure(H) < 1e-12
        m = H.evaluate(np.linspace(0, 1, 9))
        assert np.allclose(m, np.conj(np.swapaxes(m, -1, -2)))


def test_spin_cone_spectrum_is_constant():
    H = build_spin_cone(2.0, 1.1)
    E = np.linalg.eigvalsh(H.evaluate(np.linspace(0, 1, 33)))
    assert np.allclose(E, [-1.0, 1.0])


def test_vectorized_shapes():
    H = build_three_level()
    assert H.evaluate(0.3).shape == (3, 3)
    assert H.evaluate(np.zeros((4, 5))).shape == (4, 5, 3, 3)


@given(c=st.floats(-20, 20), a=st.floats(0.1, 10))
@settings(max_examples=30, deadline=None)
def test_shift_and_scale(c, a):
    H = build_spin_cone(1.0, 0.4)
    s = np.array([0.1, 0.6])
    assert np.allclose(H.shifted(c).evaluate(s), H.evaluate(s) + c * np.eye(2))
    assert np.allclose(H.scaled(a).derivative(s), a * H.derivative(s))


def test_fd_mode_close_to_analytic():
    H = build_three_level()
    F = with_fd_derivatives(H, 1e-5)
    s = np.linspace(0, 1, 11)
    assert np.allclose(F.derivative(s), H.derivative(s), atol=1e-8)
    assert np.allclose(F.second_derivative(s), H.second_derivative(s), atol=1e-4)


def test_bad_models_rejected():
    with pytest.raises(ConfigError):
        build_spin_cone(-1.0, 0.4)
    with pytest.raises(ConfigError):
        build_spin_cone(1.0, 0.0)
    with pytest.raises(ConfigError):
        ModelSpec("no-such-model").build()
    with pytest.raises(ConfigError):
        spec_from_mapping({"model": {"params": {}}})
    with pytest.raises(ConfigError):
        matrix_path(np.array([[0, 1], [0, 0]]))  # not Hermitian


def test_model_configs_build():
    for p in sorted((CONFIGS / "models").glob("*.toml")):
        H = build_from_config(p)
        assert H.dim in (2, 3)


def test_missing_config_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        build_from_config(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nkind=")
    with pytest.raises(ConfigError):
        build_from_config(bad)
