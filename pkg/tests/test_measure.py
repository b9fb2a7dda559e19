import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import unitary_group

from berryline import measure as ms
from berryline import propagate as pr
from berryline.errors import ConfigError
from berryline.estimators import circ_dist
from berryline.randomize import RuntimeDistribution

from conftest import cone_berry


def _brute_register(theta, m):
    M = 2**m
    t = np.arange(M)
    k = np.arange(M)[:, None]
    amp = np.exp(1j * t * (theta - 2 * np.pi * k / M)).sum(axis=1) / M
    return np.abs(amp) ** 2


@pytest.mark.parametrize("theta", [0.0, 0.3, 2.0, 5.9])
def test_register_distribution_matches_brute_force(theta):
    assert np.allclose(ms.register_distribution(theta, 5), _brute_register(theta, 5), atol=1e-13)


def test_exact_phase_is_deterministic():
    p = ms.register_distribution(2 * np.pi * 5 / 32, 5)
    assert abs(p[5] - 1.0) < 1e-12 and abs(p.sum() - 1.0) < 1e-12


@given(theta=st.floats(0, 2 * np.pi, exclude_max=True), m=st.integers(1, 10))
@settings(max_examples=80)
def test_register_normalized_and_peaked(theta, m):
    p = ms.register_distribution(theta, m)
    assert abs(p.sum() - 1.0) < 1e-9
    # nearest bin carries at least 4/pi^2
    assert p.max() >= 4 / np.pi**2 - 1e-12


def test_windowed_sampler_close_to_exact():
    m, theta = 16, 1.234567
    M = 2**m
    p = ms.register_distribution(theta, m)
    k = ms._sample_register(theta, m, 400_000, np.random.default_rng(0))
    emp = np.bincount(k, minlength=M) / k.size
    k0 = int(np.floor(theta * M / (2 * np.pi)))
    near = slice(k0 - 3, k0 + 5)
    # total variation on the resolved bins + the lumped remainder
    tv = 0.5 * (np.abs(emp[near] - p[near]).sum() + abs(emp[near].sum() - p[near].sum()))
    assert tv < 0.01


def test_qpe_bits():
    assert ms.qpe_bits_for(2 * np.pi / 1024) == 10
    assert ms.qpe_bits_for(1e-12) == 24
    with pytest.raises(ConfigError):
        ms.QpeConfig(m_bits=0)
    with pytest.raises(ConfigError):
        ms.QpeConfig(m_bits=8, vote_bits=9)
    assert ms.QpeConfig(m_bits=10).top_bits == 8


def test_propagator_spectrum_recovers_eigenphases():
    U = unitary_group.rvs(4, random_state=3)
    psi = np.ones(4) / 2.0
    sp = ms.propagator_spectrum(U, psi)
    want = np.sort(np.mod(np.angle(np.linalg.eigvals(U)), 2 * np.pi))
    assert np.allclose(np.sort(sp.phases), want, atol=1e-12)
    assert abs(sp.weights.sum() - 1.0) < 1e-12
    for j in range(4):
        v = sp.vectors[:, j]
        assert np.allclose(U @ v, np.exp(1j * sp.phases[j]) * v, atol=1e-10)


def test_qpe_single_branch_precision():
    sp = ms.PropagatorSpectrum(np.array([1.0]), np.array([1.0]), np.eye(1))
    rng = np.random.default_rng(1)
    cfg = ms.QpeConfig(m_bits=12, repetitions=9)
    est = np.array([ms.qpe_sample(sp, cfg, rng) for _ in range(200)])
    assert np.all(circ_dist(est, 1.0) < 4 * 2 * np.pi / 2**12)


def test_leakage_bookkeeping():
    # with one repetition, the minority branch is reported at its weight
    sp = ms.PropagatorSpectrum(np.array([0.5, 2.5]), np.array([0.8, 0.2]), np.eye(2))
    rng = np.random.default_rng(2)
    cfg = ms.QpeConfig(m_bits=8, repetitions=1)
    n = 4000
    est = np.array([ms.qpe_sample(sp, cfg, rng) for _ in range(n)])
    fail = np.mean(circ_dist(est, 0.5) > 0.1)
    # oracle: minority weight plus the Fejer tail of the majority branch beyond 0.1 rad
    grid = 2 * np.pi * np.arange(256) / 256
    far = circ_dist(grid, 0.5) > 0.1
    want = 0.2 * far @ ms.register_distribution(2.5, 8) + 0.8 * far @ ms.register_distribution(0.5, 8)
    assert abs(fail - want) < 4 * np.sqrt(want * (1 - want) / n)
    assert want > 0.2
    # majority vote over repetitions suppresses it
    cfg = ms.QpeConfig(m_bits=8, repetitions=15)
    est = np.array([ms.qpe_sample(sp, cfg, rng) for _ in range(400)])
    assert np.mean(circ_dist(est, 0.5) > 0.1) < 0.2 * want


def test_vote_wraps_around_zero():
    m = 8
    ks = np.array([255, 0, 1, 255, 0, 128])
    v = ms.vote(ks, m, 6)
    assert circ_dist(v, 0.0) < 2 * np.pi / 2**m


@given(r=st.floats(0, 1), phi=st.floats(0, 2 * np.pi), seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_hadamard_fractions_unbiased(r, phi, seed):
    z = r * np.exp(1j * phi)
    rng = np.random.default_rng(seed)
    n = 200_000
    re = 2 * ms.hadamard_sample(z, "real", n, rng) - 1
    im = 2 * ms.hadamard_sample(z, "imag", n, rng) - 1
    assert abs(re - z.real) < 6 / np.sqrt(n)
    assert abs(im - z.imag) < 6 / np.sqrt(n)


def test_unit_outcomes_unbiased():
    z = np.full(200_000, 0.6 * np.exp(0.9j))
    x = ms._unit_outcomes(z, np.random.default_rng(4))
    assert set(np.unique(x.real)) <= {-1.0, 1.0}
    assert abs(x.mean() - z[0]) < 6 * np.sqrt(2 / z.size)


def test_hadamard_bad_inputs():
    with pytest.raises(ConfigError):
        ms.hadamard_sample(1.5, "real", 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        ms.hadamard_sample(0.5, "diag", 10, np.random.default_rng(0))


def test_noise_amplification():
    p_leak = 0.3
    out = ms.noise_amplification(np.sqrt(1 - p_leak), 0.1, 10**6, 4000, np.random.default_rng(5))
    assert abs(out["measured"] / out["predicted"] - 1) < 0.1


def test_shot_log(tmp_path):
    recs = ms.hadamard_shots(0.3 + 0.4j, "imag", 50, np.random.default_rng(0), tag="fwd-T", T=3.0)
    p = ms.write_shot_log(recs, tmp_path / "shots.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "tag,basis,T_j,outcome"
    assert len(lines) == 51 and lines[1].startswith("fwd-T,imag,3.0,")


def test_unitary_cache(cone_frame_small):
    a = ms.final_unitaries(cone_frame_small, [5.0, -5.0])
    b = ms.final_unitaries(cone_frame_small, [-5.0])
    assert np.array_equal(a[1], b[0])
    U, _ = pr.propagate_batch(cone_frame_small.hamiltonian, [5.0])
    assert np.allclose(a[0], U[0, 0], atol=1e-12)


def test_qpe_source_tracks_exact_phase(cone_frame_small):
    Ts = np.array([12.0, -12.0])
    src = ms.QpePhaseSource(cone_frame_small, ms.QpeConfig(14, 9), np.random.default_rng(0))
    dom = np.array([sp.phases[sp.dominant] for sp in src.spectra(Ts)])
    q = src(Ts)
    assert np.all(circ_dist(q, dom) < 4 * 2 * np.pi / 2**14)
    # the overlap phase differs from the dominant eigenphase by O(leakage)
    exact = ms.ExactPhaseSource(cone_frame_small)(Ts)
    w = np.array([sp.weights[sp.dominant] for sp in src.spectra(Ts)])
    assert np.all(circ_dist(dom, exact) < 2 * (1 - w))


def test_hadamard_runtime_scaling(cone_frame):
    t1 = ms.hadamard_runtime(cone_frame, 1e-2, 2.0)
    t2 = ms.hadamard_runtime(cone_frame, 1e-2 / 8, 2.0)
    assert abs(t2 / t1 - 2.0) < 1e-12


def test_hadamard_pipeline_small(tmp_path, cone_frame):
    cfg = ms.HadamardConfig(eps=3e-2, seed=3)
    log = []
    r = ms.hadamard_pipeline(cone_frame, cfg, shot_log=log)
    assert r.abs_err <= 3e-2
    assert r.N == int(np.ceil(6 / 3e-2**2))
    assert len(log) == r.N * 8
    again = ms.hadamard_pipeline(cone_frame, cfg)
    assert again.theta_hat == r.theta_hat
    ex = ms.hadamard_pipeline(cone_frame, ms.HadamardConfig(eps=3e-2, overlaps="exact", N=4000))
    assert ex.abs_err < 1e-2
    assert circ_dist(r.coarse.value, cone_berry()) < np.pi / 8
    with pytest.raises(ConfigError):
        ms.hadamard_pipeline(cone_frame, ms.HadamardConfig(overlaps="guess"))


def test_expected_bias_matches_exact_mode(cone_frame):
    d = RuntimeDistribution("uniform", 0.2)
    b = ms.hadamard_expected_bias(cone_frame, d, 40.0)
    r = ms.hadamard_pipeline(cone_frame, ms.HadamardConfig(T=40.0, N=40_000, overlaps="exact", seed=1))
    assert abs(abs(b) - r.abs_err) < 2e-3
