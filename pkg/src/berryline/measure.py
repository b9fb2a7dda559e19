"""Measurement emulators: a QPE outcome sampler working at the level of the
textbook outcome distribution, and a Hadamard-test shot sampler.

Control-phase convention: the imaginary-part Hadamard test applies a -pi/2
phase on the control qubit, so Pr[b = 0] = (1 + Im <psi|U|psi>)/2.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import schur

from .errors import ConfigError, PipelineInconsistentError
from .estimators import (
    BranchConfig,
    EstimateSeries,
    RichardsonScheme,
    branch_resolve,
    circ_dist,
    lift,
    loop_scales,
    wrap_2pi,
    wrap_pi,
)
from .propagate import ground_overlaps, propagate_batch
from .randomize import RuntimeDistribution, sample_unit
from .spectral import SpectralFrame, berry_phase_oracle

TWO_PI = 2.0 * np.pi
EXACT_REGISTER_BITS = 12
WINDOW = 2048


# ---------------------------------------------------------------------------
# QPE


@dataclass(frozen=True)
class QpeConfig:
    m_bits: int = 10
    repetitions: int = 1
    vote_bits: int | None = None

    def __post_init__(self):
        if not 1 <= int(self.m_bits) <= 24:
            raise ConfigError(f"m_bits must lie in [1, 24], got {self.m_bits}")
        if int(self.repetitions) < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.vote_bits is not None and not 1 <= self.vote_bits <= self.m_bits:
            raise ConfigError("vote_bits must lie in [1, m_bits]")

    @property
    def top_bits(self) -> int:
        return self.vote_bits or max(1, self.m_bits - 2)


def qpe_bits_for(precision: float) -> int:
    """Smallest m with 2 pi / 2^m <= precision, clipped to [1, 24]."""
    return int(min(24, max(1, math.ceil(math.log2(TWO_PI / precision)))))


def register_distribution(theta: float, m: int, k=None) -> np.ndarray:
    """Pr[k] = |2^-m sum_t exp(i t (theta - 2 pi k / 2^m))|^2."""
    M = 2**m
    k = np.arange(M) if k is None else np.asarray(k)
    d = (theta - TWO_PI * k / M) / 2.0
    s = np.sin(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.sin(M * d) ** 2 / (M**2 * s**2)
    return np.where(np.abs(s) < 1e-15, 1.0, p)


def _sample_register(theta: float, m: int, size: int, rng: np.random.Generator) -> np.ndarray:
    M = 2**m
    if m <= EXACT_REGISTER_BITS:
        p = register_distribution(theta, m)
        return rng.choice(M, size=size, p=p / p.sum())
    # window of +-WINDOW bins around the nearest; the outside tail (< 1e-4)
    # is drawn uniformly from the remaining bins
    k0 = int(np.floor(theta * M / TWO_PI))
    ks = np.arange(k0 - WINDOW + 1, k0 + WINDOW + 1)
    p = register_distribution(theta, m, ks)
    tail = max(0.0, 1.0 - p.sum())
    out = np.mod(rng.choice(ks, size=size, p=p / p.sum()), M)
    far = rng.random(size) < tail
    if far.any():
        off = rng.integers(WINDOW + 1, M - WINDOW + 1, size=int(far.sum()))
        out[far] = np.mod(k0 + off, M)
    return out


@dataclass(frozen=True)
class PropagatorSpectrum:
    phases: np.ndarray  # [0, 2 pi)
    weights: np.ndarray  # |<v_j|psi0>|^2
    vectors: np.ndarray

    @property
    def dominant(self) -> int:
        return int(np.argmax(self.weights))


def propagator_spectrum(U: np.ndarray, psi0: np.ndarray) -> PropagatorSpectrum:
    """Eigenphases of a unitary via complex Schur form (diagonal for normal matrices)."""
    Tm, Z = schur(U, output="complex")
    lam = np.diag(Tm)
    w = np.abs(Z.conj().T @ psi0) ** 2
    return PropagatorSpectrum(wrap_2pi(np.angle(lam)), w / w.sum(), Z)


def qpe_sample(spec: PropagatorSpectrum, cfg: QpeConfig, rng: np.random.Generator,
               return_branches: bool = False):
    """One phase estimate from R repetitions of textbook QPE.

    Each repetition picks an eigenbranch with probability |amplitude|^2 and a
    register outcome from that branch's distribution.  The vote is the mode of
    the top bits; the estimate is the circular mean of the full-precision
    outcomes that fall in the winning bin or its neighbours.
    """
    R, m = int(cfg.repetitions), int(cfg.m_bits)
    branches = rng.choice(spec.weights.size, size=R, p=spec.weights)
    ks = np.empty(R, dtype=np.int64)
    for b in np.unique(branches):
        sel = branches == b
        ks[sel] = _sample_register(float(spec.phases[b]), m, int(sel.sum()), rng)
    est = vote(ks, m, cfg.top_bits)
    return (est, branches) if return_branches else est


def vote(ks: np.ndarray, m: int, top_bits: int) -> float:
    shift = m - top_bits
    nb = 2**top_bits
    coarse = ks >> shift
    counts = np.bincount(coarse, minlength=nb)
    mode = int(np.argmax(counts))
    dist = np.abs(((coarse - mode + nb // 2) % nb) - nb // 2)
    keep = ks[dist <= 1] if nb > 2 else ks
    ang = TWO_PI * keep / 2**m
    return float(wrap_2pi(np.angle(np.exp(1j * ang).sum())))


_UNITARY_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_UNITARY_CACHE_SIZE = 512


def final_unitaries(frame: SpectralFrame, Ts, tol=None) -> np.ndarray:
    """U_T(1) for signed runtimes, cached per (hamiltonian, T, tol)."""
    Ts = np.atleast_1d(np.asarray(Ts, dtype=float))
    H = frame.hamiltonian
    keys = [(id(H), float(T), tol) for T in Ts]
    # the stored Hamiltonian guards against a recycled id()
    missing = [i for i, k in enumerate(keys) if k not in _UNITARY_CACHE or _UNITARY_CACHE[k][0] is not H]
    if missing:
        states, _ = propagate_batch(H, Ts[missing], None, (1.0,), tol)
        for j, i in enumerate(missing):
            _UNITARY_CACHE[keys[i]] = (H, states[0, j])
    out = np.stack([_UNITARY_CACHE[k][1] for k in keys])
    while len(_UNITARY_CACHE) > _UNITARY_CACHE_SIZE:
        _UNITARY_CACHE.popitem(last=False)
    return out


class ExactPhaseSource:
    """arg <psi0|U_T(1)|psi0> from the exact propagator."""

    tag = "exact-propagator"

    def __init__(self, frame: SpectralFrame, tol=None):
        self.frame, self.tol = frame, tol

    def __call__(self, Ts) -> np.ndarray:
        return wrap_2pi(np.angle(ground_overlaps(self.frame, Ts, self.tol)))


class QpePhaseSource:
    """QPE-sampled eigenphases of U_T(1) acting on the initial ground state."""

    tag = "qpe-sampled"

    def __init__(self, frame: SpectralFrame, cfg: QpeConfig, rng: np.random.Generator, tol=None):
        self.frame, self.cfg, self.rng, self.tol = frame, cfg, rng, tol
        self.psi0 = frame.eigenvectors[0][:, 0]

    def spectra(self, Ts) -> list:
        return [propagator_spectrum(U, self.psi0) for U in final_unitaries(self.frame, Ts, self.tol)]

    def __call__(self, Ts) -> np.ndarray:
        return np.array([qpe_sample(sp, self.cfg, self.rng) for sp in self.spectra(Ts)])


# ---------------------------------------------------------------------------
# Hadamard test


@dataclass(frozen=True)
class ShotRecord:
    tag: str
    control_phase: float  # 0 (real part) or pi/2 (imaginary part)
    outcome: int
    index: int
    T: float = float("nan")


def _zero_probability(overlap, basis: str):
    overlap = np.asarray(overlap, dtype=complex)
    if np.any(np.abs(overlap) > 1.0 + 1e-10):
        raise ConfigError("overlap magnitude exceeds 1")
    if basis == "real":
        part = overlap.real
    elif basis == "imag":
        part = (overlap * np.exp(-0.5j * np.pi)).real  # = Im overlap
    else:
        raise ConfigError(f"basis must be 'real' or 'imag', got {basis!r}")
    return np.clip((1.0 + part) / 2.0, 0.0, 1.0)


def hadamard_sample(overlap, basis: str, shots: int, rng: np.random.Generator):
    """Fraction of b = 0 outcomes over ``shots`` Hadamard-test shots."""
    p = _zero_probability(overlap, basis)
    return rng.binomial(int(shots), p) / int(shots)


def hadamard_shots(overlap: complex, basis: str, shots: int, rng: np.random.Generator,
                   tag: str = "", T: float = float("nan")) -> list[ShotRecord]:
    """Individual shot records (for logging)."""
    p = float(_zero_probability(overlap, basis))
    bits = (rng.random(int(shots)) >= p).astype(int)
    cp = 0.0 if basis == "real" else np.pi / 2
    return [ShotRecord(tag, cp, int(b), i, T) for i, b in enumerate(bits)]


def write_shot_log(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "basis", "T_j", "outcome"])
        for r in records:
            w.writerow([r.tag, "real" if r.control_phase == 0 else "imag", repr(float(r.T)), r.outcome])
    return path


def hadamard_phase(overlap, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Phase reconstructed from real- and imaginary-basis fractions, in [0, 2 pi)."""
    re = 2.0 * hadamard_sample(overlap, "real", shots, rng) - 1.0
    im = 2.0 * hadamard_sample(overlap, "imag", shots, rng) - 1.0
    return wrap_2pi(np.arctan2(im, re))


def noise_amplification(r: float, theta: float, shots: int, reps: int, rng: np.random.Generator) -> dict:
    """Measured phase-noise ratio sigma(r)/sigma(1) for overlap r e^{i theta}."""
    def spread(rr):
        ph = hadamard_phase(np.full(reps, rr * np.exp(1j * theta)), shots, rng)
        return float(np.sqrt(np.mean(wrap_pi(ph - theta) ** 2)))

    s1, sr = spread(1.0), spread(r)
    return {"measured": sr / s1, "predicted": 1.0 / r, "sigma_unit": s1, "sigma_r": sr}


class HadamardPhaseSource:
    """Phases of <psi0|U_T(1)|psi0> reconstructed from sampled Hadamard tests."""

    tag = "hadamard-sampled"

    def __init__(self, frame: SpectralFrame, shots: int, rng: np.random.Generator, tol=None):
        self.frame, self.shots, self.rng, self.tol = frame, int(shots), rng, tol

    def __call__(self, Ts) -> np.ndarray:
        return hadamard_phase(ground_overlaps(self.frame, Ts, self.tol), self.shots, self.rng)


# ---------------------------------------------------------------------------
# Hadamard pipeline


@dataclass
class HadamardConfig:
    eps: float = 3e-2
    c_T: float = 2.0
    c_N: float = 6.0
    N: int | None = None
    T: float | None = None
    alpha: float = 2.0
    distribution: RuntimeDistribution = field(default_factory=RuntimeDistribution)
    coarse_shots: int = 4096
    seed: int = 0
    overlaps: str = "sampled"  # sampled | exact
    tol_prop: float | None = None
    branch: BranchConfig = field(default_factory=BranchConfig)

    def validate(self):
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.overlaps not in ("sampled", "exact"):
            raise ConfigError("overlaps must be 'sampled' or 'exact'")


def hadamard_runtime(frame: SpectralFrame, eps: float, c_T: float) -> float:
    """T = c_T (||Hdot(0)|| ||Hdot(1)|| / (Delta(0)^4 Delta_min eps))^(1/3)."""
    sc = loop_scales(frame)
    scale = sc["Hdot0"] * sc["Hdot1"] / (sc["gap0"] ** 4 * sc["gap_min"] * eps)
    return max(1.0, c_T * scale ** (1.0 / 3.0))


@dataclass
class HadamardResult:
    theta_hat: float
    theta_oracle: float
    abs_err: float
    T: float
    N: int
    alpha: float
    cost_total_T: float
    coarse: object
    series: EstimateSeries
    phasors: dict

    def summary(self) -> dict:
        return dict(
            theta_hat=self.theta_hat, theta_oracle=self.theta_oracle, abs_err=self.abs_err,
            T0=self.T, N=self.N, alpha=self.alpha, m=1, cost_total_T=self.cost_total_T,
            coarse=self.coarse.value,
        )


def _unit_outcomes(overlap: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One real- and one imaginary-basis shot per overlap, mapped to +-1 each."""
    pr = _zero_probability(overlap, "real")
    pi = _zero_probability(overlap, "imag")
    xr = np.where(rng.random(overlap.shape) < pr, 1.0, -1.0)
    xi = np.where(rng.random(overlap.shape) < pi, 1.0, -1.0)
    return xr + 1j * xi


def hadamard_pipeline(frame: SpectralFrame, config: HadamardConfig | None = None,
                      shot_log: list | None = None) -> HadamardResult:
    """Coarse branch, randomized runtimes, Hadamard sampling, lifting, Richardson.

    Per sample j the forward and reverse interference signals are unbiased
    estimates of <psi|U_{+T_j}|psi> and <psi|U_{-T_j}|psi>; their product
    cancels the dynamical phase sample by sample and its average estimates
    exp(2 i theta~_B).  ``overlaps="exact"`` replaces the shots by exact
    overlaps (bias-only mode).
    """
    cfg = config or HadamardConfig()
    cfg.validate()
    ss = np.random.SeedSequence([int(cfg.seed), 0x4AD])
    rng_coarse, rng_runtime, rng_shot = (np.random.default_rng(s) for s in ss.spawn(3))
    coarse = branch_resolve(frame, HadamardPhaseSource(frame, cfg.coarse_shots, rng_coarse, cfg.tol_prop),
                            cfg.branch)
    T = cfg.T if cfg.T is not None else hadamard_runtime(frame, cfg.eps, cfg.c_T)
    N = int(cfg.N if cfg.N is not None else math.ceil(cfg.c_N / cfg.eps**2))
    Tj = T * sample_unit(cfg.distribution, N, rng_runtime)
    scheme = RichardsonScheme(cfg.alpha, 1)
    Rt = np.stack([Tj, cfg.alpha * Tj], axis=1)  # (N, 2)
    ov = ground_overlaps(frame, np.concatenate([Rt.ravel(), -Rt.ravel()]), cfg.tol_prop)
    fwd, rev = ov[: Rt.size].reshape(Rt.shape), ov[Rt.size:].reshape(Rt.shape)
    if cfg.overlaps == "sampled":
        fwd_s, rev_s = _unit_outcomes(fwd, rng_shot), _unit_outcomes(rev, rng_shot)
        if shot_log is not None:
            shot_log.extend(_log_rows(Rt, fwd_s, rev_s))
    else:
        fwd_s, rev_s = fwd, rev
    prod = (fwd_s * rev_s).mean(axis=0)  # (2,) phasors for T and alpha T
    if np.any(np.abs(prod) == 0):
        raise PipelineInconsistentError("aggregated phasor vanished; increase N")
    est = wrap_2pi(np.angle(prod)) / 2.0
    series = EstimateSeries(oracle=berry_phase_oracle(frame, 0))
    lifted = []
    for k, e in enumerate(est):
        lp = lift(float(e), coarse.value)
        lifted.append(lp)
        series.add(float(T * cfg.alpha**k), lp.value, "hadamard-fwd-rev", int(cfg.seed), lp.interval)
    theta_sep = float(scheme.apply([lp.value for lp in lifted]))
    if abs(theta_sep - coarse.value) > np.pi / 2:
        raise PipelineInconsistentError(
            f"extrapolated value {theta_sep:.4f} left the lifting interval around {coarse.value:.4f}"
        )
    theta_hat = float(wrap_2pi(theta_sep))
    series.add(float(T), theta_hat, "hadamard-richardson", int(cfg.seed), lifted[0].interval)
    # cost: every shot evolves for |T_j| (4 circuits x 2 bases per sample) plus the coarse stage
    cost = 2.0 * 2.0 * float(np.sum(Rt))
    cost += sum(2.0 * 2.0 * cfg.coarse_shots * T1 * (1.0 + coarse.alpha_prime) for T1, _ in coarse.history)
    return HadamardResult(
        theta_hat=theta_hat, theta_oracle=series.oracle, abs_err=float(circ_dist(theta_hat, series.oracle)),
        T=float(T), N=N, alpha=cfg.alpha, cost_total_T=cost, coarse=coarse, series=series,
        phasors={"T": complex(prod[0]), "alphaT": complex(prod[1])},
    )


def _log_rows(Rt, fwd_s, rev_s):
    rows = []
    for j in range(Rt.shape[0]):
        for k, lab in enumerate(("T", "aT")):
            for sgn, s in (("fwd", fwd_s), ("rev", rev_s)):
                tag = f"{sgn}-{lab}"
                v = s[j, k]
                rows.append(ShotRecord(tag, 0.0, int(v.real < 0), j, float(Rt[j, k])))
                rows.append(ShotRecord(tag, np.pi / 2, int(v.imag < 0), j, float(Rt[j, k])))
    return rows


def hadamard_expected_bias(frame: SpectralFrame, dist: RuntimeDistribution, T: float, alpha: float = 2.0,
                           coarse: float | None = None, tol=None, nodes: int | None = None) -> float:
    """N -> infinity, shot-free limit of the Hadamard pipeline error (exact-overlap bias mode).

    The averaged phasors E[z_+(T X) z_-(T X)] are computed by quadrature over X.
    """
    x, w = dist.nodes(nodes or int(32 + T))
    Rt = np.stack([T * x, alpha * T * x], axis=1)
    ov = ground_overlaps(frame, np.concatenate([Rt.ravel(), -Rt.ravel()]), tol)
    fwd, rev = ov[: Rt.size].reshape(Rt.shape), ov[Rt.size:].reshape(Rt.shape)
    prod = w @ (fwd * rev)
    oracle = berry_phase_oracle(frame, 0)
    c = oracle if coarse is None else coarse
    lifted = [lift(float(wrap_2pi(np.angle(p)) / 2.0), c).value for p in prod]
    return float(wrap_pi(RichardsonScheme(alpha, 1).apply(lifted) - oracle))
