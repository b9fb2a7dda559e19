"""Runtime randomization: distributions on [1 - lam, 1 + lam], their
characteristic functions, the randomized Richardson estimator and its
bias / variance diagnostics.

Bias sign: with Phi2_osc(T) = +sum_n B_n cos(omega_n T) (see
:mod:`berryline.apt`), the expected oscillatory term is
E[Phi2_osc(T X)] = +sum_n B_n Re chi(omega_n T).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .apt import AptBreakdown, phase_coefficients
from .errors import ConfigError, DroppedSamplesError
from .estimators import (
    BranchConfig,
    CoarseResult,
    RichardsonScheme,
    branch_resolve,
    fwd_rev_from_phases,
    lift_array,
    wrap_pi,
)
from .propagate import Z_FLOOR, ground_overlaps
from .spectral import SpectralFrame, berry_phase_oracle

KINDS = ("uniform", "triangular", "smooth-bump")
MIN_ACCEPTANCE = 0.01
MAX_DROPPED = 1e-3
QUAD_NODES = 400


# ---------------------------------------------------------------------------
# bump density helpers


def _bump_raw(u, k):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    # exp(-k/(1-u^2)) scaled by e^k so the peak is 1 (no underflow at large k)
    v = u[inside] ** 2
    out[inside] = np.exp(-k * v / (1.0 - v))
    return out


@lru_cache(maxsize=64)
def _bump_norm(k: float) -> float:
    return quad(lambda u: float(_bump_raw(u, k)), -1.0, 1.0, epsabs=0.0, epsrel=1e-13, limit=200)[0]


@lru_cache(maxsize=65536)
def _bump_cos(k: float, w: float) -> float:
    """int rho(u) cos(w u) du for the normalized bump on [-1, 1]."""
    Z = _bump_norm(k)
    f = lambda u: float(_bump_raw(u, k)) / Z
    if abs(w) < 1.0:
        return quad(lambda u: f(u) * math.cos(w * u), -1.0, 1.0, epsabs=1e-15, epsrel=1e-12, limit=200)[0]
    # QAWO (oscillatory weight) on the even half
    return 2.0 * quad(f, 0.0, 1.0, weight="cos", wvar=abs(w), epsabs=1e-15, limit=400)[0]


# ---------------------------------------------------------------------------
# distribution type


@dataclass(frozen=True)
class RuntimeDistribution:
    """Distribution of X = T_j / T on [1 - lam, 1 + lam].

    smooth-bump: density proportional to exp(-k/(1 - u^2)), u = (x - 1)/lam,
    with sharpness k > 0 (larger k concentrates mass near x = 1).
    """

    kind: str = "uniform"
    lam: float = 0.2
    sharpness: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"distribution kind must be one of {KINDS}, got {self.kind!r}")
        if not (0.0 < self.lam < 1.0):
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.kind == "smooth-bump" and not self.sharpness > 0:
            raise ConfigError("bump sharpness must be positive")

    @property
    def support(self) -> tuple[float, float]:
        return (1.0 - self.lam, 1.0 + self.lam)

    def density(self, x) -> np.ndarray:
        u = (np.asarray(x, dtype=float) - 1.0) / self.lam
        if self.kind == "uniform":
            p = np.where(np.abs(u) <= 1.0, 0.5, 0.0)
        elif self.kind == "triangular":
            p = np.clip(1.0 - np.abs(u), 0.0, None)
        else:
            p = _bump_raw(u, self.sharpness) / _bump_norm(self.sharpness)
        return p / self.lam

    def nodes(self, n: int = QUAD_NODES) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes/weights for E[f(X)] (weights sum to 1)."""
        g, w = np.polynomial.legendre.leggauss(n)
        if self.kind == "triangular":
            # kink at the centre: integrate each half separately
            u = np.concatenate([(g - 1.0) / 2.0, (g + 1.0) / 2.0])
            wu = np.concatenate([w, w]) / 2.0
        else:
            u, wu = g, w
        x = 1.0 + self.lam * u
        wx = wu * self.density(x) * self.lam
        return x, wx / wx.sum()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "sharpness": self.sharpness}


def characteristic(dist: RuntimeDistribution, xi) -> np.ndarray:
    """chi(xi) = E[exp(i xi X)]."""
    xi = np.asarray(xi, dtype=float)
    a = dist.lam * xi
    if dist.kind == "uniform":
        env = np.sinc(a / np.pi)
    elif dist.kind == "triangular":
        env = np.sinc(a / (2.0 * np.pi)) ** 2
    else:
        flat = [_bump_cos(float(dist.sharpness), float(v)) for v in np.abs(a).ravel()]
        env = np.array(flat).reshape(a.shape)
    return np.exp(1j * xi) * env


# ---------------------------------------------------------------------------
# sampling


def sample_unit(dist: RuntimeDistribution, N: int, rng: np.random.Generator) -> np.ndarray:
    """N draws of X from ``dist`` using one generator stream."""
    N = int(N)
    if N < 1:
        raise ConfigError("need at least one sample")
    lam = dist.lam
    if dist.kind == "uniform":
        return 1.0 + lam * (2.0 * rng.random(N) - 1.0)
    if dist.kind == "triangular":
        return 1.0 + lam * (rng.random(N) + rng.random(N) - 1.0)
    k = float(dist.sharpness)
    pmax = 1.0 / _bump_norm(k)  # density of u at 0 (its maximum)
    accept_rate = 1.0 / (2.0 * pmax)
    if accept_rate < MIN_ACCEPTANCE:
        raise ConfigError(
            f"bump sharpness {k} gives rejection acceptance {accept_rate:.2e} < {MIN_ACCEPTANCE}"
        )
    out = np.empty(0)
    while out.size < N:
        m = int(1.2 * (N - out.size) / accept_rate) + 16
        u = 2.0 * rng.random(m) - 1.0
        keep = rng.random(m) * pmax < _bump_raw(u, k) / _bump_norm(k)
        out = np.concatenate([out, u[keep]])
    return 1.0 + lam * out[:N]


def sample_runtimes(dist: RuntimeDistribution, T: float, N: int, seed: int) -> np.ndarray:
    if not T > 0:
        raise ConfigError("runtime must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A4D]))
    return T * sample_unit(dist, N, rng)


# ---------------------------------------------------------------------------
# randomized Richardson (exact-overlap mode)


@dataclass
class RandomizedEstimate:
    N: int
    T: float
    alpha: float
    order: int
    dist: RuntimeDistribution
    X: np.ndarray
    Tj: np.ndarray
    samples: np.ndarray  # per-sample lifted Richardson extrapolants (nan if dropped)
    mean: float
    se: float
    bias: float
    oracle: float
    dropped: int
    coarse: float

    def summary(self, predicted_bias: float | None = None, var_bound: float | None = None) -> dict:
        return {
            "N": self.N, "T": self.T, "alpha": self.alpha, "m": self.order,
            "distribution": self.dist.to_dict(), "mean": self.mean, "bias": self.bias,
            "se": self.se, "predicted_bias": predicted_bias, "var_bound": var_bound,
            "dropped": self.dropped,
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "X_j", "T_j", "estimate"])
            for j in range(self.X.size):
                w.writerow([j, repr(float(self.X[j])), repr(float(self.Tj[j])), repr(float(self.samples[j]))])
        return path

    def write_summary(self, path, **kw) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(**kw), indent=1, sort_keys=True) + "\n")
        return path


def shared_coarse(frame: SpectralFrame, tol=None, config: BranchConfig | None = None) -> CoarseResult:
    from .measure import ExactPhaseSource

    return branch_resolve(frame, ExactPhaseSource(frame, tol), config)


def per_sample_estimates(frame: SpectralFrame, Tj: np.ndarray, scheme: RichardsonScheme,
                         coarse: float, tol=None) -> tuple[np.ndarray, np.ndarray]:
    """Lifted Richardson extrapolant for every base runtime in Tj.

    Returns (values, ok-mask); samples with |z| < 1e-6 at any runtime are masked.
    """
    Tj = np.asarray(Tj, dtype=float)
    R = np.multiply.outer(Tj, scheme.alpha ** np.arange(scheme.order + 1))  # (N, m+1)
    signed = np.concatenate([R.ravel(), -R.ravel()])
    ov = ground_overlaps(frame, signed, tol)
    fwd, rev = ov[: R.size].reshape(R.shape), ov[R.size:].reshape(R.shape)
    ok = np.all((np.abs(fwd) >= Z_FLOOR) & (np.abs(rev) >= Z_FLOOR), axis=1)
    est = fwd_rev_from_phases(np.angle(fwd), np.angle(rev))
    lifted = lift_array(est, coarse)
    vals = scheme.apply(lifted)
    vals[~ok] = np.nan
    return vals, ok


def randomized_richardson(frame: SpectralFrame, dist: RuntimeDistribution, T: float, alpha: float = 2.0,
                          m: int = 1, N: int = 2000, seed: int = 0, coarse: CoarseResult | float | None = None,
                          tol=None) -> RandomizedEstimate:
    """Mean of per-sample Richardson extrapolants over runtimes T X_j (exact overlaps)."""
    scheme = RichardsonScheme(alpha, m)
    Tj = sample_runtimes(dist, T, N, seed)
    if coarse is None:
        coarse = shared_coarse(frame, tol)
    c = coarse.value if isinstance(coarse, CoarseResult) else float(coarse)
    vals, ok = per_sample_estimates(frame, Tj, scheme, c, tol)
    dropped = int(np.sum(~ok))
    if dropped > MAX_DROPPED * N:
        raise DroppedSamplesError(f"{dropped}/{N} samples had |z| < {Z_FLOOR}")
    good = vals[ok]
    oracle = berry_phase_oracle(frame, 0)
    mean = float(np.mean(good))
    se = float(np.std(good, ddof=1) / math.sqrt(good.size)) if good.size > 1 else float("nan")
    return RandomizedEstimate(
        N=int(N), T=float(T), alpha=float(alpha), order=int(m), dist=dist, X=Tj / T, Tj=Tj,
        samples=vals, mean=mean, se=se, bias=float(wrap_pi(mean - oracle)), oracle=oracle,
        dropped=dropped, coarse=c,
    )


def expected_estimate(frame: SpectralFrame, dist: RuntimeDistribution, T: float, alpha: float = 2.0,
                      m: int = 1, coarse: float | None = None, tol=None, nodes: int = QUAD_NODES) -> float:
    """N -> infinity limit of the randomized estimator bias (quadrature over X)."""
    scheme = RichardsonScheme(alpha, m)
    x, w = dist.nodes(nodes)
    if coarse is None:
        coarse = shared_coarse(frame, tol).value
    vals, ok = per_sample_estimates(frame, T * x, scheme, coarse, tol)
    if not np.all(ok):
        raise DroppedSamplesError("|z| < 1e-6 at a quadrature node")
    return float(wrap_pi(np.dot(w, vals) - berry_phase_oracle(frame, 0)))


# ---------------------------------------------------------------------------
# analytic bias / variance


def _breakdown(frame, breakdown):
    return breakdown if breakdown is not None else phase_coefficients(frame)


def sample_osc_term(ab: AptBreakdown, Tj, alpha: float = 2.0) -> np.ndarray:
    """Phi2^(alpha, T_j) / T_j^2 for each runtime (leading oscillatory single-event error)."""
    Tj = np.asarray(Tj, dtype=float)
    return ab.richardson_osc(Tj, alpha) / Tj**2


def bias_prediction(frame: SpectralFrame, dist: RuntimeDistribution | None, T: float, alpha: float = 2.0,
                    form: str = "exact", breakdown: AptBreakdown | None = None, nodes: int = QUAD_NODES):
    """Expected oscillatory bias of the m = 1 randomized Richardson estimator.

    form="leading": sum_n B_n [Re chi(alpha w_n T) - Re chi(w_n T)] / ((alpha^2 - 1) T^2),
    the characteristic-function form with the 1/T_j^2 weight frozen at 1/T^2.
    form="exact": E[Phi2^(alpha, T X)/(T X)^2] by quadrature over X, keeping the
    1/X^2 weight.  ``dist=None`` is the point mass at X = 1 (no randomization).
    """
    ab = _breakdown(frame, breakdown)
    T = np.asarray(T, dtype=float)
    if dist is None:
        return sample_osc_term(ab, T, alpha)
    if form == "leading":
        wT = np.multiply.outer(T, ab.omega)
        rc = characteristic(dist, alpha * wT).real - characteristic(dist, wT).real
        return np.sum(ab.B * rc, axis=-1) / ((alpha**2 - 1.0) * T**2)
    if form != "exact":
        raise ConfigError(f"unknown prediction form {form!r}")
    x, w = dist.nodes(nodes)
    vals = sample_osc_term(ab, np.multiply.outer(T, x), alpha)
    return vals @ w


def variance_bound(ab: AptBreakdown, dist: RuntimeDistribution, T: float, alpha: float = 2.0) -> float:
    """(amp sum_n |B_n|)^2 / ((1 - lam)^4 T^4) with amp = max(1, 2/(alpha^2 - 1))."""
    amp = max(1.0, 2.0 / (alpha**2 - 1.0))
    return float((amp * np.sum(np.abs(ab.B))) ** 2 / ((1.0 - dist.lam) ** 4 * T**4))


def variance_report(frame: SpectralFrame, dist: RuntimeDistribution, T: float, alpha: float = 2.0,
                    N: int = 100_000, seed: int = 0, breakdown: AptBreakdown | None = None) -> dict:
    """Analytic bound vs empirical variance of Phi2^(alpha, T_j)/T_j^2."""
    ab = _breakdown(frame, breakdown)
    Tj = sample_runtimes(dist, T, N, seed)
    x = sample_osc_term(ab, Tj, alpha)
    emp = float(np.var(x, ddof=1)) if N > 1 else 0.0
    bound = variance_bound(ab, dist, T, alpha)
    if emp > bound * (1 + 1e-12) + 1e-300:
        raise AssertionError(f"empirical variance {emp:.3e} exceeds bound {bound:.3e}")
    return {"predicted_bound": bound, "empirical": emp, "ratio": emp / bound if bound > 0 else 0.0}


def mean_fluctuation(frame: SpectralFrame, dist: RuntimeDistribution, T: float, Ns, reps: int = 200,
                     alpha: float = 2.0, seed: int = 0, breakdown: AptBreakdown | None = None) -> np.ndarray:
    """Std (over ``reps`` repetitions) of the N-sample mean of Phi2^(alpha, T_j)/T_j^2."""
    ab = _breakdown(frame, breakdown)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF1C]))
    out = []
    for N in Ns:
        X = sample_unit(dist, int(N) * reps, rng).reshape(reps, int(N))
        means = sample_osc_term(ab, T * X, alpha).mean(axis=1)
        out.append(np.std(means, ddof=1))
    return np.array(out)
