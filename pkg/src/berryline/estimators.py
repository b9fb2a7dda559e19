"""Deterministic estimator stack: forward-reverse averaging, Richardson
extrapolation, branch resolution by runtime scaling, and mod-pi lifting.

Phase sources are plain callables ``source(Ts) -> eigenphases`` taking
*signed* runtimes (negative = reverse evolution under -H) and returning
phases in [0, 2 pi).  See :mod:`berryline.measure` for exact, QPE-sampled
and Hadamard-sampled sources.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AmbiguousLiftError,
    BranchResolutionError,
    ConfigError,
    UnliftedEstimateError,
)
from .spectral import SpectralFrame, berry_phase_oracle

TWO_PI = 2.0 * np.pi
LIFT_EDGE = 1e-9

PhaseSource = Callable[[np.ndarray], np.ndarray]


def wrap_2pi(x):
    """[0, 2 pi) representative (np.mod can round tiny negatives up to 2 pi)."""
    r = np.mod(x, TWO_PI)
    return np.where(r >= TWO_PI, 0.0, r)


def wrap_pi(x):
    """(-pi, pi] representative."""
    return -((-np.asarray(x, dtype=float) + np.pi) % TWO_PI - np.pi)


def circ_dist(a, b):
    """Distance on the circle of circumference 2 pi."""
    return np.abs(wrap_pi(np.asarray(a) - np.asarray(b)))


def circ_dist_pi(a, b):
    """Distance modulo pi."""
    d = np.mod(np.asarray(a) - np.asarray(b), np.pi)
    return np.minimum(d, np.pi - d)


# ---------------------------------------------------------------------------
# forward-reverse


@dataclass(frozen=True)
class PhasePair:
    T: float
    forward: float
    reverse: float
    source: str = "exact-propagator"

    def __post_init__(self):
        for name in ("forward", "reverse"):
            v = getattr(self, name)
            if not (0.0 <= v < TWO_PI):
                object.__setattr__(self, name, float(wrap_2pi(v)))
        if self.source not in ("exact-propagator", "qpe-sampled", "hadamard-sampled"):
            raise ConfigError(f"unknown phase source {self.source!r}")


def forward_reverse_estimate(pair: PhasePair) -> float:
    """((forward + reverse) mod 2 pi) / 2, a representative of theta_B mod pi in [0, pi)."""
    return float(wrap_2pi(pair.forward + pair.reverse) / 2.0)


def fwd_rev_from_phases(forward, reverse):
    """Vectorized forward-reverse estimate in [0, pi)."""
    return wrap_2pi(np.asarray(forward) + np.asarray(reverse)) / 2.0


# ---------------------------------------------------------------------------
# Richardson


@dataclass(frozen=True)
class RichardsonScheme:
    alpha: float = 2.0
    order: int = 1

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise ConfigError(f"Richardson alpha must exceed 1, got {self.alpha}")
        if int(self.order) != self.order or self.order < 1:
            raise ConfigError(f"Richardson order must be a positive integer, got {self.order}")

    @property
    def weights(self) -> np.ndarray:
        """w_{m,k}, k = 0..m, built by the recursive elimination of T^-2j terms."""
        w = np.array([1.0])
        a2 = self.alpha**2
        for j in range(1, self.order + 1):
            shifted = np.concatenate([[0.0], w])
            base = np.concatenate([w, [0.0]])
            w = (a2**j * shifted - base) / (a2**j - 1.0)
        return w

    @property
    def weight_sum(self) -> float:
        return float(np.sum(np.abs(self.weights)))

    @property
    def weight_bound(self) -> float:
        a2 = self.alpha**2
        return (self.order + 1) * (a2 / (a2 - 1.0)) ** self.order

    def runtimes(self, T: float) -> np.ndarray:
        return T * self.alpha ** np.arange(self.order + 1)

    def apply(self, values) -> float | np.ndarray:
        """Combine raw values f(alpha^k T), k = 0..m (last axis)."""
        v = np.asarray(values, dtype=float)
        if v.shape[-1] != self.order + 1:
            raise ConfigError(f"need {self.order + 1} values, got {v.shape[-1]}")
        return v @ self.weights


@dataclass(frozen=True)
class LiftedPhase:
    """A mod-pi estimate placed on the branch (coarse - pi/2, coarse + pi/2)."""

    value: float
    coarse: float

    @property
    def interval(self) -> tuple[float, float]:
        return (self.coarse - np.pi / 2, self.coarse + np.pi / 2)


def lift(estimate_mod_pi: float, coarse: float) -> LiftedPhase:
    """Unique representative of ``estimate_mod_pi`` (mod pi) inside (coarse - pi/2, coarse + pi/2)."""
    est = float(estimate_mod_pi)
    k = math.floor((coarse - est) / np.pi + 0.5)
    x = est + k * np.pi
    if abs(abs(x - coarse) - np.pi / 2) < LIFT_EDGE:
        raise AmbiguousLiftError(
            f"estimate {est:.12f} sits on the edge of the lifting interval around {coarse:.12f}"
        )
    return LiftedPhase(float(x), float(coarse))


def lift_array(est, coarse: float) -> np.ndarray:
    """Vectorized lift (no ambiguity check; used for per-sample randomized estimates)."""
    est = np.asarray(est, dtype=float)
    k = np.floor((coarse - est) / np.pi + 0.5)
    return est + k * np.pi


def richardson(scheme: RichardsonScheme, estimates: Sequence[LiftedPhase]) -> float:
    """Richardson extrapolant of lifted estimates at T * alpha^k, k = 0..m."""
    if len(estimates) != scheme.order + 1:
        raise ConfigError(f"scheme of order {scheme.order} needs {scheme.order + 1} estimates")
    if not all(isinstance(e, LiftedPhase) for e in estimates):
        raise UnliftedEstimateError("Richardson needs lifted estimates (mod-pi values carry no branch)")
    centers = {round(e.coarse, 12) for e in estimates}
    if len(centers) != 1:
        raise UnliftedEstimateError("estimates were lifted against different coarse values")
    return float(scheme.apply([e.value for e in estimates]))


# ---------------------------------------------------------------------------
# estimate series


@dataclass
class SeriesPoint:
    T: float
    estimate: float
    tag: str
    seed: int | None = None
    interval: tuple[float, float] | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class EstimateSeries:
    points: list = field(default_factory=list)
    oracle: float = float("nan")
    model: dict = field(default_factory=dict)

    def add(self, *args, **kw) -> None:
        self.points.append(SeriesPoint(*args, **kw))

    @property
    def runtimes(self) -> np.ndarray:
        return np.array([p.T for p in self.points])

    @property
    def estimates(self) -> np.ndarray:
        return np.array([p.estimate for p in self.points])

    def errors(self) -> np.ndarray:
        """Signed error on the circle, (-pi, pi]."""
        return wrap_pi(self.estimates - self.oracle)

    def to_dict(self) -> dict:
        return {
            "oracle": self.oracle,
            "model": self.model,
            "points": [
                {**asdict(p), "interval": list(p.interval) if p.interval else None} for p in self.points
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimateSeries":
        pts = []
        for p in doc["points"]:
            p = dict(p)
            if p.get("interval") is not None:
                p["interval"] = tuple(p["interval"])
            pts.append(SeriesPoint(**p))
        return cls(pts, float(doc["oracle"]), dict(doc.get("model", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# branch resolution


@dataclass
class BranchConfig:
    c_T1: float = 4.0
    max_doublings: int = 6
    agreement: float = np.pi / 8


@dataclass
class CoarseResult:
    value: float  # in [0, 2 pi)
    T1: float
    alpha_prime: float
    doublings: int
    history: list

    @property
    def interval(self) -> tuple[float, float]:
        return (self.value - np.pi / 2, self.value + np.pi / 2)


def loop_scales(frame: SpectralFrame) -> dict:
    """H_max, Hdot_max, Delta_min, ||Hdot(0)||, ||Hdot(1)||, Delta(0) from the frame."""
    E = frame.energies
    H_max = float(np.max(np.abs(E)))
    ev = np.abs(np.linalg.eigvalsh(frame.hdot))
    return dict(
        H_max=H_max,
        Hdot_max=float(ev.max()),
        gap_min=frame.gap_min,
        Hdot0=float(ev[0].max()),
        Hdot1=float(ev[-1].max()),
        gap0=frame.gap0,
    )


def scaling_combination(theta_T1, theta_aT1, alpha_prime: float) -> float:
    """Eliminate the dynamical phase between two runtimes: result in [0, 2 pi).

    theta(T) = -T E + theta_B + O(1/T);  with d = wrap(theta(a'T) - theta(T)),
    theta(T) - d/(a' - 1) removes -T E as long as |(a'-1) T E| < pi.
    """
    d = wrap_pi(theta_aT1 - theta_T1)
    return float(wrap_2pi(theta_T1 - d / (alpha_prime - 1.0)))


def branch_resolve(frame: SpectralFrame, source: PhaseSource, config: BranchConfig | None = None) -> CoarseResult:
    """Coarse Berry-phase estimate, accurate to pi/4, by runtime scaling.

    Forward eigenphases at T1 and alpha' T1, alpha' = 1 + pi/(T1 H_max + pi).
    T1 doubles until the estimates at T1 and 2 T1 agree to within pi/8.
    """
    cfg = config or BranchConfig()
    sc = loop_scales(frame)
    gap = sc["gap_min"] if np.isfinite(sc["gap_min"]) else 1.0
    T1 = max(cfg.c_T1 * sc["Hdot_max"] ** 2 / gap**3, 2 * np.pi / gap)
    Hm = max(sc["H_max"], 1e-12)

    def estimate(T):
        ap = 1.0 + np.pi / (T * Hm + np.pi)
        th = source(np.array([T, ap * T]))
        return scaling_combination(th[0], th[1], ap), ap

    history = []
    prev, _ = estimate(T1)
    history.append((T1, prev))
    for k in range(cfg.max_doublings):
        T1 *= 2.0
        cur, ap = estimate(T1)
        history.append((T1, cur))
        if circ_dist(cur, prev) < cfg.agreement:
            return CoarseResult(cur, T1, ap, k + 1, history)
        prev = cur
    raise BranchResolutionError(
        f"coarse estimate did not stabilise after {cfg.max_doublings} doublings: {history}"
    )


# ---------------------------------------------------------------------------
# QPE pipeline


@dataclass
class PipelineConfig:
    eps: float = 1e-3
    alpha: float = 2.0
    order: int = 1
    c_T: float = 2.0
    mode: str = "exact"  # exact | qpe
    m_bits: int | None = None
    repetitions: int | None = None
    eta: float = 0.05
    seed: int = 0
    tol_prop: float | None = None
    T_floor: float = 1.0
    branch: BranchConfig = field(default_factory=BranchConfig)

    def validate(self):
        if not 0 < self.eps < 1:
            raise ConfigError("eps must lie in (0, 1)")
        if self.mode not in ("exact", "qpe"):
            raise ConfigError(f"mode must be 'exact' or 'qpe', got {self.mode!r}")


@dataclass
class PipelineResult:
    theta_hat: float
    theta_oracle: float
    abs_err: float
    T0: float
    alpha: float
    m: int
    cost_total_T: float
    coarse: CoarseResult
    series: EstimateSeries
    lifted: list

    def summary(self) -> dict:
        return dict(
            theta_hat=self.theta_hat, theta_oracle=self.theta_oracle, abs_err=self.abs_err,
            T0=self.T0, alpha=self.alpha, m=self.m, cost_total_T=self.cost_total_T,
            coarse=self.coarse.value, T1=self.coarse.T1,
        )


def algorithm_runtime(frame: SpectralFrame, eps: float, c_T: float, T_floor: float = 1.0) -> float:
    """T0 = c_T ||Hdot(0)|| / (Delta(0)^2 sqrt(eps)), floored."""
    sc = loop_scales(frame)
    return max(T_floor, c_T * sc["Hdot0"] / (sc["gap0"] ** 2 * math.sqrt(eps)))


def full_qpe_pipeline(frame: SpectralFrame, config: PipelineConfig | None = None) -> PipelineResult:
    """Forward-reverse phases at T0 alpha^k, branch resolution, lifting, Richardson."""
    from .measure import ExactPhaseSource, QpeConfig, QpePhaseSource, qpe_bits_for

    cfg = config or PipelineConfig()
    cfg.validate()
    scheme = RichardsonScheme(cfg.alpha, cfg.order)
    T0 = algorithm_runtime(frame, cfg.eps, cfg.c_T, cfg.T_floor)
    Ts = scheme.runtimes(T0)
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x51E]))
    if cfg.mode == "exact":
        source = ExactPhaseSource(frame, cfg.tol_prop)
        coarse_source = source
        tag = "exact-propagator"
        m_bits, reps = 0, 1
    else:
        m_bits = cfg.m_bits or qpe_bits_for(cfg.eps * 0.1 / scheme.weight_sum)
        reps = cfg.repetitions or (2 * int(math.ceil(math.log2(8.0 / cfg.eta))) + 1)
        source = QpePhaseSource(frame, QpeConfig(m_bits, reps), rng, cfg.tol_prop)
        sc = loop_scales(frame)
        coarse_bits = qpe_bits_for(np.pi / (64.0 * (1.0 + (sc["H_max"] * 64 + np.pi) / np.pi)))
        coarse_source = QpePhaseSource(frame, QpeConfig(min(24, coarse_bits), reps), rng, cfg.tol_prop)
        tag = "qpe-sampled"
    signed = np.concatenate([Ts, -Ts])
    phases = source(signed)
    fwd, rev = phases[: Ts.size], phases[Ts.size:]
    coarse = branch_resolve(frame, coarse_source, cfg.branch)
    series = EstimateSeries(oracle=berry_phase_oracle(frame, 0))
    lifted = []
    for T, f, r in zip(Ts, fwd, rev):
        est = forward_reverse_estimate(PhasePair(float(T), float(f), float(r), tag))
        lp = lift(est, coarse.value)
        lifted.append(lp)
        series.add(float(T), lp.value, "fwd-rev", int(cfg.seed), lp.interval)
    theta_sep = richardson(scheme, lifted)
    theta_hat = float(wrap_2pi(theta_sep))
    series.add(float(T0), theta_hat, f"richardson-m{cfg.order}", int(cfg.seed), lifted[0].interval)
    # cost proxy: total simulated evolution time, controlled-U^(2^j) for j < m per repetition
    per_run = (2**m_bits - 1) * reps if m_bits else 1
    cost = 2.0 * per_run * float(np.sum(Ts))
    coarse_cost = sum(T * (1 + 1.0) for T, _ in coarse.history)
    return PipelineResult(
        theta_hat=theta_hat, theta_oracle=series.oracle,
        abs_err=float(circ_dist(theta_hat, series.oracle)), T0=float(T0), alpha=cfg.alpha,
        m=cfg.order, cost_total_T=cost + coarse_cost, coarse=coarse, series=series, lifted=lifted,
    )
