"""Experiment orchestration: runtime sweeps, scaling fits, comparison reports,
persistence and CSV plot data.

All randomness derives from the config's master seed; outputs are CSV/JSON.
Period averaging uses omega_1 from the spectral frame, which a real
experiment would not know.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .apt import phase_coefficients
from .errors import BerrylineError, ConfigError
from .estimators import (
    EstimateSeries,
    RichardsonScheme,
    fwd_rev_from_phases,
    lift_array,
    wrap_2pi,
    wrap_pi,
)
from .hamiltonians import ModelSpec, load_config, spec_from_mapping
from .propagate import endpoint_wave_scalar, ground_overlaps
from .randomize import (
    RuntimeDistribution,
    bias_prediction,
    randomized_richardson,
    shared_coarse,
)
from .spectral import DEFAULT_GRID, SpectralFrame, berry_phase_oracle, decompose

STACKS = ("single", "fwd-rev", "richardson", "randomized")
RELIABLE_RMS = 0.2
AVG_POINTS = 16
EXPANSION_Z = 0.3  # sweep fits use only runtimes with |z(1) - 1| below this


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SweepConfig:
    model: ModelSpec
    stack: str = "fwd-rev"
    T_start: float = 50.0
    ratio: float = 2 ** (1 / 3)
    count: int = 13
    alpha: float = 2.0
    order: int = 1
    distribution: RuntimeDistribution = field(default_factory=RuntimeDistribution)
    N: int = 2000
    seed: int = 0
    grid: int = DEFAULT_GRID
    tol_prop: float | None = None
    period_average: bool = True
    outdir: str | None = None

    def validate(self) -> None:
        if self.stack not in STACKS:
            raise ConfigError(f"stack must be one of {STACKS}, got {self.stack!r}")
        if self.count < 4:
            raise ConfigError("a sweep needs at least 4 runtimes")
        if not (self.T_start > 0 and self.ratio > 1):
            raise ConfigError("T grid must be strictly increasing and positive")
        RichardsonScheme(self.alpha, self.order)

    @property
    def runtimes(self) -> np.ndarray:
        return self.T_start * self.ratio ** np.arange(self.count)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("model", "distribution")}
        d["model"] = self.model.to_dict()
        d["distribution"] = self.distribution.to_dict()
        return d


def _dist_from(doc: Mapping | None) -> RuntimeDistribution:
    doc = doc or {}
    return RuntimeDistribution(
        str(doc.get("kind", "uniform")), float(doc.get("lambda", 0.2)), float(doc.get("sharpness", 1.0))
    )


def sweep_config_from(doc: Mapping, overrides: Mapping | None = None) -> SweepConfig:
    """Build a SweepConfig from a parsed config document ([model], [sweep], [run])."""
    sw = dict(doc.get("sweep", {}))
    run = dict(doc.get("run", {}))
    ov = {k: v for k, v in (overrides or {}).items() if v is not None}
    try:
        cfg = SweepConfig(
            model=spec_from_mapping(doc),
            stack=str(sw.get("stack", "fwd-rev")),
            T_start=float(sw.get("T_start", 50.0)),
            ratio=float(sw.get("ratio", 2 ** (1 / 3))),
            count=int(sw.get("count", 13)),
            alpha=float(sw.get("alpha", 2.0)),
            order=int(sw.get("order", 1)),
            distribution=_dist_from(doc.get("randomization")),
            N=int(doc.get("randomization", {}).get("N", 2000)),
            seed=int(ov.get("seed", run.get("seed", 0))),
            grid=int(ov.get("grid", run.get("grid", DEFAULT_GRID))),
            tol_prop=ov.get("tol_prop", run.get("tol_prop")),
            period_average=bool(sw.get("period_average", True)),
            outdir=ov.get("outdir", run.get("outdir")),
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed sweep config: {exc}") from None
    cfg.validate()
    return cfg


def load_sweep_config(path, **overrides) -> SweepConfig:
    return sweep_config_from(load_config(path), overrides)


# ---------------------------------------------------------------------------
# fits


@dataclass
class ScalingFit:
    slope: float
    intercept: float  # natural log of the coefficient
    rms: float  # residual RMS in log10 units
    window: str  # raw | period-averaged
    n: int

    @property
    def reliable(self) -> bool:
        return bool(self.rms < RELIABLE_RMS)

    @property
    def coefficient(self) -> float:
        return float(math.exp(self.intercept))

    def to_dict(self) -> dict:
        return {**asdict(self), "reliable": self.reliable, "coefficient": self.coefficient}


def fixed_slope_coefficient(x, y, slope: float) -> float:
    """Geometric-mean coefficient c of |y| ~ c x^slope with the exponent held fixed."""
    x = np.asarray(x, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    keep = (x > 0) & (y > 0)
    return float(np.exp(np.mean(np.log(y[keep]) - slope * np.log(x[keep]))))


def fit_scaling(x, y, window: str = "raw") -> ScalingFit:
    """Least-squares slope of log|y| against log x."""
    x = np.asarray(x, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    if keep.sum() < 2:
        raise ConfigError("need at least two positive points to fit")
    lx, ly = np.log(x[keep]), np.log(y[keep])
    p = np.polyfit(lx, ly, 1)
    rms = float(np.sqrt(np.mean((ly - np.polyval(p, lx)) ** 2)) / math.log(10))
    return ScalingFit(float(p[0]), float(p[1]), rms, window, int(keep.sum()))


# ---------------------------------------------------------------------------
# estimator stacks (vectorized over runtimes)


def _lifted_fwd_rev(frame, Ts, center, tol):
    Ts = np.asarray(Ts, dtype=float)
    ov = ground_overlaps(frame, np.concatenate([Ts.ravel(), -Ts.ravel()]), tol)
    n = Ts.size
    est = fwd_rev_from_phases(np.angle(ov[:n]), np.angle(ov[n:]))
    return lift_array(est, center).reshape(Ts.shape)


def stack_estimates(frame: SpectralFrame, stack: str, Ts, center: float, alpha: float = 2.0,
                    order: int = 1, tol=None) -> np.ndarray:
    """Deterministic estimates of theta_B at every runtime in Ts.

    single: arg <psi|U_T|psi> + T int E_0 (dynamical phase removed by quadrature)
    fwd-rev: lifted forward-reverse average
    richardson: Richardson combination of lifted forward-reverse averages
    """
    Ts = np.asarray(Ts, dtype=float)
    if stack == "single":
        ov = ground_overlaps(frame, Ts.ravel(), tol)
        est = np.angle(ov) + Ts.ravel() * frame.energy_integral[-1]
        return (center + wrap_pi(est - center)).reshape(Ts.shape)
    if stack == "fwd-rev":
        return _lifted_fwd_rev(frame, Ts, center, tol)
    if stack == "richardson":
        sch = RichardsonScheme(alpha, order)
        R = np.multiply.outer(Ts, alpha ** np.arange(order + 1))
        return sch.apply(_lifted_fwd_rev(frame, R, center, tol))
    raise ConfigError(f"stack {stack!r} has no deterministic estimate")


def period_window(frame: SpectralFrame) -> float:
    """One oscillation period 2 pi / omega_1 in T."""
    return float(2 * np.pi / frame.omega[-1, 1]) if frame.dim > 1 else 1.0


def averaged_abs(fn, Ts, period: float, n: int = AVG_POINTS) -> np.ndarray:
    """Mean of |fn| over a window of one period centred at each T."""
    Ts = np.asarray(Ts, dtype=float)
    offs = period * ((np.arange(n) + 0.5) / n - 0.5)
    grid = Ts[:, None] + offs[None, :]
    return np.mean(np.abs(fn(grid)), axis=1)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    config: SweepConfig
    series: EstimateSeries
    errors: np.ndarray
    fits: dict
    extra: dict = field(default_factory=dict)

    @property
    def model_key(self) -> str:
        return json.dumps(self.config.model.to_dict(), sort_keys=True)

    def costs(self) -> np.ndarray:
        """Total evolved time per grid point for this stack."""
        T = self.series.runtimes
        c = self.config
        if c.stack == "single":
            return T
        if c.stack == "fwd-rev":
            return 2 * T
        geo = np.sum(c.alpha ** np.arange(c.order + 1))
        if c.stack == "richardson":
            return 2 * geo * T
        return 2 * geo * T * c.N

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "series": self.series.to_dict(),
            "errors": self.errors.tolist(),
            "fits": {k: (v.to_dict() if isinstance(v, ScalingFit) else v) for k, v in self.fits.items()},
            "extra": self.extra,
        }


def sweep(cfg: SweepConfig, frame: SpectralFrame | None = None) -> SweepResult:
    """Run one estimator stack over the configured T grid and fit scaling exponents."""
    cfg.validate()
    if frame is None:
        frame = decompose(cfg.model.build(), cfg.grid)
    oracle = berry_phase_oracle(frame, 0)
    coarse = shared_coarse(frame, cfg.tol_prop)
    center = coarse.value
    Ts = cfg.runtimes
    series = EstimateSeries(oracle=oracle, model=cfg.model.to_dict())
    extra: dict = {"coarse": center, "period": period_window(frame)}
    ab = phase_coefficients(frame) if frame.dim > 1 else None
    interval = (center - np.pi / 2, center + np.pi / 2)
    partial_dir = cfg.outdir
    try:
        if cfg.stack == "randomized":
            bias, se, pred, lead = [], [], [], []
            for i, T in enumerate(Ts):
                r = randomized_richardson(frame, cfg.distribution, float(T), cfg.alpha, cfg.order, cfg.N,
                                          seed=_point_seed(cfg.seed, i), coarse=center, tol=cfg.tol_prop)
                series.add(float(T), r.mean, "randomized", _point_seed(cfg.seed, i), interval,
                           {"se": r.se, "dropped": r.dropped})
                bias.append(r.bias)
                se.append(r.se)
                have = ab is not None and cfg.order == 1
                pred.append(float(bias_prediction(frame, cfg.distribution, float(T), cfg.alpha, breakdown=ab))
                            if have else 0.0)
                lead.append(float(bias_prediction(frame, cfg.distribution, float(T), cfg.alpha, form="leading",
                                                  breakdown=ab)) if have else 0.0)
            errors = np.array(bias)
            extra.update(se=se, predicted_bias=pred, predicted_bias_leading=lead)
        else:
            est = stack_estimates(frame, cfg.stack, Ts, center, cfg.alpha, cfg.order, cfg.tol_prop)
            for T, e in zip(Ts, est):
                series.add(float(T), float(e), cfg.stack, cfg.seed, interval)
            errors = wrap_pi(est - oracle)
    except BerrylineError:
        if partial_dir:
            persist(SweepResult(cfg, series, np.array([]), {}, extra), partial_dir)
        raise
    all_errors = errors
    # compare with the 1/T expansion only where it applies
    valid = np.abs(endpoint_wave_scalar(frame, Ts, tol=cfg.tol_prop) - 1.0) < EXPANSION_Z
    extra["expansion_valid"] = valid.tolist()
    if valid.sum() < 2:
        raise ConfigError(f"fewer than two runtimes satisfy |z - 1| < {EXPANSION_Z}; raise T_start")
    Ts, errors = Ts[valid], np.asarray(errors)[valid]
    fits = {"raw": fit_scaling(Ts, errors, "raw")}
    if cfg.period_average and cfg.stack != "randomized" and frame.dim > 1:
        P = period_window(frame)
        fn = lambda g: wrap_pi(stack_estimates(frame, cfg.stack, g, center, cfg.alpha, cfg.order,
                                               cfg.tol_prop) - oracle)
        avg = averaged_abs(fn, Ts, P)
        fits["period-averaged"] = fit_scaling(Ts, avg, "period-averaged")
        extra["averaged_abs_error"] = avg.tolist()
        if cfg.stack == "richardson" and cfg.order == 1 and ab is not None:
            pfn = lambda g: fn(g) - ab.richardson_osc(g, cfg.alpha) / g**2
            ravg = averaged_abs(pfn, Ts, P)
            fits["residual-averaged"] = fit_scaling(Ts, ravg, "period-averaged")
            extra["averaged_residual"] = ravg.tolist()
    if ab is not None:
        extra["phi1"] = ab.phi1
        extra["omega"] = ab.omega.tolist()
    res = SweepResult(cfg, series, np.asarray(all_errors, dtype=float), fits, extra)
    if cfg.outdir:
        persist(res, cfg.outdir)
    return res


def _point_seed(master: int, i: int) -> int:
    """Deterministic per-point seed derived from the master seed."""
    return int(np.random.SeedSequence([int(master), int(i)]).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# persistence


def _fmt(x) -> str:
    return repr(float(x))


def persist(res: SweepResult, outdir) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(res.to_dict(), indent=1, sort_keys=True) + "\n")
    emit_plotdata(res, "error-vs-T", out / "error_vs_T.csv")
    if res.config.stack == "randomized" and res.errors.size:
        emit_plotdata(res, "bias-vs-T", out / "bias_vs_T.csv")
    return out


def load_result(path) -> SweepResult:
    p = Path(path)
    if p.is_dir():
        p = p / "sweep.json"
    doc = json.loads(p.read_text())
    c = dict(doc["config"])
    model = spec_from_mapping({"model": c.pop("model")})
    dist = c.pop("distribution")
    cfg = SweepConfig(model=model, distribution=RuntimeDistribution(dist["kind"], dist["lambda"], dist["sharpness"]),
                      **c)
    fits = {k: ScalingFit(**{f: v[f] for f in ("slope", "intercept", "rms", "window", "n")})
            for k, v in doc["fits"].items()}
    return SweepResult(cfg, EstimateSeries.from_dict(doc["series"]), np.array(doc["errors"]), fits, doc["extra"])


# ---------------------------------------------------------------------------
# comparison


def cost_at_accuracy(res: SweepResult, eps_grid) -> np.ndarray:
    """Minimal total evolved time after which |error| <= eps for every larger T in the sweep."""
    err = np.abs(res.errors)
    tail = np.maximum.accumulate(err[::-1])[::-1]
    cost = res.costs()
    out = []
    for e in eps_grid:
        ok = np.nonzero(tail <= e)[0]
        out.append(float(cost[ok[0]]) if ok.size else float("nan"))
    return np.array(out)


DEFAULT_EPS = 10.0 ** -np.arange(1.0, 7.5, 0.5)


def compare_report(results, eps_grid=DEFAULT_EPS) -> tuple[str, str]:
    """(human-readable text, CSV) comparing sweeps on one model."""
    results = list(results)
    if not results:
        raise ConfigError("compare_report needs at least one sweep (got none)")
    if len(results) < 2:
        raise ConfigError("compare_report needs at least two sweeps")
    keys = {r.model_key for r in results}
    if len(keys) != 1:
        raise ConfigError("sweeps were run on different models; refusing to compare")
    eps_grid = np.asarray(eps_grid, dtype=float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stack", "window", "slope", "coefficient", "rms_log10", "reliable"]
               + [f"cost_eps_{e:.1e}" for e in eps_grid])
    lines = ["estimator stack comparison", "model: " + next(iter(keys)), ""]
    lines.append(f"{'stack':<12}{'window':<18}{'slope':>9}{'coeff':>12}{'rms':>8}")
    costs = {}
    for r in results:
        c = cost_at_accuracy(r, eps_grid)
        costs[r.config.stack] = c
        for name, f in r.fits.items():
            w.writerow([r.config.stack, name, _fmt(f.slope), _fmt(f.coefficient), _fmt(f.rms), f.reliable]
                       + [_fmt(x) for x in c])
            flag = "" if f.reliable else "  (unreliable)"
            lines.append(f"{r.config.stack:<12}{name:<18}{f.slope:9.3f}{f.coefficient:12.4g}{f.rms:8.3f}{flag}")
    phi1 = next((r.extra.get("phi1") for r in results if "phi1" in r.extra), None)
    if phi1 is not None:
        lines += ["", f"APT first-order coefficient phi1 = {phi1:.6g}"]
    cross = crossover(costs, eps_grid)
    if cross is not None:
        lines.append(f"fwd-rev is cheaper than single-evolution for eps_B <= {cross:.3g}")
    lines += ["", "cost at accuracy (total evolved time):"]
    for stack, c in costs.items():
        lines.append(f"  {stack:<12}" + " ".join(f"{e:.0e}:{x:.4g}" for e, x in zip(eps_grid, c)))
    return "\n".join(lines) + "\n", buf.getvalue()


def crossover(costs: Mapping, eps_grid) -> float | None:
    """Largest eps below which fwd-rev is always cheaper than single evolution."""
    if "single" not in costs or "fwd-rev" not in costs:
        return None
    s, f = costs["single"], costs["fwd-rev"]
    best = None
    for i in np.argsort(eps_grid):  # ascending eps
        a, b = s[i], f[i]
        if np.isnan(b):
            break
        if np.isnan(a) or b < a:
            best = float(eps_grid[i])
        else:
            break
    return best


# ---------------------------------------------------------------------------
# runtime requirements


def required_runtime(Ts, errors, eps_grid) -> np.ndarray:
    """Smallest T in the grid after which |error| <= eps at every larger grid runtime."""
    tail = np.maximum.accumulate(np.abs(np.asarray(errors))[::-1])[::-1]
    out = []
    for e in eps_grid:
        ok = np.nonzero(tail <= e)[0]
        out.append(float(Ts[ok[0]]) if ok.size else float("nan"))
    return np.array(out)


def envelope_runtimes(frame: SpectralFrame, dist: RuntimeDistribution, windows, alpha: float = 2.0,
                      step: float = 0.05) -> np.ndarray:
    """One runtime per slow window [k P, (k+1) P), P = pi/(lam omega_1), at the
    maximum of the predicted |bias| (samples the T^-3 envelope, not its zeros)."""
    P = np.pi / (dist.lam * frame.omega[-1, 1])
    ab = phase_coefficients(frame)
    out = []
    for k in windows:
        g = np.arange(k * P, (k + 1) * P, step)
        out.append(float(g[np.argmax(np.abs(bias_prediction(frame, dist, g, alpha, breakdown=ab)))]))
    return np.array(out)


def envelope_requirement(Ts, bias, eps_grid) -> np.ndarray:
    """Runtime at which the envelope |bias(T)| crosses eps (log-log interpolation)."""
    lT, lb = np.log(np.asarray(Ts)), np.log(np.abs(np.asarray(bias)))
    order = np.argsort(lb)
    return np.exp(np.interp(np.log(eps_grid), lb[order], lT[order], left=np.nan, right=np.nan))


# ---------------------------------------------------------------------------
# plot data


def residual_spectrum(T, residual) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed DFT amplitude of T^2 * residual on a uniform T grid.

    Returns (angular frequencies, amplitudes); the mean is removed first.
    """
    T = np.asarray(T, dtype=float)
    dT = np.diff(T)
    if not np.allclose(dT, dT[0], rtol=1e-9):
        raise ConfigError("residual spectrum needs a uniform T grid")
    y = T**2 * np.asarray(residual, dtype=float)
    y = y - y.mean()
    win = np.hanning(y.size)
    amp = np.abs(np.fft.rfft(y * win)) * 2.0 / win.sum()
    freq = 2 * np.pi * np.fft.rfftfreq(y.size, d=dT[0])
    return freq, amp


def richardson_residual_grid(frame: SpectralFrame, T_lo: float, T_hi: float, n: int, alpha: float = 2.0,
                             tol=None) -> tuple[np.ndarray, np.ndarray]:
    """Richardson (m = 1) error on a dense uniform T grid."""
    T = np.linspace(T_lo, T_hi, int(n))
    oracle = berry_phase_oracle(frame, 0)
    center = shared_coarse(frame, tol).value
    est = stack_estimates(frame, "richardson", T, center, alpha, 1, tol)
    return T, wrap_pi(est - oracle)


def low_frequency_fraction(freq, amp, cutoff: float, margin_bins: int = 2) -> float:
    """Largest amplitude below ``cutoff`` over the peak amplitude.

    The Hann main lobe is two bins wide on each side, so bins within
    ``margin_bins`` of the cutoff (and of DC) are attributed to the resolved
    lines there rather than to genuine low-frequency content.
    """
    df = freq[1] - freq[0]
    low = (freq < cutoff - margin_bins * df) & (freq > margin_bins * df)
    return float(amp[low].max() / amp.max()) if low.any() else 0.0


def emit_plotdata(res, kind: str, path, spectrum=None) -> Path:
    """Tidy CSV with '#' header comments documenting the columns."""
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if kind == "error-vs-T":
        pts = res.series.points
        if not pts:
            raise ConfigError("empty series")
        buf.write("# T: runtime; estimate: theta_B estimate (rad); error: estimate - oracle wrapped to (-pi, pi]\n")
        w.writerow(["T", "estimate", "error", "abs_error", "tag"])
        for p, e in zip(pts, res.errors):
            w.writerow([_fmt(p.T), _fmt(p.estimate), _fmt(e), _fmt(abs(e)), p.tag])
    elif kind == "bias-vs-T":
        if res.config.stack != "randomized":
            raise ConfigError("bias-vs-T needs a randomized sweep")
        buf.write("# T: base runtime; bias: mean - oracle; se: standard error; predicted_bias: E over X of the"
                  " oscillatory remainder (1/X^2 kept); predicted_bias_leading: characteristic-function form\n")
        w.writerow(["T", "bias", "se", "predicted_bias", "predicted_bias_leading"])
        lead = res.extra.get("predicted_bias_leading", [float("nan")] * len(res.errors))
        for p, b, s, q, l in zip(res.series.points, res.errors, res.extra["se"], res.extra["predicted_bias"], lead):
            w.writerow([_fmt(p.T), _fmt(b), _fmt(s), _fmt(q), _fmt(l)])
    elif kind == "residual-spectrum":
        if spectrum is None:
            raise ConfigError("residual-spectrum needs (T, residual) arrays")
        freq, amp = residual_spectrum(*spectrum)
        buf.write("# omega: angular frequency in T; freq: cycles per unit T; amplitude: |DFT| of T^2 residual\n")
        w.writerow(["omega", "freq", "amplitude"])
        for f, a in zip(freq, amp):
            w.writerow([_fmt(f), _fmt(f / (2 * np.pi)), _fmt(a)])
    else:
        raise ConfigError(f"unknown plot-data kind {kind!r}")
    path.write_text(buf.getvalue())
    return path
