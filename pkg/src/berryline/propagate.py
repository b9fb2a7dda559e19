"""True and ideal adiabatic propagators around the loop.

Integrator: fourth-order commutator-free Magnus scheme.  Each step of size h
applies exp(-i h T K_A) then exp(-i h T K_B) with K_A, K_B fixed linear
combinations of H at the two Gauss nodes.  For the true evolution K_A and
K_B do not depend on T, so one eigendecomposition per step serves every
runtime (and both directions: reverse evolution under -H is runtime -T).
Step counts double until the difference between successive refinements,
divided by 15 (fourth-order Richardson), is below ``tol``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ConfigError, PhaseUndefinedError, RuntimeTooLargeError
from .hamiltonians import LoopHamiltonian
from .spectral import SpectralFrame

_R3 = math.sqrt(3.0)
GAUSS_NODES = (0.5 - _R3 / 6.0, 0.5 + _R3 / 6.0)
CF4_A = (0.25 + _R3 / 6.0, 0.25 - _R3 / 6.0)

MAX_STEPS = 2**26
DEFAULT_CHECKPOINTS = 257
Z_FLOOR = 1e-6

_CACHE: dict = {}
_CACHE_SIZE = 6


def default_tol(T) -> float:
    return 1e-10 * (1.0 + float(np.max(np.abs(T))))


def _direction_sign(direction: str) -> float:
    if direction in ("forward", "fwd", "+"):
        return 1.0
    if direction in ("reverse", "rev", "-"):
        return -1.0
    raise ConfigError(f"direction must be 'forward' or 'reverse', got {direction!r}")


def _checkpoints(checkpoints) -> np.ndarray:
    if checkpoints is None:
        return np.linspace(0.0, 1.0, DEFAULT_CHECKPOINTS)
    c = np.asarray(checkpoints, dtype=float).ravel()
    if c.size == 0 or np.any(c < 0) or np.any(c > 1) or np.any(np.diff(c) < 0):
        raise ConfigError("checkpoints must be sorted values in [0, 1]")
    return c


def _layout(c: np.ndarray, K: int):
    """Step edges with every checkpoint on an edge; returns (edges, edge index per checkpoint)."""
    knots = np.unique(np.concatenate([[0.0], c, [1.0]]))
    pieces, idx, n_tot = [knots[:1]], {0.0: 0}, 0
    for a, b in zip(knots[:-1], knots[1:]):
        n = max(1, int(math.ceil(K * (b - a) - 1e-9)))
        pieces.append(np.linspace(a, b, n + 1)[1:])
        n_tot += n
        idx[b] = n_tot
    edges = np.concatenate(pieces)
    return edges, np.array([idx[x] for x in c])


@dataclass
class _Table:
    """Per-step spectral factors of the two CF4 exponents."""

    h: np.ndarray  # (K,)
    eA: np.ndarray  # (K, d)
    eB: np.ndarray
    VA0: np.ndarray  # (d, d) first-step basis
    X: np.ndarray  # (K, d, d)  V_B^dag V_A
    Z: np.ndarray  # (K, d, d)  V_A(next)^dag V_B   (last entry: V_B)
    VB: np.ndarray  # (K, d, d) to leave the rotating basis at recorded edges


def _table_from_generator(gen, edges: np.ndarray) -> _Table:
    h = np.diff(edges)
    s0 = edges[:-1]
    G1 = gen(s0 + GAUSS_NODES[0] * h)
    G2 = gen(s0 + GAUSS_NODES[1] * h)
    eA, VA = np.linalg.eigh(CF4_A[0] * G1 + CF4_A[1] * G2)
    eB, VB = np.linalg.eigh(CF4_A[1] * G1 + CF4_A[0] * G2)
    VBd = np.conj(np.swapaxes(VB, -1, -2))
    X = VBd @ VA
    Z = np.empty_like(X)
    Z[:-1] = np.conj(np.swapaxes(VA[1:], -1, -2)) @ VB[:-1]
    Z[-1] = VB[-1]
    return _Table(h, eA, eB, VA[0], X, Z, VB)


def _true_table(H: LoopHamiltonian, c: np.ndarray, K: int):
    key = (id(H), K, c.tobytes())
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is H:
        return hit[1], hit[2]
    edges, rec = _layout(c, K)
    tab = _table_from_generator(H.evaluate, edges)
    if len(_CACHE) >= _CACHE_SIZE:
        _CACHE.pop(next(iter(_CACHE)))
    _CACHE[key] = (H, tab, rec)
    return tab, rec


def clear_cache() -> None:
    _CACHE.clear()


def _run(tab: _Table, Ts: np.ndarray, Y0: np.ndarray, rec: np.ndarray) -> np.ndarray:
    """Propagate columns Y0 (d, nc) for every runtime in Ts.

    Returns states at the recorded edges, shape (len(rec), nT, d, nc).
    """
    d, nc = Y0.shape
    nT = Ts.size
    K = tab.h.size
    out = np.empty((rec.size, nT, d, nc), dtype=complex)
    want = {}
    for j, e in enumerate(rec):
        want.setdefault(int(e), []).append(j)
    y0 = np.broadcast_to(Y0[:, None, :], (d, nT, nc)).astype(complex)
    for j in want.get(0, []):
        out[j] = np.transpose(y0, (1, 0, 2))
    c = (tab.VA0.conj().T @ y0.reshape(d, -1)).reshape(d, nT, nc)
    chunk = max(1, min(K, (1 << 21) // max(1, nT * d)))
    for k0 in range(0, K, chunk):
        k1 = min(K, k0 + chunk)
        hT = tab.h[k0:k1, None, None] * Ts[None, :, None]
        PA = np.exp(-1j * hT * tab.eA[k0:k1, None, :])  # (chunk, nT, d)
        PB = np.exp(-1j * hT * tab.eB[k0:k1, None, :])
        for k in range(k0, k1):
            c *= PA[k - k0].T[:, :, None]
            c = (tab.X[k] @ c.reshape(d, -1)).reshape(d, nT, nc)
            c *= PB[k - k0].T[:, :, None]
            js = want.get(k + 1)
            if js:
                y = (tab.VB[k] @ c.reshape(d, -1)).reshape(d, nT, nc)
                for j in js:
                    out[j] = np.transpose(y, (1, 0, 2))
            c = (tab.Z[k] @ c.reshape(d, -1)).reshape(d, nT, nc)
    return out


def _initial_steps(H: LoopHamiltonian, Tmax: float, c: np.ndarray) -> int:
    s = np.linspace(0.0, 1.0, 65)
    ev = np.linalg.eigvalsh(H.evaluate(s))
    spread = float(np.max(ev[:, -1] - ev[:, 0])) if H.dim > 1 else 0.0
    base = max(64.0, 2.0 * Tmax * spread)
    K = 1 << int(math.ceil(math.log2(base)))
    # keep uniform checkpoint grids aligned with the step grid
    n_seg = max(1, c.size - 1)
    while K < n_seg:
        K *= 2
    return K


@dataclass
class IntegratorReport:
    steps: int
    defect: float
    error_estimate: float
    tol: float

    def as_dict(self) -> dict:
        return dict(steps=self.steps, defect=self.defect, error_estimate=self.error_estimate, tol=self.tol)


def _adaptive(make_table, Ts, Y0, c, K0, tol):
    """Double steps until ||Y_2K - Y_K|| / 15 <= tol.  Returns (states, report).

    If the defect stops shrinking at the fourth-order rate while already at
    round-off level, the finer result is accepted (tolerance below the floor).
    """
    K = K0
    tab, rec = make_table(K)
    prev = _run(tab, Ts, Y0, rec)
    last = None
    while True:
        tab, rec = make_table(2 * K)
        cur = _run(tab, Ts, Y0, rec)
        defect = float(np.max(np.abs(cur - prev)))
        if not np.isfinite(defect):
            raise RuntimeTooLargeError("propagation produced non-finite states")
        est = defect / 15.0
        if est <= tol:
            return cur, IntegratorReport(2 * K, defect, est, tol)
        if last is not None and defect > last / 4.0 and defect < 1e-9 * max(1.0, np.max(np.abs(Ts))):
            return cur, IntegratorReport(2 * K, defect, est, tol)
        # fourth-order prediction of the step count that meets tol
        need = 2 * K * (est / tol) ** 0.25
        if 2 * K >= MAX_STEPS or need > MAX_STEPS:
            raise RuntimeTooLargeError(
                f"propagation needs about {need:.3g} steps (cap {MAX_STEPS}); relax tol_prop (currently {tol:.2e})"
            )
        prev, K, last = cur, 2 * K, defect


# ---------------------------------------------------------------------------
# batched endpoint helpers (sweeps and pipelines)


def propagate_batch(H: LoopHamiltonian, Ts, Y0=None, checkpoints=(1.0,), tol=None):
    """States U_T(s) Y0 for signed runtimes Ts (negative T = reverse evolution).

    Returns (states of shape (n_checkpoints, nT, d, nc), IntegratorReport).
    """
    Ts = np.atleast_1d(np.asarray(Ts, dtype=float))
    if np.any(Ts == 0):
        raise ConfigError("runtime must be non-zero")
    c = _checkpoints(checkpoints)
    Y0 = np.eye(H.dim, dtype=complex) if Y0 is None else np.asarray(Y0, dtype=complex)
    if Y0.ndim == 1:
        Y0 = Y0[:, None]
    tol = default_tol(Ts) if tol is None else float(tol)
    Tmax = float(np.max(np.abs(Ts)))
    K0 = _initial_steps(H, Tmax, c)
    return _adaptive(lambda K: _true_table(H, c, K), Ts, Y0, c, K0, tol)


def ground_overlaps(frame: SpectralFrame, Ts, tol=None) -> np.ndarray:
    """<psi(0)|U_T(1)|psi(0)> for signed runtimes Ts."""
    psi0 = frame.eigenvectors[0][:, 0]
    states, _ = propagate_batch(frame.hamiltonian, Ts, psi0, (1.0,), tol)
    return np.einsum("i,ti->t", psi0.conj(), states[0, :, :, 0])


def final_states(frame: SpectralFrame, Ts, tol=None) -> np.ndarray:
    """U_T(1)|psi(0)> for signed runtimes, shape (nT, d)."""
    psi0 = frame.eigenvectors[0][:, 0]
    states, _ = propagate_batch(frame.hamiltonian, Ts, psi0, (1.0,), tol)
    return states[0, :, :, 0]


def endpoint_wave_scalar(frame: SpectralFrame, Ts, direction: str = "forward", tol=None,
                         theta_b: float | None = None) -> np.ndarray:
    """z(1) using the exact ideal endpoint U_A(1)|psi0> = exp(-+i theta_D + i theta_B)|psi0>.

    ``theta_b`` defaults to the integrated connection of the frame (equal to
    the Wilson loop modulo 2 pi).
    """
    sign = _direction_sign(direction)
    Ts = np.atleast_1d(np.asarray(Ts, dtype=float))
    ov = ground_overlaps(frame, sign * Ts, tol)
    tb = frame.theta_b[-1, 0] if theta_b is None else theta_b
    ideal_phase = -sign * Ts * frame.energy_integral[-1] + tb
    return np.exp(-1j * ideal_phase) * ov


def endpoint_phase_error(frame: SpectralFrame, Ts, direction: str = "forward", tol=None):
    """(phi(1), p_leak(1)) arrays; phi is taken in (-pi, pi]."""
    z = endpoint_wave_scalar(frame, Ts, direction, tol)
    if np.any(np.abs(z) < Z_FLOOR):
        raise PhaseUndefinedError("|z(1)| < 1e-6; phase error undefined")
    return np.angle(z), 1.0 - np.abs(z) ** 2


# ---------------------------------------------------------------------------
# full records


@dataclass
class EvolutionRecord:
    runtime: float
    direction: str
    checkpoints: np.ndarray
    U_true: np.ndarray | None = None
    U_ideal: np.ndarray | None = None
    z: np.ndarray | None = None
    phase_error: np.ndarray | None = None
    leakage: np.ndarray | None = None
    dyn_phase: np.ndarray | None = None
    integrator_report: dict = field(default_factory=dict)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "re_z", "im_z", "phi", "p_leak", "theta_D"])
            for i, s in enumerate(self.checkpoints):
                w.writerow(
                    [repr(float(s)), repr(float(self.z[i].real)), repr(float(self.z[i].imag)),
                     repr(float(self.phase_error[i])), repr(float(max(0.0, self.leakage[i]))),
                     repr(float(self.dyn_phase[i]))]
                )
        return path


def _dyn_phase(H: LoopHamiltonian, frame: SpectralFrame | None, T: float, sign: float, c: np.ndarray):
    if frame is not None:
        spline = CubicSpline(frame.grid, frame.energy_integral)
        return sign * T * spline(c)
    s = np.linspace(0.0, 1.0, 4097)
    e0 = np.linalg.eigvalsh(H.evaluate(s))[:, 0]
    from scipy.integrate import cumulative_simpson

    return sign * T * CubicSpline(s, cumulative_simpson(e0, x=s, initial=0.0))(c)


def evolve_true(H: LoopHamiltonian, T: float, direction: str = "forward", checkpoints=None,
                tol=None) -> EvolutionRecord:
    """U_T(s) at checkpoints (reverse: generated by -H)."""
    if not T > 0:
        raise ConfigError("runtime T must be positive")
    sign = _direction_sign(direction)
    c = _checkpoints(checkpoints)
    tol = default_tol(T) if tol is None else tol
    states, rep = propagate_batch(H, [sign * T], None, c, tol)
    return EvolutionRecord(
        runtime=float(T), direction="forward" if sign > 0 else "reverse", checkpoints=c,
        U_true=states[:, 0], dyn_phase=_dyn_phase(H, None, T, sign, c),
        integrator_report={"true": rep.as_dict()},
    )


def projector_derivative(H: LoopHamiltonian, s) -> tuple[np.ndarray, np.ndarray]:
    """(P, dP/ds) for the instantaneous ground projector at loop fractions s.

    dP = sum_{n>0} |n><n|dH|0><0| / (E_0 - E_n) + h.c., gauge independent.
    """
    E, V = np.linalg.eigh(H.evaluate(s))
    Hd = H.derivative(s)
    v0 = V[..., :, 0]
    P = np.einsum("...i,...j->...ij", v0, v0.conj())
    Hd_n0 = np.einsum("...in,...ij,...j->...n", V.conj(), Hd, v0)
    den = E[..., :1] - E
    den[..., 0] = 1.0
    coef = Hd_n0 / den
    coef[..., 0] = 0.0
    dpsi = np.einsum("...in,...n->...i", V, coef)  # Q d|psi> in the eigenbasis gauge
    A = np.einsum("...i,...j->...ij", dpsi, v0.conj())
    return P, A + np.conj(np.swapaxes(A, -1, -2))


def evolve_ideal(H: LoopHamiltonian, frame: SpectralFrame | None, T: float, direction: str = "forward",
                 checkpoints=None, tol=None) -> EvolutionRecord:
    """U_A(s) generated by +-T H + i[dP, P] (the geometric term keeps its sign)."""
    if not T > 0:
        raise ConfigError("runtime T must be positive")
    sign = _direction_sign(direction)
    c = _checkpoints(checkpoints)
    tol = default_tol(T) if tol is None else tol

    def gen(s):
        P, dP = projector_derivative(H, s)
        return sign * T * H.evaluate(s) + 1j * (dP @ P - P @ dP)

    def make_table(K):
        edges, rec = _layout(c, K)
        return _table_from_generator(gen, edges), rec

    K0 = _initial_steps(H, T, c)
    states, rep = _adaptive(make_table, np.array([1.0]), np.eye(H.dim, dtype=complex), c, K0, tol)
    return EvolutionRecord(
        runtime=float(T), direction="forward" if sign > 0 else "reverse", checkpoints=c,
        U_ideal=states[:, 0], dyn_phase=_dyn_phase(H, frame, T, sign, c),
        integrator_report={"ideal": rep.as_dict()},
    )


def wave_scalar(true_rec: EvolutionRecord, ideal_rec: EvolutionRecord, psi0=None) -> EvolutionRecord:
    """Combine true and ideal records into z(s), unwrapped phi(s) and p_leak(s)."""
    if (true_rec.runtime != ideal_rec.runtime or true_rec.direction != ideal_rec.direction
            or not np.array_equal(true_rec.checkpoints, ideal_rec.checkpoints)):
        raise ConfigError("true and ideal records must share runtime, direction and checkpoints")
    U, UA = true_rec.U_true, ideal_rec.U_ideal
    if psi0 is None:
        # ground state at s = 0 of the generator that produced the records
        raise ConfigError("psi0 (ground state at s=0) is required")
    psi0 = np.asarray(psi0, dtype=complex)
    a = UA @ psi0
    b = U @ psi0
    z = np.einsum("si,si->s", a.conj(), b)
    z[0] = 1.0 if true_rec.checkpoints[0] == 0.0 else z[0]
    if np.any(np.abs(z) < Z_FLOOR):
        raise PhaseUndefinedError("|z(s)| < 1e-6 at some checkpoint")
    raw = np.angle(z)
    steps = np.abs(np.diff(raw))
    steps = np.minimum(steps, 2 * np.pi - steps)
    if steps.size and steps.max() >= np.pi / 2:
        raise ConfigError("checkpoints too sparse to unwrap the phase error; add checkpoints")
    phi = np.unwrap(raw)
    rep = dict(true_rec.integrator_report)
    rep.update(ideal_rec.integrator_report)
    return EvolutionRecord(
        runtime=true_rec.runtime, direction=true_rec.direction, checkpoints=true_rec.checkpoints,
        U_true=U, U_ideal=UA, z=z, phase_error=phi, leakage=1.0 - np.abs(z) ** 2,
        dyn_phase=ideal_rec.dyn_phase, integrator_report=rep,
    )


def evolve(frame: SpectralFrame, T: float, direction: str = "forward", checkpoints=None,
           tol=None) -> EvolutionRecord:
    """True + ideal evolution and the wave-operator scalar in one call."""
    H = frame.hamiltonian
    tr = evolve_true(H, T, direction, checkpoints, tol)
    tr.dyn_phase = _dyn_phase(H, frame, T, _direction_sign(direction), tr.checkpoints)
    idl = evolve_ideal(H, frame, T, direction, checkpoints, tol)
    return wave_scalar(tr, idl, frame.eigenvectors[0][:, 0])
