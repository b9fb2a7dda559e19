"""Adiabatic-perturbation-theory coefficients computed from a spectral frame.

Conventions (ground state = level 0, excited levels n >= 1):

* M_n  = M_n0 = <n|d_s psi>,  Delta_n = E_n - E_0,  phi_n = arg M_n0
* omega_n = int_0^1 Delta_n,  beta_n(s) = theta_B^(n)(s) - theta_B(s)

Forward phase error at s = 1:
    phi(T) = phi1/T + (phi2 + phi2_osc(T))/T^2 + O(T^-3)
Forward-reverse average:
    (phi + phi_rev)/2 = (phi2 + Phi2_osc(T))/T^2 + O(T^-4),
    Phi2_osc(T) = +sum_n B_n cos(omega_n T),
    B_n = |M_n(0)||M_n(1)|/Delta_n(0)^2 sin(beta_n(1) + phi_n(0) - phi_n(1)).

Sign of the oscillatory endpoint term: integrating
int_0^1 exp(-i T omega_n) f ds by parts gives +(i/T)[exp(-i T omega_n) f/Delta_n]
at the endpoints, so phi2_osc(T) = +sum_n |M_n(0)||M_n(1)|/(Delta_n(0)Delta_n(1))
sin(beta_n(1) + phi_n(0) - phi_n(1) - omega_n T).  Both the direct quadrature
of the oscillatory integral (``im_delta1_quadrature``) and the propagated
phase error confirm this sign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .errors import NumericalError, UnsupportedOrderError
from .spectral import SpectralFrame, _periodic_derivative

COUPLED_TOL = 1e-12
ENDPOINT_GAP_TOL = 1e-9


def _excited(frame: SpectralFrame) -> np.ndarray:
    return np.arange(1, frame.dim)


@dataclass
class AptBreakdown:
    phi1: float
    phi2_rate: float  # sum_n int (beta_n' - phi_n') |M_n|^2 / Delta_n^2
    phi2_virtual: float  # -i int A2
    B: np.ndarray  # (d-1,)
    omega: np.ndarray  # (d-1,)
    beta_end: np.ndarray  # beta_n(1)
    M0: np.ndarray  # M_n0(0)
    M1: np.ndarray  # M_n0(1)
    gap0: np.ndarray  # Delta_n(0)
    gap1: np.ndarray  # Delta_n(1)
    phase0: np.ndarray  # phi_n(0)
    phase1: np.ndarray  # phi_n(1), unwrapped
    matched_endpoints: bool
    coupled_levels: np.ndarray
    a2_max_real: float  # max |Re A2| over the grid (should vanish)
    bound: dict = field(default_factory=dict)

    @property
    def phi2(self) -> float:
        return self.phi2_rate + self.phi2_virtual

    @property
    def osc_amplitudes(self) -> np.ndarray:
        """|M_n(0)||M_n(1)| / (Delta_n(0) Delta_n(1))."""
        return np.abs(self.M0) * np.abs(self.M1) / (self.gap0 * self.gap1)

    def _osc_arg(self, T):
        T = np.asarray(T, dtype=float)
        return self.beta_end + self.phase0 - self.phase1 - np.multiply.outer(T, self.omega)

    def phi2_osc(self, T):
        """Oscillatory second-order coefficient, endpoint form with Delta(1) Delta(0)."""
        amp = np.abs(self.M0) * np.abs(self.M1) / (self.gap1 * self.gap0)
        if self.matched_endpoints:
            # simplified matched form: M(1) = M(0), phi(1) = phi(0)
            amp = np.abs(self.M0) ** 2 / self.gap0**2
            arg = self.beta_end - np.multiply.outer(np.asarray(T, dtype=float), self.omega)
            return np.sum(amp * np.sin(arg), axis=-1)
        return np.sum(amp * np.sin(self._osc_arg(T)), axis=-1)

    def phi2_osc_gap0(self, T):
        """Same term with the Delta_n(0)^2 denominator (equal on closed loops)."""
        amp = np.abs(self.M0) * np.abs(self.M1) / self.gap0**2
        return np.sum(amp * np.sin(self._osc_arg(T)), axis=-1)

    def Phi2_osc(self, T):
        """Oscillatory term of the forward-reverse average: sum_n B_n cos(omega_n T)."""
        return np.sum(self.B * np.cos(np.multiply.outer(np.asarray(T, dtype=float), self.omega)), axis=-1)

    def richardson_osc(self, T, alpha: float = 2.0):
        """T^2 times the m=1 Richardson remainder: sum B_n[cos a w T - cos w T]/(a^2-1)."""
        wT = np.multiply.outer(np.asarray(T, dtype=float), self.omega)
        return np.sum(self.B * (np.cos(alpha * wT) - np.cos(wT)), axis=-1) / (alpha**2 - 1.0)

    def phase_error(self, T):
        """Forward phase error through second order."""
        T = np.asarray(T, dtype=float)
        return self.phi1 / T + (self.phi2 + self.phi2_osc(T)) / T**2

    def fwd_rev_error(self, T):
        T = np.asarray(T, dtype=float)
        return (self.phi2 + self.Phi2_osc(T)) / T**2

    def osc_bound(self) -> float:
        """sum_n |M_n(0)||M_n(1)| / Delta_n(0)^2 (bound on |phi2_osc|)."""
        return float(np.sum(np.abs(self.M0) * np.abs(self.M1) / self.gap0**2))

    def to_json(self) -> str:
        return json.dumps(
            {
                "phi1": self.phi1,
                "phi2_parts": {"rate": self.phi2_rate, "virtual": self.phi2_virtual, "total": self.phi2},
                "B_n": self.B.tolist(),
                "omega_n": self.omega.tolist(),
                "bound_terms": {k: v for k, v in self.bound.items() if k.startswith("term")},
                "gamma_ex": self.bound.get("gamma_ex"),
            },
            indent=2,
        )


def a2_density(frame: SpectralFrame) -> np.ndarray:
    """A2(s) = sum_{n != k, n,k >= 1} M_0n M_nk M_k0 / (Delta_n Delta_k) on the grid."""
    M = frame.couplings
    d = frame.dim
    gap = frame.gaps[:, :, 0]
    out = np.zeros(frame.grid.size, dtype=complex)
    for n in range(1, d):
        for k in range(1, d):
            if n != k:
                out += M[:, 0, n] * M[:, n, k] * M[:, k, 0] / (gap[:, n] * gap[:, k])
    return out


def phase_coefficients(frame: SpectralFrame) -> AptBreakdown:
    """First- and second-order phase-error coefficients of the loop."""
    s = frame.grid
    ex = _excited(frame)
    M = frame.couplings
    Mn0 = M[:, ex, 0]
    gap = frame.gaps[:, ex, 0]
    absM2 = np.abs(Mn0) ** 2
    phi1 = float(simpson(np.sum(absM2 / gap, axis=1), x=s))

    # (beta' - phi') |M|^2 = beta'|M|^2 - Im(M' conj M); M is periodic in our gauge
    dM = _periodic_derivative(Mn0[:-1])
    dM = np.concatenate([dM, dM[:1]], axis=0)
    conn = -np.einsum("gnn->gn", M).imag
    dbeta = conn[:, ex] - conn[:, :1]
    rate = (dbeta * absM2 - np.imag(dM * np.conj(Mn0))) / gap**2
    phi2_rate = float(simpson(np.sum(rate, axis=1), x=s))
    a2 = a2_density(frame)
    phi2_virtual = float(np.real(-1j * simpson(a2, x=s)))

    M0, M1 = Mn0[0], Mn0[-1]
    g0, g1 = gap[0], gap[-1]
    # Delta(1) Delta(0) and Delta(0)^2 forms of the oscillatory term agree only on closed loops
    if np.max(np.abs(g1 - g0)) > ENDPOINT_GAP_TOL * max(1.0, float(np.max(np.abs(g0)))):
        raise NumericalError("endpoint gaps differ: the loop is not closed")
    ph0, ph1 = frame.phi[0, ex], frame.phi[-1, ex]
    beta1 = frame.beta[-1, ex]
    B = np.abs(M0) * np.abs(M1) / g0**2 * np.sin(beta1 + ph0 - ph1)
    H = frame.hamiltonian
    matched = False
    if H is not None:
        matched = bool(np.max(np.abs(H.derivative(1.0) - H.derivative(0.0))) <= 1e-10)
    coupled = ex[np.max(np.abs(Mn0), axis=0) > COUPLED_TOL]
    out = AptBreakdown(
        phi1=phi1, phi2_rate=phi2_rate, phi2_virtual=phi2_virtual, B=B,
        omega=frame.omega[-1, ex].copy(), beta_end=beta1.copy(), M0=M0.copy(), M1=M1.copy(),
        gap0=g0.copy(), gap1=g1.copy(), phase0=ph0.copy(), phase1=ph1.copy(),
        matched_endpoints=matched, coupled_levels=coupled,
        a2_max_real=float(np.max(np.abs(a2.real))) if a2.size else 0.0,
    )
    out.bound = second_order_bound(frame, out)
    return out


@dataclass
class LeakageModel:
    """Leading-order leakage (1/T^2) sum_n |M_n(1)/D_n(1) - e^{-i w T} e^{i beta} M_n(0)/D_n(0)|^2."""

    a1: np.ndarray  # M_n(1)/Delta_n(1)
    a0: np.ndarray  # M_n(0)/Delta_n(0)
    omega: np.ndarray
    beta_end: np.ndarray
    bound_constant: float

    def coefficient(self, T):
        T = np.asarray(T, dtype=float)
        ph = np.exp(-1j * np.multiply.outer(T, self.omega) + 1j * self.beta_end)
        return np.sum(np.abs(self.a1 - ph * self.a0) ** 2, axis=-1)

    def __call__(self, T):
        return self.coefficient(T) / np.asarray(T, dtype=float) ** 2


def leakage_coefficients(frame: SpectralFrame) -> LeakageModel:
    ex = _excited(frame)
    Mn0 = frame.couplings[:, ex, 0]
    gap = frame.gaps[:, ex, 0]
    a0, a1 = Mn0[0] / gap[0], Mn0[-1] / gap[-1]
    hd = frame.hdot
    # C = 2(|dH(0)|^2 + |dH(1)|^2)/Delta(0)^4 bounds sum_n (|a0| + |a1|)^2
    nrm = [float(np.max(np.abs(np.linalg.eigvalsh(hd[g])))) for g in (0, -1)]
    C = 2.0 * (nrm[0] ** 2 + nrm[1] ** 2) / frame.gap0**4 if frame.dim > 1 else 0.0
    return LeakageModel(a1, a0, frame.omega[-1, ex].copy(), frame.beta[-1, ex].copy(), C)


# ---------------------------------------------------------------------------
# APT recursion coefficients (ground-state initial condition b_n(0) = delta_n0)


def _cumint(y, s):
    # cumulative_simpson drops imaginary parts, so integrate them separately
    y = np.asarray(y)
    out = cumulative_simpson(y.real, x=s, axis=0, initial=0.0)
    if np.iscomplexobj(y):
        out = out + 1j * cumulative_simpson(y.imag, x=s, axis=0, initial=0.0)
    return out


def _centered(y: np.ndarray, h: float) -> np.ndarray:
    """Periodic centered difference along axis 0 (last grid point duplicates the first)."""
    core = y[:-1]
    d = (np.roll(core, -1, axis=0) - np.roll(core, 1, axis=0)) / (2 * h)
    return np.concatenate([d, d[:1]], axis=0)


def apt_table(frame: SpectralFrame, order: int) -> np.ndarray:
    """b^(p)_nm on the whole grid, shape (G+1, d, d), for p = order in {1, 2}."""
    if order not in (1, 2):
        raise UnsupportedOrderError(f"APT order {order} not available in closed form (only 1 and 2)")
    s = frame.grid
    d = frame.dim
    M = frame.couplings
    D = frame.gaps  # D[:, n, m] = E_n - E_m
    off = ~np.eye(d, dtype=bool)
    Dsafe = np.where(off, D, 1.0)
    J = _cumint(np.where(off, np.abs(M) ** 2 / Dsafe, 0.0), s)  # J[:, m, n]
    b1 = np.zeros((s.size, d, d), dtype=complex)
    for n in range(1, d):
        b1[:, n, 0] = 1j * M[:, n, 0] / D[:, n, 0]
        b1[:, n, n] = -1j * M[0, n, 0] / D[0, n, 0]
    b1[:, 0, 0] = 1j * np.sum(J[:, 1:, 0], axis=1)
    if order == 1:
        return b1

    W = np.einsum("gnn->gn", M)  # W_nm = M_nn - M_mm
    sumJ = np.sum(J[:, 1:, 0], axis=1)
    b2 = np.zeros_like(b1)
    ratio = np.zeros((s.size, d), dtype=complex)
    ratio[:, 1:] = M[:, 1:, 0] / D[:, 1:, 0]
    dratio = _centered(ratio, frame.step)
    for n in range(1, d):
        ksum = np.zeros(s.size, dtype=complex)
        for k in range(1, d):
            if k != n:
                ksum += M[:, n, k] * M[:, k, 0] / D[:, k, 0]
        b2[:, n, 0] = -(
            dratio[:, n]
            + (W[:, n] - W[:, 0]) * ratio[:, n]
            + M[:, n, 0] * sumJ
            + ksum
        ) / D[:, n, 0]
    for m in range(1, d):
        for n in range(d):
            if n != m:
                b2[:, n, m] = M[:, n, m] * M[0, m, 0] / (D[:, n, m] * D[0, m, 0])
    for n in range(d):
        others = [m for m in range(d) if m != n]
        rhs = -sum(M[:, n, m] * b2[:, m, n] for m in others) if others else np.zeros(s.size)
        b2[:, n, n] = _cumint(rhs, s) - sum(b2[0, n, m] for m in others)
    return b2


def apt_amplitudes(frame: SpectralFrame, order: int, s: float) -> np.ndarray:
    """Coefficient table b^(p)_nm(s) (d x d) at a grid point s."""
    tab = apt_table(frame, order)
    g = int(round(float(s) * frame.size))
    if abs(g / frame.size - float(s)) > 1e-12 or not 0 <= g <= frame.size:
        raise ValueError(f"s={s} is not a point of the frame grid")
    return tab[g]


def _phases(frame: SpectralFrame, T: float, g: int) -> np.ndarray:
    """exp(-i theta_D^(m) + i theta_B^(m)) at grid index g, per level m."""
    Eint = _cumint(frame.energies, frame.grid)[g]
    return np.exp(-1j * T * Eint + 1j * frame.theta_b[g])


def apt_state(frame: SpectralFrame, T: float, order: int = 1, g: int = -1) -> list[np.ndarray]:
    """[Psi^(0), Psi^(1), ...] at grid index g in the computational basis."""
    V = frame.eigenvectors[g]
    ph = _phases(frame, T, g)
    d = frame.dim
    b0 = np.zeros((d, d), dtype=complex)
    b0[0, 0] = 1.0
    tabs = [b0] + [apt_table(frame, p)[g] for p in range(1, order + 1)]
    return [V @ (b @ ph) for b in tabs]


def im_delta1_quadrature(frame: SpectralFrame, T: float) -> float:
    """Im delta^(1)(1) by direct quadrature of the oscillatory integral.

    Independent of the endpoint formula: equals phi1 + phi2_osc(T)/T + O(T^-2).
    """
    s = frame.grid
    ex = _excited(frame)
    Mn0 = frame.couplings[:, ex, 0]
    gap = frame.gaps[:, ex, 0]
    steady = simpson(np.sum(np.abs(Mn0) ** 2 / gap, axis=1), x=s)
    osc = np.exp(1j * frame.beta[:, ex] - 1j * T * frame.omega[:, ex]) * Mn0[0] * np.conj(Mn0) / gap[0]
    return float(steady - np.real(simpson(np.sum(osc, axis=1), x=s)))


def phi_from_b_coefficients(frame: SpectralFrame) -> tuple[float, float]:
    """(phi1, phi2) via Im int sum_n conj(M_n0) b^(p)_n0 -- the recursion route."""
    s = frame.grid
    M = frame.couplings
    out = []
    for p in (1, 2):
        b = apt_table(frame, p)
        integrand = np.sum(np.conj(M[:, 1:, 0]) * b[:, 1:, 0], axis=1)
        out.append(float(np.imag(simpson(integrand, x=s))))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# second-order bound constituents


def second_order_bound(frame: SpectralFrame, breakdown: AptBreakdown | None = None) -> dict:
    """Constituents of C2 ~ Hd^2 Hdd/D^5 + Hd^4/D^6 + Hd^3/(D^4 gamma_ex)."""
    H = frame.hamiltonian
    s = frame.grid
    hd_max = float(np.max(np.abs(np.linalg.eigvalsh(frame.hdot))))
    hdd_max = float(np.max(np.abs(np.linalg.eigvalsh(H.second_derivative(s))))) if H is not None else 0.0
    gmin = frame.gap_min
    E = frame.energies
    if frame.dim >= 3:
        ex = E[:, 1:]
        diffs = np.abs(ex[:, :, None] - ex[:, None, :])
        k = ex.shape[1]
        diffs[:, np.arange(k), np.arange(k)] = np.inf
        gamma_ex = float(np.min(diffs))
    else:
        gamma_ex = float("inf")
    term1 = hd_max**2 * hdd_max / gmin**5
    term2 = hd_max**4 / gmin**6
    term3 = 0.0 if not np.isfinite(gamma_ex) else hd_max**3 / (gmin**4 * gamma_ex)
    proxy = term1 + term2 + term3
    rep = dict(
        Hdot_max=hd_max, Hddot_max=hdd_max, gap_min=gmin, gamma_ex=gamma_ex,
        term1=term1, term2=term2, term3=term3, C2_proxy=proxy,
    )
    if breakdown is not None:
        realized = abs(breakdown.phi2) + float(np.sum(np.abs(breakdown.M0) * np.abs(breakdown.M1)
                                                      / breakdown.gap0**2))
        rep["realized"] = realized
        rep["ratio"] = realized / proxy if proxy > 0 else 0.0
    return rep
