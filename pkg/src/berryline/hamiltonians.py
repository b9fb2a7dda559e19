"""Closed Hamiltonian loops H(s), s in [0, 1], with H(1) = H(0).

Every model is vectorized: ``evaluate(s)`` accepts a scalar or an array of
loop fractions and returns matrices with shape ``s.shape + (dim, dim)``.
All built-in models are 1-periodic in s, so evaluation slightly outside
[0, 1] (finite-difference stencils) is well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .errors import ConfigError, ModelDegeneracyError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

TWO_PI = 2.0 * np.pi

DEGENERACY_THRESHOLD = 1e-8
DEFAULT_FD_STEP = 1e-5
HERMITIAN_TOL = 1e-13

_SIGMA = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)

MatrixFn = Callable[[Any], np.ndarray]


@dataclass(frozen=True)
class LoopHamiltonian:
    """A smooth closed family of Hermitian matrices with derivatives."""

    dim: int
    evaluate: MatrixFn
    derivative: MatrixFn
    second_derivative: MatrixFn
    metadata: dict = field(default_factory=dict)

    def __call__(self, s):
        return self.evaluate(s)

    def norms(self, grid_size: int = 1024) -> dict:
        """Max operator norms of H, dH/ds and d2H/ds2 over a uniform grid."""
        s = np.linspace(0.0, 1.0, grid_size + 1)
        out = {}
        for key, fn in (
            ("H_max", self.evaluate),
            ("Hdot_max", self.derivative),
            ("Hddot_max", self.second_derivative),
        ):
            # Hermitian: spectral norm = largest |eigenvalue|
            ev = np.linalg.eigvalsh(fn(s))
            out[key] = float(np.max(np.abs(ev)))
        return out

    def shifted(self, c: float) -> "LoopHamiltonian":
        """H(s) + c*I; derivatives are unchanged."""
        eye = np.eye(self.dim)
        meta = dict(self.metadata)
        meta["shift"] = meta.get("shift", 0.0) + c
        return LoopHamiltonian(
            self.dim,
            lambda s: self.evaluate(s) + c * eye,
            self.derivative,
            self.second_derivative,
            meta,
        )

    def scaled(self, a: float) -> "LoopHamiltonian":
        """a*H(s) (a = -1 gives the reverse-evolution generator)."""
        meta = dict(self.metadata)
        meta["scale"] = meta.get("scale", 1.0) * a
        return LoopHamiltonian(
            self.dim,
            lambda s: a * self.evaluate(s),
            lambda s: a * self.derivative(s),
            lambda s: a * self.second_derivative(s),
            meta,
        )


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a loop model (what config files parse into)."""

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    derivative: str = "analytic"
    fd_step: float = DEFAULT_FD_STEP

    def validate(self) -> None:
        if self.kind not in ("spin-cone", "three-level", "matrix-path"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.derivative not in ("analytic", "fd"):
            raise ConfigError(f"derivative must be 'analytic' or 'fd', got {self.derivative!r}")
        if not (0.0 < self.fd_step < 1e-1):
            raise ConfigError(f"fd_step must lie in (0, 0.1), got {self.fd_step}")

    def build(self) -> LoopHamiltonian:
        self.validate()
        p = dict(self.params)
        if self.kind == "spin-cone":
            H = build_spin_cone(float(p.get("B", 1.0)), float(p.get("theta", p.get("theta_cone", 0.4))))
        elif self.kind == "three-level":
            H = build_three_level(self)
        else:
            H = _build_matrix_path(p)
        if self.derivative == "fd":
            H = with_fd_derivatives(H, self.fd_step)
        return H

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": _plain(dict(self.params)),
            "derivative": self.derivative,
            "fd_step": self.fd_step,
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# built-in models


def build_spin_cone(B: float, theta_cone: float) -> LoopHamiltonian:
    """Spin-1/2 in a field of strength B precessing on a cone of half-angle theta.

    H(s) = (B/2) n(s).sigma with n = (sin t cos 2pi s, sin t sin 2pi s, cos t).
    The loop is traversed counter-clockwise about +z as s increases.
    """
    if not (B > 0 and math.isfinite(B)):
        raise ConfigError(f"spin-cone needs B > 0, got {B}")
    if not (0.0 < theta_cone < np.pi):
        raise ConfigError(f"spin-cone needs 0 < theta < pi, got {theta_cone}")
    st, ct = math.sin(theta_cone), math.cos(theta_cone)
    half = 0.5 * B

    def _field(s, k):
        # k-th derivative of n(s).sigma
        s = np.asarray(s, dtype=float)
        ang = TWO_PI * s
        w = TWO_PI**k
        c = np.cos(ang + k * np.pi / 2)
        sn = np.sin(ang + k * np.pi / 2)
        nz = ct if k == 0 else 0.0
        out = (
            (w * st * c)[..., None, None] * _SIGMA[0]
            + (w * st * sn)[..., None, None] * _SIGMA[1]
            + np.multiply.outer(np.full(s.shape, nz), np.ones((2, 2))) * _SIGMA[2]
        )
        return half * out

    meta = {
        "model": "spin-cone",
        "params": {"B": B, "theta": theta_cone},
        "orientation": "counter-clockwise about +z",
    }
    return LoopHamiltonian(
        2,
        lambda s: _field(s, 0),
        lambda s: _field(s, 1),
        lambda s: _field(s, 2),
        meta,
    )


THREE_LEVEL_DEFAULTS = {
    "energies": [0.0, 1.0, 2.3],
    "couplings": [0.35, 0.3, 0.25],  # g01, g12, g02
    "windings": [1, 1, 1],  # w01, w12, w02
}


def build_three_level(spec: ModelSpec | Mapping | None = None) -> LoopHamiltonian:
    """Three-level loop with winding off-diagonal couplings.

    H(s) = diag(e) + sum_{a<b} g_ab (exp(2 pi i w_ab s)|a><b| + h.c.).
    With w02 != w01 + w12 the loop is not a unitary rotation of a fixed
    matrix, so gaps and couplings genuinely vary along s.
    """
    params = dict(THREE_LEVEL_DEFAULTS)
    if isinstance(spec, ModelSpec):
        params.update(spec.params)
    elif spec is not None:
        params.update(spec)
    try:
        e = np.asarray(params["energies"], dtype=float)
        g = np.asarray(params["couplings"], dtype=float)
        w = np.asarray(params["windings"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"three-level parameters malformed: {exc}") from None
    if e.shape != (3,) or g.shape != (3,) or w.shape != (3,):
        raise ConfigError("three-level needs 3 energies, 3 couplings (g01, g12, g02), 3 windings")
    if np.any(w != np.round(w)):
        raise ConfigError("windings must be integers (loop closure)")
    pairs = ((0, 1), (1, 2), (0, 2))
    diag = np.diag(e).astype(complex)

    def _mat(s, k):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (3, 3), dtype=complex)
        if k == 0:
            out += diag
        for (a, b), gab, wab in zip(pairs, g, w):
            f = gab * (1j * TWO_PI * wab) ** k * np.exp(1j * TWO_PI * wab * s)
            out[..., a, b] += f
            out[..., b, a] += np.conj(f)
        return out

    H = LoopHamiltonian(
        3,
        lambda s: _mat(s, 0),
        lambda s: _mat(s, 1),
        lambda s: _mat(s, 2),
        {
            "model": "three-level",
            "params": {"energies": e.tolist(), "couplings": g.tolist(), "windings": w.tolist()},
            "orientation": "phases exp(+2 pi i w s) on the upper triangle",
        },
    )
    check_nondegenerate(H)
    return H


def _build_matrix_path(p: Mapping) -> LoopHamiltonian:
    """Truncated Fourier loop H(s) = C0 + sum_k C_k cos 2pi k s + S_k sin 2pi k s."""
    if "c0" not in p:
        raise ConfigError("matrix-path needs params.c0")
    c0 = parse_matrix(p["c0"], "c0")
    dim = c0.shape[0]
    cos_terms = [parse_matrix(m, f"cos[{k}]") for k, m in enumerate(p.get("cos", []))]
    sin_terms = [parse_matrix(m, f"sin[{k}]") for k, m in enumerate(p.get("sin", []))]
    for name, mats in (("cos", cos_terms), ("sin", sin_terms)):
        for k, m in enumerate(mats):
            if m.shape != (dim, dim):
                raise ConfigError(f"{name}[{k}] has shape {m.shape}, expected {(dim, dim)}")
    return matrix_path(c0, cos_terms, sin_terms)


def matrix_path(c0, cos_terms=(), sin_terms=(), name: str = "matrix-path") -> LoopHamiltonian:
    """Build a Fourier loop from Hermitian coefficient matrices (harmonic k = index + 1)."""
    c0 = np.asarray(c0, dtype=complex)
    dim = c0.shape[0]
    _require_hermitian(c0, "c0")
    kmax = max(len(cos_terms), len(sin_terms))
    C = np.zeros((kmax, dim, dim), dtype=complex)
    S = np.zeros((kmax, dim, dim), dtype=complex)
    for k, m in enumerate(cos_terms):
        _require_hermitian(np.asarray(m), f"cos[{k}]")
        C[k] = m
    for k, m in enumerate(sin_terms):
        _require_hermitian(np.asarray(m), f"sin[{k}]")
        S[k] = m
    freqs = TWO_PI * np.arange(1, kmax + 1)

    def _mat(s, order):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (dim, dim), dtype=complex)
        if order == 0:
            out += c0
        if kmax == 0:
            return out
        ang = np.multiply.outer(s, freqs) + order * np.pi / 2
        scale = freqs**order
        # d^k/ds^k cos(wx) = w^k cos(wx + k pi/2), same for sin
        out += np.einsum("...k,kij->...ij", scale * np.cos(ang), C)
        out += np.einsum("...k,kij->...ij", scale * np.sin(ang), S)
        return out

    meta = {
        "model": name,
        "params": {
            "c0": c0.tolist(),
            "harmonics": kmax,
        },
        "orientation": "as given by the Fourier coefficients",
    }
    H = LoopHamiltonian(dim, lambda s: _mat(s, 0), lambda s: _mat(s, 1), lambda s: _mat(s, 2), meta)
    check_closure(H)
    return H


def with_fd_derivatives(H: LoopHamiltonian, h: float = DEFAULT_FD_STEP) -> LoopHamiltonian:
    """Replace analytic derivatives by centered differences with step h."""
    ev = H.evaluate

    def d1(s):
        s = np.asarray(s, dtype=float)
        return (ev(s + h) - ev(s - h)) / (2 * h)

    def d2(s):
        s = np.asarray(s, dtype=float)
        # a wider step for the second difference keeps round-off ~eps/h^2 in check
        hh = max(h, 1e-4)
        return (ev(s + hh) - 2 * ev(s) + ev(s - hh)) / hh**2

    meta = dict(H.metadata)
    meta["derivative"] = {"mode": "fd", "step": h}
    return LoopHamiltonian(H.dim, ev, d1, d2, meta)


# ---------------------------------------------------------------------------
# config parsing and validation


def parse_matrix(rows, name: str = "matrix") -> np.ndarray:
    """Row-major nested list of [re, im] pairs -> complex ndarray."""
    try:
        arr = np.asarray(rows, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: entries must be [re, im] number pairs") from None
    if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigError(f"{name}: expected a square array of [re, im] pairs, got shape {arr.shape}")
    return arr[..., 0] + 1j * arr[..., 1]


def _require_hermitian(m: np.ndarray, name: str, tol: float = HERMITIAN_TOL) -> None:
    diff = np.abs(m - m.conj().T)
    if diff.max() > tol:
        i, j = np.unravel_index(np.argmax(diff), diff.shape)
        raise ConfigError(
            f"{name} is not Hermitian: entry ({i}, {j}) = {m[i, j]} but conj of ({j}, {i}) = {np.conj(m[j, i])}"
        )


def check_closure(H: LoopHamiltonian, tol: float = HERMITIAN_TOL) -> float:
    gap = float(np.max(np.abs(H.evaluate(1.0) - H.evaluate(0.0))))
    if gap > tol:
        raise ConfigError(f"loop not closed: max|H(1) - H(0)| = {gap:.3e}")
    return gap


def check_nondegenerate(H: LoopHamiltonian, grid_size: int = 512,
                        threshold: float = DEGENERACY_THRESHOLD) -> float:
    """Minimum adjacent level splitting on a coarse grid; raises if degenerate."""
    s = np.linspace(0.0, 1.0, grid_size + 1)
    ev = np.linalg.eigvalsh(H.evaluate(s))
    split = float(np.min(np.diff(ev, axis=-1))) if H.dim > 1 else np.inf
    if split < threshold:
        raise ModelDegeneracyError(f"level splitting {split:.3e} below {threshold:g}")
    return split


def load_config(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def spec_from_mapping(doc: Mapping) -> ModelSpec:
    """The [model] table of a config document -> ModelSpec."""
    model = doc.get("model", doc)
    if not isinstance(model, Mapping) or "kind" not in model:
        raise ConfigError("config needs a [model] table with a 'kind' key")
    spec = ModelSpec(
        kind=str(model["kind"]),
        params=dict(model.get("params", {})),
        derivative=str(model.get("derivative", "analytic")),
        fd_step=float(model.get("fd_step", DEFAULT_FD_STEP)),
    )
    spec.validate()
    return spec


def build_from_config(path) -> LoopHamiltonian:
    """Parse a TOML model file and build the loop it describes."""
    return spec_from_mapping(load_config(path)).build()
