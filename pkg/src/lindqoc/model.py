"""Lindbladians, piecewise-linear controls, states and observables.

Also hosts the block-encoding norm of a Lindbladian and the monotone change
of time variable built from it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, SingularRescalingError, ValidationError

HERMITIAN_TOL = 1e-12
STATE_HERMITIAN_TOL = 1e-10
STATE_TRACE_TOL = 1e-8
STATE_PSD_TOL = 1e-8
NORM_TOL = 1e-9
# relative slack when checking that t lies in [0, T]
_TIME_SLACK = 1e-12


def _as_matrix(a, name="matrix") -> np.ndarray:
    arr = np.array(a, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def _stack(mats, dim, name) -> np.ndarray:
    mats = [_as_matrix(m, f"{name}[{i}]") for i, m in enumerate(mats)]
    for i, m in enumerate(mats):
        if m.shape[0] != dim:
            raise ValidationError(f"{name}[{i}] has dim {m.shape[0]}, expected {dim}")
    if not mats:
        return np.zeros((0, dim, dim), dtype=complex)
    return np.stack(mats)


def hermitian_deviation(a) -> float:
    a = np.asarray(a)
    return float(np.max(np.abs(a - a.conj().T))) if a.size else 0.0


def spectral_norm(a) -> float:
    """Largest singular value of a dense matrix."""
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LindbladModel:
    """Drift Hamiltonian ``h0``, control operators ``mu`` and jump operators ``jumps``.

    ``mu`` has shape ``(n_c, d, d)`` and ``jumps`` has shape ``(m, d, d)``.
    With ``normalized=True`` every operator must have spectral norm at most 1.
    """

    h0: np.ndarray
    mu: np.ndarray
    jumps: np.ndarray
    normalized: bool = False

    def __init__(self, h0, mu=(), jumps=(), normalized=False):
        h0 = _as_matrix(h0, "h0")
        dim = h0.shape[0]
        mu = _stack(list(mu), dim, "mu")
        jumps = _stack(list(jumps), dim, "jumps")
        if hermitian_deviation(h0) > HERMITIAN_TOL:
            raise ValidationError("h0 is not Hermitian")
        for b, m in enumerate(mu):
            if hermitian_deviation(m) > HERMITIAN_TOL:
                raise ValidationError(f"mu[{b}] is not Hermitian")
        if normalized:
            for name, ops in (("h0", [h0]), ("mu", mu), ("jumps", jumps)):
                for i, op in enumerate(ops):
                    if spectral_norm(op) > 1 + NORM_TOL:
                        raise ValidationError(f"{name}[{i}] has norm > 1 under normalization")
        object.__setattr__(self, "h0", _frozen(h0))
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "jumps", _frozen(jumps))
        object.__setattr__(self, "normalized", bool(normalized))

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def n_controls(self) -> int:
        return self.mu.shape[0]

    @property
    def n_jumps(self) -> int:
        return self.jumps.shape[0]

    def jump_norms(self) -> np.ndarray:
        return np.array([spectral_norm(L) for L in self.jumps])

    def conjugated(self, unitary) -> "LindbladModel":
        """Return the model with every operator replaced by ``W A W^dagger``."""
        w = np.asarray(unitary)
        wh = w.conj().T
        return LindbladModel(w @ self.h0 @ wh, [w @ m @ wh for m in self.mu],
                             [w @ L @ wh for L in self.jumps])


@dataclass(frozen=True)
class ControlField:
    """Piecewise-linear controls on the uniform grid ``t_j = j T / N``.

    ``nodes[j, beta]`` is the value of control ``beta`` at ``t_j``.
    """

    T: float
    nodes: np.ndarray

    def __init__(self, T, nodes):
        nodes = np.array(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if nodes.ndim != 2 or nodes.shape[0] < 2:
            raise ValidationError("nodes must have shape (N+1, n_c) with N >= 1")
        if not np.all(np.isfinite(nodes)):
            raise ValidationError("nodes must be finite")
        if not T > 0:
            raise ValidationError("horizon T must be positive")
        object.__setattr__(self, "T", float(T))
        object.__setattr__(self, "nodes", _frozen(nodes))

    @classmethod
    def zeros(cls, n_c, N, T):
        return cls(T, np.zeros((N + 1, n_c)))

    @classmethod
    def from_vector(cls, vec, n_c, N, T):
        """Inverse of :meth:`vector`; the optimizer works on the flattened nodes."""
        return cls(T, np.asarray(vec, dtype=float).reshape(N + 1, n_c))

    @property
    def N(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def n_c(self) -> int:
        return self.nodes.shape[1]

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def vector(self) -> np.ndarray:
        return self.nodes.reshape(-1).copy()

    def _check_times(self, t):
        t = np.asarray(t, dtype=float)
        slack = _TIME_SLACK * max(1.0, self.T)
        if np.any(t < -slack) or np.any(t > self.T + slack):
            raise DomainError(f"time outside [0, {self.T}]")
        return np.clip(t, 0.0, self.T)

    def __call__(self, t) -> np.ndarray:
        """Control values at ``t``; shape ``(n_c,)`` for scalar t, else ``(len(t), n_c)``."""
        t = self._check_times(t)
        scalar = t.ndim == 0
        ts = np.atleast_1d(t)
        # exact node values: locate the cell, then interpolate
        pos = ts / self.dt
        j = np.clip(np.floor(pos).astype(int), 0, self.N - 1)
        frac = pos - j
        on_node = np.isclose(pos, np.round(pos), rtol=0, atol=1e-13)
        frac = np.where(on_node & (np.round(pos) == j), 0.0, frac)
        frac = np.where(on_node & (np.round(pos) == j + 1), 1.0, frac)
        vals = (1 - frac)[:, None] * self.nodes[j] + frac[:, None] * self.nodes[j + 1]
        return vals[0] if scalar else vals

    def hat(self, j, t) -> np.ndarray:
        """Hat basis function ``B_j`` evaluated at ``t``."""
        t = np.asarray(t, dtype=float)
        return np.clip(1.0 - np.abs(t / self.dt - j), 0.0, None)


def assert_valid(rho, hermitian_tol=STATE_HERMITIAN_TOL, trace_tol=STATE_TRACE_TOL,
                 psd_tol=STATE_PSD_TOL) -> None:
    """Raise :class:`ValidationError` unless ``rho`` is a density matrix to the given tolerances."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValidationError("density matrix must be square")
    if not np.all(np.isfinite(rho)):
        raise ValidationError("density matrix has non-finite entries")
    dev = hermitian_deviation(rho)
    if dev > hermitian_tol:
        raise ValidationError(f"density matrix not Hermitian (deviation {dev:.3e})")
    tr = np.trace(rho).real
    if abs(tr - 1) > trace_tol:
        raise ValidationError(f"density matrix trace {tr!r} differs from 1")
    lam = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lam < -psd_tol:
        raise ValidationError(f"density matrix has eigenvalue {lam:.3e}")


@dataclass(frozen=True)
class DensityState:
    rho: np.ndarray

    def __init__(self, rho, check=True):
        rho = _as_matrix(rho, "rho")
        if check:
            assert_valid(rho)
        object.__setattr__(self, "rho", _frozen(rho))

    @classmethod
    def pure(cls, psi):
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def basis(cls, dim, k):
        psi = np.zeros(dim, dtype=complex)
        psi[k] = 1
        return cls.pure(psi)


@dataclass(frozen=True)
class Observable:
    o: np.ndarray

    def __init__(self, o, normalized=False):
        o = _as_matrix(o, "observable")
        if hermitian_deviation(o) > HERMITIAN_TOL:
            raise ValidationError("observable is not Hermitian")
        if normalized and spectral_norm(o) > 1 + NORM_TOL:
            raise ValidationError("observable has norm > 1 under normalization")
        object.__setattr__(self, "o", _frozen(o))

    @property
    def norm(self) -> float:
        return spectral_norm(self.o)


def trace_distance(a, b) -> float:
    """Trace norm ``||a - b||_1`` of the Hermitian part of the difference."""
    diff = np.asarray(a) - np.asarray(b)
    diff = 0.5 * (diff + diff.conj().T)
    return float(np.sum(np.abs(np.linalg.eigvalsh(diff))))


# ---------------------------------------------------------------------------
# operator trajectories and norms

def hamiltonian_at(model: LindbladModel, u: ControlField, t) -> np.ndarray:
    """``H0 + sum_beta u_beta(t) mu_beta``; vectorized over an array of times."""
    if u.n_c != model.n_controls:
        raise ValidationError(f"control has {u.n_c} channels, model has {model.n_controls}")
    vals = u(t)
    if vals.ndim == 1:
        return model.h0 + np.tensordot(vals, model.mu, axes=(0, 0))
    return model.h0[None] + np.tensordot(vals, model.mu, axes=(1, 0))


def _hermitian_norms(h: np.ndarray) -> np.ndarray:
    """Spectral norms of a stack of Hermitian matrices."""
    ev = np.linalg.eigvalsh(h)
    return np.max(np.abs(ev), axis=-1)


def be_norm(model: LindbladModel, u: ControlField, t):
    """Block-encoding norm ``alpha0(t) + 0.5 * sum_j alpha_j^2``.

    ``alpha0(t)`` is the spectral norm of ``H(t)`` and ``alpha_j`` that of ``L_j``.
    """
    h = hamiltonian_at(model, u, t)
    jump_part = 0.5 * float(np.sum(model.jump_norms() ** 2))
    if h.ndim == 2:
        return float(_hermitian_norms(h[None])[0]) + jump_part
    return _hermitian_norms(h) + jump_part


def default_panels(T: float) -> int:
    return 64 * int(np.ceil(T))


def _panel_edges(u: ControlField, T: float, n_panels: int) -> np.ndarray:
    # control nodes are kinks of ||H(t)||; keep them on the grid
    edges = np.linspace(0.0, T, n_panels + 1)
    kinks = u.grid[(u.grid > 0) & (u.grid < T)]
    edges = np.union1d(edges, kinks)
    return edges


def be_norm_l1(model: LindbladModel, u: ControlField, T: float | None = None,
               quad_points: int | None = None) -> float:
    """Composite-Simpson approximation of ``int_0^T ||L(tau)||_be dtau``."""
    T = u.T if T is None else float(T)
    if T < 0 or T > u.T * (1 + _TIME_SLACK):
        raise DomainError(f"horizon {T} outside [0, {u.T}]")
    if T == 0:
        return 0.0
    n = default_panels(T) if quad_points is None else int(quad_points)
    if n < 2:
        raise DomainError("quad_points must be >= 2")
    edges = _panel_edges(u, T, n)
    a, b = edges[:-1], edges[1:]
    f0 = be_norm(model, u, a)
    fm = be_norm(model, u, 0.5 * (a + b))
    f1 = be_norm(model, u, b)
    return float(np.sum((b - a) / 6.0 * (f0 + 4 * fm + f1)))


class TimeRescaling:
    """Monotone map ``var(t) = int_0^t ||L(s)||_be ds`` and its inverse.

    ``var`` is tabulated with Simpson panels on a grid that contains every
    control node; between grid points a single Simpson panel ``[tau_k, t]`` is
    used, so ``var`` is continuous and agrees with the tabulated values at the
    grid. The inverse is safeguarded Newton inside the bracketing panel.
    """

    INVERSE_TOL = 1e-12

    def __init__(self, model: LindbladModel, u: ControlField, T: float | None = None,
                 quad_points: int | None = None):
        self.model = model
        self.u = u
        self.T = u.T if T is None else float(T)
        n = default_panels(self.T) if quad_points is None else int(quad_points)
        if n < 2:
            raise DomainError("quad_points must be >= 2")
        self.edges = _panel_edges(u, self.T, n)
        a, b = self.edges[:-1], self.edges[1:]
        self._f_edges = np.asarray(be_norm(model, u, self.edges))
        fm = be_norm(model, u, 0.5 * (a + b))
        panels = (b - a) / 6.0 * (self._f_edges[:-1] + 4 * fm + self._f_edges[1:])
        self._cum = np.concatenate([[0.0], np.cumsum(panels)])
        if not self._cum[-1] > 0:
            raise SingularRescalingError("Lindbladian vanishes identically on [0, T]")

    @property
    def total(self) -> float:
        """``var(T)``, i.e. the rescaled horizon."""
        return float(self._cum[-1])

    def rate(self, t):
        """``||L(t)||_be``, the derivative of ``var``."""
        return be_norm(self.model, self.u, t)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        ts = np.clip(np.atleast_1d(t), 0.0, self.T)
        k = np.clip(np.searchsorted(self.edges, ts, side="right") - 1, 0, len(self.edges) - 2)
        tk = self.edges[k]
        out = self._cum[k] + (ts - tk) / 6.0 * (
            self._f_edges[k] + 4 * self.rate(0.5 * (tk + ts)) + self.rate(ts))
        return float(out[0]) if scalar else out

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xs = np.atleast_1d(x)
        if np.any(xs < -1e-12) or np.any(xs > self.total * (1 + 1e-12) + 1e-12):
            raise DomainError("rescaled time outside [0, var(T)]")
        xs = np.clip(xs, 0.0, self.total)
        k = np.clip(np.searchsorted(self._cum, xs, side="right") - 1, 0, len(self.edges) - 2)
        lo = self.edges[k].copy()
        hi = self.edges[k + 1].copy()
        # safeguarded Newton inside the bracketing panel; var' = ||L||_be > 0
        width = np.where(self._cum[k + 1] > self._cum[k], self._cum[k + 1] - self._cum[k], 1.0)
        t = lo + (hi - lo) * np.clip((xs - self._cum[k]) / width, 0.0, 1.0)
        for _ in range(100):
            g = self(t) - xs
            lo = np.where(g < 0, t, lo)
            hi = np.where(g > 0, t, hi)
            rate = np.maximum(np.asarray(self.rate(t), dtype=float), 1e-300)
            step = t - g / rate
            bad = (step <= lo) | (step >= hi) | ~np.isfinite(step)
            new = np.where(bad, 0.5 * (lo + hi), step)
            done = (np.abs(new - t) <= self.INVERSE_TOL) | (hi - lo <= self.INVERSE_TOL) | (g == 0)
            t = np.where(g == 0, t, new)
            if np.all(done):
                break
        return float(t[0]) if scalar else t


def var_and_inverse(model: LindbladModel, u: ControlField, T: float | None = None,
                    quad_points: int | None = None) -> TimeRescaling:
    return TimeRescaling(model, u, T, quad_points)


# ---------------------------------------------------------------------------
# JSON interchange

def _encode_matrix(a) -> list:
    a = np.asarray(a)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def _decode_matrix(obj, field_name) -> np.ndarray:
    try:
        arr = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse complex matrix ({exc})", field_name) from None
    if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigError("expected a square nested array of [re, im] pairs", field_name)
    return arr[..., 0] + 1j * arr[..., 1]


def model_to_dict(model: LindbladModel) -> dict:
    return {"dim": model.dim, "h0": _encode_matrix(model.h0),
            "mu": [_encode_matrix(m) for m in model.mu],
            "jumps": [_encode_matrix(L) for L in model.jumps]}


def model_from_dict(doc: dict, normalized: bool = False) -> LindbladModel:
    if not isinstance(doc, dict):
        raise ConfigError("model document must be a JSON object")
    for key in ("dim", "h0", "mu", "jumps"):
        if key not in doc:
            raise ConfigError("missing field", key)
    dim = doc["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise ConfigError("must be a positive integer", "dim")
    h0 = _decode_matrix(doc["h0"], "h0")
    if not isinstance(doc["mu"], list):
        raise ConfigError("must be an array", "mu")
    if not isinstance(doc["jumps"], list):
        raise ConfigError("must be an array", "jumps")
    mu = [_decode_matrix(m, f"mu[{i}]") for i, m in enumerate(doc["mu"])]
    jumps = [_decode_matrix(m, f"jumps[{i}]") for i, m in enumerate(doc["jumps"])]
    for name, mats in (("h0", [h0]), ("mu", mu), ("jumps", jumps)):
        for i, m in enumerate(mats):
            if m.shape[0] != dim:
                raise ConfigError(f"dimension {m.shape[0]} does not match dim={dim}",
                                  name if name == "h0" else f"{name}[{i}]")
    try:
        return LindbladModel(h0, mu, jumps, normalized=normalized)
    except ValidationError as exc:
        raise ConfigError(str(exc), "model") from None


def control_to_dict(u: ControlField) -> dict:
    return {"n_c": u.n_c, "N": u.N, "T": u.T, "nodes": [float(x) for x in u.vector()]}


def control_from_dict(doc: dict) -> ControlField:
    for key in ("n_c", "N", "T", "nodes"):
        if key not in doc:
            raise ConfigError("missing field", key)
    n_c, N = doc["n_c"], doc["N"]
    if not isinstance(n_c, int) or n_c < 0:
        raise ConfigError("must be a non-negative integer", "n_c")
    if not isinstance(N, int) or N < 1:
        raise ConfigError("must be a positive integer", "N")
    nodes = np.asarray(doc["nodes"], dtype=float).reshape(-1)
    if nodes.size != (N + 1) * n_c:
        raise ConfigError(f"expected {(N + 1) * n_c} values, got {nodes.size}", "nodes")
    try:
        return ControlField(float(doc["T"]), nodes.reshape(N + 1, n_c))
    except ValidationError as exc:
        raise ConfigError(str(exc), "control") from None


def matrix_to_json(a) -> list:
    return _encode_matrix(a)


def load_model(path, normalized: bool = False) -> LindbladModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read file ({exc.strerror})", str(path)) from None
    return model_from_dict(doc, normalized=normalized)


# common operators --------------------------------------------------------

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# lowering operator |0><1| in the basis (|0>, |1>)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)


def kron(*ops: Sequence) -> np.ndarray:
    out = np.eye(1, dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out
