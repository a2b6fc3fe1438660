"""Interaction-picture simulation for ``L = L1 + L2`` with ``L1 = -i[H1, .]``.

Each slice ``[t_i, t_{i+1}]`` is simulated in the frame rotating with ``H1``
anchored at ``t_i``, then ``exp(-i H1 tau)`` is applied exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PlanTooLargeError, ValidationError
from .model import (HERMITIAN_TOL, ControlField, DensityState, LindbladModel, _as_matrix,
                    be_norm, hamiltonian_at, hermitian_deviation, trace_distance)
from .propagator import (DEFAULT_MAX_WORK, DERIVATIVE_GRID, Generator, PropagationResult,
                         _apply_series, _jump_dissipator, dyson_samples_per_step,
                         oracle_evolve, plan_for_generator, step_work)


@dataclass(frozen=True)
class SplitModel:
    """Time-independent ``h1`` plus the controlled, dissipative remainder ``rest``."""

    h1: np.ndarray
    rest: LindbladModel

    def __init__(self, h1, rest: LindbladModel):
        h1 = _as_matrix(h1, "h1")
        if hermitian_deviation(h1) > HERMITIAN_TOL:
            raise ValidationError("h1 is not Hermitian")
        if h1.shape[0] != rest.dim:
            raise ValidationError("h1 and rest have different dimensions")
        h1.setflags(write=False)
        object.__setattr__(self, "h1", h1)
        object.__setattr__(self, "rest", rest)

    @property
    def dim(self) -> int:
        return self.rest.dim

    def full(self) -> LindbladModel:
        """The unsplit model ``H0 = h1 + rest.h0``."""
        return LindbladModel(self.h1 + self.rest.h0, self.rest.mu, self.rest.jumps)

    def _eig(self):
        cached = self.__dict__.get("_eig_cache")
        if cached is None:
            cached = np.linalg.eigh(self.h1)
            object.__setattr__(self, "_eig_cache", cached)
        return cached

    def frame(self, tau) -> np.ndarray:
        """``exp(i h1 tau)`` for scalar or array ``tau``."""
        w, U = self._eig()
        tau = np.asarray(tau, dtype=float)
        phases = np.exp(1j * tau[..., None] * w)
        return (U * phases[..., None, :]) @ U.conj().T


class RotatedGenerator(Generator):
    """``J`` and ``L_j`` of the remainder rotated into the frame anchored at ``anchor``."""

    def __init__(self, split: SplitModel, u: ControlField, anchor: float):
        self.split = split
        self.u = u
        self.anchor = float(anchor)
        self.dim = split.dim
        self.n_jumps = split.rest.n_jumps
        self._diss = _jump_dissipator(split.rest.jumps)

    def J(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        W = self.split.frame(t - self.anchor)
        j = -1j * hamiltonian_at(self.split.rest, self.u, t) - self._diss[None]
        return W @ j @ np.swapaxes(W.conj(), -1, -2)

    def L(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        W = self.split.frame(t - self.anchor)[:, None]
        return W @ self.split.rest.jumps[None] @ np.swapaxes(W.conj(), -1, -2)


def rotate_frame(split: SplitModel, u: ControlField, t0: float, t: float) -> LindbladModel:
    """Snapshot at time t of the remainder in the frame anchored at t0."""
    if t < t0:
        raise DomainError("need t >= t0")
    W = split.frame(t - t0)
    Wh = W.conj().T
    h2 = hamiltonian_at(split.rest, u, t)
    return LindbladModel(W @ h2 @ Wh, [], [W @ L @ Wh for L in split.rest.jumps])


def remainder_be_sup(split: SplitModel, u: ControlField, T: float) -> float:
    """``max_t ||L2(t)||_be`` over a grid containing the control nodes."""
    grid = np.union1d(np.linspace(0.0, T, DERIVATIVE_GRID), u.grid[u.grid <= T])
    return float(np.max(be_norm(split.rest, u, grid)))


def min_slices(split: SplitModel, u: ControlField, T: float) -> int:
    return max(1, math.ceil(T * remainder_be_sup(split, u, T) - 1e-12))


def _rho(rho0):
    return np.array(rho0.rho if isinstance(rho0, DensityState) else rho0, dtype=complex)


def interaction_slice(split: SplitModel, u: ControlField, rho, a: float, b: float, eps: float,
                      plan=None, max_work: float = DEFAULT_MAX_WORK):
    """One slice: Kraus series in the rotated frame, then the exact H1 rotation.

    Returns ``(rho, plan)``.
    """
    if plan is None:
        plan = _slice_plan(split, u, a, b, eps)
    work = step_work(plan, split.rest.n_jumps)
    if work > max_work:
        raise PlanTooLargeError(f"Kraus step needs ~{work:.3g} conjugations (cap {max_work:.3g})")
    # local clock: 0 at the anchor
    gen = _ShiftedGenerator(RotatedGenerator(split, u, a), a)
    rho = _apply_series(gen, rho, 0.0, b - a, plan)
    W = split.frame(-(b - a))  # exp(-i h1 tau)
    return W @ rho @ W.conj().T, plan


class _ShiftedGenerator(Generator):
    def __init__(self, inner: Generator, offset: float):
        self.inner = inner
        self.offset = offset
        self.dim = inner.dim
        self.n_jumps = inner.n_jumps

    def J(self, t):
        return self.inner.J(np.asarray(t, dtype=float) + self.offset)

    def L(self, t):
        return self.inner.L(np.asarray(t, dtype=float) + self.offset)


def _slice_plan(split, u, a, b, eps):
    gen = _ShiftedGenerator(RotatedGenerator(split, u, a), a)
    return plan_for_generator(gen, b - a, b - a, eps, calibrated=True, rescaled=False)


def simulate_interaction(split: SplitModel, u: ControlField, rho0, T: float | None = None,
                         eps: float = 1e-4, n_steps: int | None = None,
                         max_work: float = DEFAULT_MAX_WORK) -> PropagationResult:
    """Alternate rotated-frame Kraus steps with exact ``exp(-i H1 tau)`` conjugations.

    ``n_steps`` defaults to, and may not be below, ``ceil(T max_t ||L2(t)||_be)``.
    Each slice is simulated to precision ``eps / n_steps``.
    """
    T = u.T if T is None else float(T)
    if T < 0 or T > u.T * (1 + 1e-12):
        raise DomainError(f"horizon {T} outside [0, {u.T}]")
    rho = _rho(rho0)
    if T == 0:
        return PropagationResult(rho, None, float(abs(np.trace(rho) - 1)), [])
    need = min_slices(split, u, T)
    if n_steps is None:
        n_steps = need
    elif n_steps < need:
        raise ValidationError(f"n_steps={n_steps} below the minimum {need}")
    edges = np.linspace(0.0, T, n_steps + 1)
    diags = []
    plan = None
    for a, b in zip(edges[:-1], edges[1:]):
        rho, plan = interaction_slice(split, u, rho, a, b, eps / n_steps, None, max_work)
        diags.append({"start": float(a), "stop": float(b),
                      "trace_defect": float(abs(np.trace(rho) - 1)),
                      "dyson_samples": dyson_samples_per_step(plan),
                      "K": plan.K, "Kp": plan.Kp, "q": plan.q, "M": plan.M})
    return PropagationResult(rho, plan, float(abs(np.trace(rho) - 1)), diags)


def per_slice_errors(split: SplitModel, u: ControlField, rho0, T: float, eps: float,
                     n_steps: int, oracle_steps_per_slice: int = 5000) -> np.ndarray:
    """Trace-norm error of each interaction slice started from the reference state.

    The reference trajectory comes from :func:`oracle_evolve` on the unsplit model.
    """
    full = split.full()
    edges = np.linspace(0.0, T, n_steps + 1)
    ref = _rho(rho0)
    errs = []
    for a, b in zip(edges[:-1], edges[1:]):
        nxt = oracle_evolve(full, u, ref, b, steps=oracle_steps_per_slice, t0=a)
        approx, _ = interaction_slice(split, u, ref, a, b, eps / n_steps)
        errs.append(trace_distance(approx, nxt))
        ref = nxt
    return np.array(errs)
