"""Control objective ``F(u) = -tr(O rho(T)) + alpha sum_beta int u_beta^2``.

Gradients are central finite differences of the simulated term plus the
exact gradient of the quadratic regularizer; ``NoiseModel`` emulates an
inexact gradient oracle whose error is bounded by ``eps_g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement

import numpy as np
import scipy.linalg

from .errors import ValidationError
from .interaction import SplitModel, simulate_interaction
from .model import ControlField, DensityState, LindbladModel, Observable, spectral_norm
from .propagator import liouvillian_matrix, simulate

MODES = ("kraus", "interaction", "oracle")
NOISE_MODES = ("spherical", "adversarial", "none")
IMAG_TOL = 1e-10


@dataclass(frozen=True)
class ObjectiveConfig:
    """Everything needed to evaluate F on controls with ``N`` intervals over ``[0, T]``.

    ``sign="maximize"`` maximizes ``tr(O rho(T))`` (F carries ``-tr``),
    ``"minimize"`` minimizes it. ``mode`` selects the simulator; ``oracle``
    uses midpoint Liouvillian exponentials with ``oracle_steps`` slices.
    """

    model: LindbladModel
    observable: Observable
    rho0: np.ndarray
    T: float
    N: int
    alpha: float = 0.0
    sign: str = "maximize"
    mode: str = "oracle"
    eps: float = 1e-4
    oracle_steps: int = 200
    normalized: bool = False
    h1: np.ndarray | None = None

    def __post_init__(self):
        rho0 = self.rho0.rho if isinstance(self.rho0, DensityState) else self.rho0
        object.__setattr__(self, "rho0", DensityState(rho0).rho)
        if self.sign not in ("maximize", "minimize"):
            raise ValidationError(f"unknown sign {self.sign!r}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.mode == "interaction" and self.h1 is None:
            raise ValidationError("interaction mode needs h1")
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.N < 1 or not self.T > 0:
            raise ValidationError("need N >= 1 and T > 0")
        if self.observable.o.shape[0] != self.model.dim or self.rho0.shape[0] != self.model.dim:
            raise ValidationError("observable, state and model dimensions differ")
        if self.oracle_steps < 1:
            raise ValidationError("oracle_steps must be >= 1")
        if self.normalized and self.alpha < 2.0 / self.T - 1e-12:
            raise ValidationError(f"alpha={self.alpha} below 2/T={2.0 / self.T} under normalization")

    @property
    def n_c(self) -> int:
        return self.model.n_controls

    @property
    def dim(self) -> int:
        """Number of optimization variables ``n_c (N + 1)``."""
        return self.n_c * (self.N + 1)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def _sgn(self) -> float:
        return -1.0 if self.sign == "maximize" else 1.0

    def control(self, x) -> ControlField:
        return ControlField.from_vector(x, self.n_c, self.N, self.T)

    def with_mode(self, mode: str, **kw) -> "ObjectiveConfig":
        return replace(self, mode=mode, **kw)


@dataclass(frozen=True)
class GradientOracleConfig:
    eps_g: float = 0.0
    fd_order: int = 1
    fd_step: float | None = None
    noise_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.eps_g < 0:
            raise ValidationError("eps_g must be >= 0")
        if self.fd_order < 1:
            raise ValidationError("fd_order must be >= 1")
        if self.fd_step is not None and not self.fd_step > 0:
            raise ValidationError("fd_step must be positive")
        if self.noise_mode not in NOISE_MODES:
            raise ValidationError(f"unknown noise mode {self.noise_mode!r}")


# ---------------------------------------------------------------------------
# evaluations

def _as_vector(cfg: ObjectiveConfig, u) -> np.ndarray:
    if isinstance(u, ControlField):
        if u.N != cfg.N or u.n_c != cfg.n_c or abs(u.T - cfg.T) > 1e-12:
            raise ValidationError("control grid does not match the objective")
        return u.vector()
    x = np.asarray(u, dtype=float).reshape(-1)
    if x.size != cfg.dim:
        raise ValidationError(f"expected {cfg.dim} control values, got {x.size}")
    return x


def split_model(model: LindbladModel, h1) -> SplitModel:
    """Split ``h1`` off the drift: the remainder keeps ``h0 - h1``, the controls and the jumps."""
    return SplitModel(h1, LindbladModel(model.h0 - np.asarray(h1), model.mu, model.jumps))


def final_states(cfg: ObjectiveConfig, X) -> np.ndarray:
    """``rho(T)`` for each row of ``X`` (shape ``(B, dim)``)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if cfg.mode == "oracle":
        return _oracle_batch(cfg, X)
    out = []
    split = None if cfg.mode == "kraus" else split_model(cfg.model, cfg.h1)
    for x in X:
        u = cfg.control(x)
        if split is None:
            res = simulate(cfg.model, u, cfg.rho0, cfg.T, eps=cfg.eps)
        else:
            res = simulate_interaction(split, u, cfg.rho0, cfg.T, eps=cfg.eps)
        out.append(res.rho)
    return np.array(out)


def _oracle_batch(cfg: ObjectiveConfig, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Midpoint-exponential integrator vectorized over a batch of controls."""
    model, d = cfg.model, cfg.model.dim
    steps = cfg.oracle_steps
    dt = cfg.T / steps
    mids = (np.arange(steps) + 0.5) * dt
    # control values at midpoints are linear in the nodes: vals = B @ nodes
    basis = np.clip(1.0 - np.abs(mids[:, None] / cfg.dt - np.arange(cfg.N + 1)[None, :]), 0.0, None)
    nodes = X.reshape(len(X), cfg.N + 1, cfg.n_c)
    vals = np.einsum("sj,bjc->bsc", basis, nodes)
    H = model.h0 + np.tensordot(vals, model.mu, axes=(2, 0)) if cfg.n_c else \
        np.broadcast_to(model.h0, (len(X), steps, d, d))
    gen = liouvillian_matrix(H.reshape(-1, d, d), model.jumps) * dt
    flat = gen.reshape(-1, d * d, d * d)
    props = np.empty_like(flat)
    for lo in range(0, len(flat), chunk):
        props[lo:lo + chunk] = scipy.linalg.expm(flat[lo:lo + chunk])
    props = props.reshape(len(X), steps, d * d, d * d)
    vec = np.broadcast_to(cfg.rho0.reshape(-1), (len(X), d * d)).copy()
    for s in range(steps):
        vec = np.einsum("bij,bj->bi", props[:, s], vec)
    return vec.reshape(len(X), d, d)


def _expectations(cfg: ObjectiveConfig, states: np.ndarray) -> np.ndarray:
    vals = np.einsum("ij,bji->b", cfg.observable.o, states)
    if np.any(np.abs(vals.imag) > IMAG_TOL * max(1.0, cfg.observable.norm)):
        raise ValidationError(f"tr(O rho) has imaginary part {np.max(np.abs(vals.imag)):.3e}")
    return vals.real


def evaluate_J1_batch(cfg: ObjectiveConfig, X) -> np.ndarray:
    return _expectations(cfg, final_states(cfg, X))


def evaluate_J1(cfg: ObjectiveConfig, u) -> float:
    """``tr(O rho(T))`` under the configured simulator."""
    return float(evaluate_J1_batch(cfg, _as_vector(cfg, u)[None])[0])


def mass_matrix(N: int, T: float) -> np.ndarray:
    """Gram matrix of the hat functions: ``int u^2 = u^T M u`` for one control."""
    h = T / N
    M = np.zeros((N + 1, N + 1))
    idx = np.arange(N)
    M[idx, idx] += h / 3
    M[idx + 1, idx + 1] += h / 3
    M[idx, idx + 1] = M[idx + 1, idx] = h / 6
    return M


def evaluate_regularizer(cfg: ObjectiveConfig, u) -> float:
    """``alpha sum_beta sum_i (h/3)(u_i^2 + u_i u_{i+1} + u_{i+1}^2)``."""
    nodes = _as_vector(cfg, u).reshape(cfg.N + 1, cfg.n_c)
    a, b = nodes[:-1], nodes[1:]
    return float(cfg.alpha * cfg.dt / 3 * np.sum(a * a + a * b + b * b))


def regularizer_gradient(cfg: ObjectiveConfig, u) -> np.ndarray:
    nodes = _as_vector(cfg, u).reshape(cfg.N + 1, cfg.n_c)
    return (2 * cfg.alpha * mass_matrix(cfg.N, cfg.T) @ nodes).reshape(-1)


def evaluate_f(cfg: ObjectiveConfig, u) -> float:
    """Minimized objective ``F = -+ tr(O rho(T)) + regularizer``."""
    return cfg._sgn * evaluate_J1(cfg, u) + evaluate_regularizer(cfg, u)


def evaluate_f_batch(cfg: ObjectiveConfig, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    reg = np.array([evaluate_regularizer(cfg, x) for x in X])
    return cfg._sgn * evaluate_J1_batch(cfg, X) + reg


# ---------------------------------------------------------------------------
# gradients

def central_coefficients(m: int) -> np.ndarray:
    """Weights ``c_k`` (k = 1..m) of the (2m+1)-point first-derivative stencil.

    ``f'(x) ~ sum_k c_k (f(x + k h) - f(x - k h)) / h``, exact on polynomials of degree <= 2m.
    """
    k = np.arange(1, m + 1)
    fact = math.factorial
    return np.array([(-1) ** (kk + 1) * fact(m) ** 2 / (kk * fact(m - kk) * fact(m + kk))
                     for kk in k], dtype=float)


def default_fd_step(x) -> float:
    return 1e-3 * max(1.0, float(np.max(np.abs(x))) if np.size(x) else 1.0)


def fd_gradient(cfg: ObjectiveConfig, u, oracle_cfg: GradientOracleConfig | None = None) -> np.ndarray:
    """Finite-difference gradient of F over all nodal values.

    The simulated term uses the central (2m+1)-point stencil; the regularizer
    gradient is added in closed form.
    """
    oracle_cfg = oracle_cfg or GradientOracleConfig()
    x = _as_vector(cfg, u)
    return _fd_simulated(cfg, x, oracle_cfg) + regularizer_gradient(cfg, x)


def _fd_simulated(cfg, x, oracle_cfg) -> np.ndarray:
    m = oracle_cfg.fd_order
    h = oracle_cfg.fd_step or default_fd_step(x)
    coef = central_coefficients(m)
    n = x.size
    if cfg.observable.norm == 0:
        return np.zeros(n)
    offsets = np.concatenate([np.arange(1, m + 1), -np.arange(1, m + 1)]) * h
    # rows: coordinate i, offset k
    X = np.repeat(x[None], n * 2 * m, axis=0).reshape(n, 2 * m, n)
    X[np.arange(n), :, np.arange(n)] += offsets[None, :]
    vals = cfg._sgn * evaluate_J1_batch(cfg, X.reshape(-1, n)).reshape(n, 2 * m)
    return ((vals[:, :m] - vals[:, m:]) @ coef) / h


@dataclass
class NoiseModel:
    """Bounded perturbation of exact gradients, keyed by (iteration, block) for replay."""

    eps_g: float = 0.0
    mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValidationError(f"unknown noise mode {self.mode!r}")
        if self.eps_g < 0:
            raise ValidationError("eps_g must be >= 0")

    def draw(self, g: np.ndarray, iteration: int = 0, block: int = 0) -> np.ndarray:
        """Noise vector e with ``||e|| <= eps_g`` for the exact gradient g."""
        g = np.asarray(g, dtype=float)
        if self.eps_g == 0 or self.mode == "none":
            return np.zeros_like(g)
        if self.mode == "adversarial":
            n = np.linalg.norm(g)
            return -self.eps_g * g / n if n > 0 else np.zeros_like(g)
        rng = np.random.default_rng([self.seed, iteration, block])
        direction = rng.standard_normal(g.shape)
        direction /= np.linalg.norm(direction)
        return self.eps_g * rng.uniform() * direction

    def apply(self, g, iteration: int = 0, block: int = 0) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if self.eps_g == 0 or self.mode == "none":
            return g
        return g + self.draw(g, iteration, block)


def noisy_gradient(cfg: ObjectiveConfig, u, oracle_cfg: GradientOracleConfig,
                   iteration: int = 0, block: int = 0) -> np.ndarray:
    g = fd_gradient(cfg, u, oracle_cfg)
    return NoiseModel(oracle_cfg.eps_g, oracle_cfg.noise_mode, oracle_cfg.seed).apply(g, iteration, block)


# ---------------------------------------------------------------------------
# constants

def lipschitz_constants(cfg: ObjectiveConfig) -> tuple[float, float]:
    """``(ell, rho)`` for F.

    The simulated term contributes ``6 (N+1) dt^2 |mu|^2 |O|`` and
    ``24 (N+1) dt^3 |mu|^3 |O|`` with ``|mu|`` the largest control-operator
    norm; the regularizer adds its Hessian norm ``2 alpha ||M||`` to ell.
    """
    mu = max((spectral_norm(m) for m in cfg.model.mu), default=0.0)
    on = cfg.observable.norm
    dt = cfg.dt
    ell = 6 * (cfg.N + 1) * dt ** 2 * mu ** 2 * on
    rho = 24 * (cfg.N + 1) * dt ** 3 * mu ** 3 * on
    if cfg.alpha:
        ell += 2 * cfg.alpha * float(np.linalg.eigvalsh(mass_matrix(cfg.N, cfg.T))[-1])
    return ell, rho


def derivative_bound(cfg: ObjectiveConfig, k: int) -> float:
    """``(k+1)! (dt |mu|)^k |O|``."""
    mu = max((spectral_norm(m) for m in cfg.model.mu), default=0.0)
    return math.factorial(k + 1) * (cfg.dt * mu) ** k * cfg.observable.norm


def _nested_partial(cfg, x, idx, h) -> np.ndarray:
    """Central-difference mixed partial of J1 along the index tuple, for a batch of tuples."""
    idx = np.atleast_2d(idx)
    k = idx.shape[1]
    signs = np.array(list(np.ndindex(*(2,) * k))) * 2 - 1  # (2^k, k) entries +-1
    pts = np.repeat(x[None, None], len(idx), axis=0).repeat(len(signs), axis=1)
    for a in range(k):
        for s, sg in enumerate(signs):
            pts[np.arange(len(idx)), s, idx[:, a]] += sg[a] * h
    vals = evaluate_J1_batch(cfg, pts.reshape(-1, x.size)).reshape(len(idx), len(signs))
    weights = np.prod(signs, axis=1)
    return vals @ weights / (2 * h) ** k


def derivative_bound_check(cfg: ObjectiveConfig, order_k: int, points: int = 20, seed: int = 0,
                           amplitude: float = 1.0, h: float | None = None,
                           max_tuples: int = 400) -> dict:
    """Measure partial derivatives of J1 of order k at random controls against the bound.

    Order 1 and 2 use every coordinate (pair); order 3 samples at most
    ``max_tuples`` index triples per point. Returns the maximum observed ratio.
    """
    if order_k not in (1, 2, 3):
        raise ValidationError("order_k must be 1, 2 or 3")
    h = h if h is not None else {1: 1e-4, 2: 1e-3, 3: 5e-3}[order_k]
    bound = derivative_bound(cfg, order_k)
    rng = np.random.default_rng(seed)
    n = cfg.dim
    tuples = np.array(list(combinations_with_replacement(range(n), order_k)))
    worst = 0.0
    max_abs = 0.0
    for _ in range(points):
        x = rng.uniform(-amplitude, amplitude, n)
        sel = tuples
        if len(sel) > max_tuples:
            sel = sel[rng.choice(len(sel), max_tuples, replace=False)]
        vals = np.abs(_nested_partial(cfg, x, sel, h))
        max_abs = max(max_abs, float(np.max(vals)))
    if bound > 0:
        worst = max_abs / bound
    else:
        worst = 0.0 if max_abs == 0 else math.inf
    return {"order": order_k, "bound": bound, "max_abs": max_abs, "max_ratio": worst,
            "points": points, "passed": max_abs <= bound}
