"""Perturbed accelerated gradient descent with inexact gradients.

One iteration: optional perturbation when the gradient at x is small, a
momentum step ``y = x + (1 - theta) v``, ``x+ = y - eta g(y)``, then negative
curvature exploitation (NCE) when the local quadratic model along ``x - y``
certifies curvature below ``-gamma``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, LindqocError, ParameterError, ValidationError

TRACE_COLUMNS = ("iter", "event", "f", "grad_norm_x", "grad_norm_y", "energy_before",
                 "energy", "v_norm", "step_norm", "true_grad_norm_y", "noise_norm_y")
EVENTS = ("agd", "nce-reset", "nce-line", "perturbed")


@dataclass(frozen=True)
class PagdParams:
    eps: float
    ell: float
    rho: float
    c: float
    chi: float
    delta: float
    Delta_f: float
    dim: int
    eta: float
    kappa: float
    theta: float
    gamma: float
    s: float
    T_steps: float
    E_drop: float
    S_dist: float
    M_bound: float
    r: float
    eps_g_first: float
    eps_g_second: float
    k_max: int

    def to_dict(self) -> dict:
        return asdict(self)


def default_chi(dim, ell, rho, eps, delta, Delta_f) -> float:
    return max(1.0, math.log(dim * ell * Delta_f / (rho * eps * delta)))


def derive_params(eps: float, ell: float, rho: float, c: float = 4.0, chi: float | None = None,
                  delta: float = 0.1, Delta_f: float = 1.0, dim: int = 1) -> PagdParams:
    """Fill in every derived hyperparameter.

    ``T_steps``, ``E_drop``, ``S_dist`` and ``M_bound`` are the step budget,
    energy decrease, localization distance and the bound on ``||v||`` used by
    the analysis; ``r`` is the perturbation radius.
    """
    for name, val in (("eps", eps), ("ell", ell), ("rho", rho), ("c", c), ("delta", delta),
                      ("Delta_f", Delta_f)):
        if not (val > 0 and math.isfinite(val)):
            raise ParameterError(f"{name} must be positive and finite, got {val}")
    if dim < 1:
        raise ParameterError("dim must be >= 1")
    if eps > ell * ell / rho * (1 + 1e-12):
        raise ParameterError(f"eps <= ell^2/rho violated: {eps} > {ell * ell / rho}")
    if chi is None:
        chi = default_chi(dim, ell, rho, eps, delta, Delta_f)
    if not chi > 0:
        raise ParameterError("chi must be positive")
    eta = 1.0 / (4 * ell)
    kappa = ell / math.sqrt(rho * eps)
    theta = 1.0 / (4 * math.sqrt(kappa))
    gamma = theta ** 2 / eta
    s = gamma / (4 * rho)
    T_steps = math.sqrt(kappa) * chi * c
    E_drop = math.sqrt(eps ** 3 / rho) * chi ** -5 * c ** -7
    S_dist = math.sqrt(2 * eta * T_steps * E_drop / theta)
    M_bound = eps * math.sqrt(kappa) / ell / c
    r = eta * eps * chi ** -5 * c ** -8
    eps_g_first = rho ** 0.125 / (math.sqrt(2) * ell ** 0.25 * chi ** 1.5 * c ** 1.5) * eps ** 1.125
    eps_g_second = delta * chi ** -11 * c ** -16 / (64 * ell) * eps ** 3 / (math.sqrt(dim) * Delta_f)
    k_max = math.ceil(c * math.sqrt(ell) * rho ** 0.25 * Delta_f / eps ** 1.75 * chi ** 6)
    if not 0 < theta <= 0.5:
        raise ParameterError(f"theta in (0, 1/2] violated: theta={theta}")
    if eta > 1 / (2 * ell):
        raise ParameterError("eta <= 1/(2 ell) violated")
    if theta < 2 * eta * gamma * (1 - 1e-12):
        raise ParameterError(f"theta >= 2 eta gamma violated: {theta} < {2 * eta * gamma}")
    p = PagdParams(eps, ell, rho, c, chi, delta, Delta_f, dim, eta, kappa, theta, gamma, s,
                   T_steps, E_drop, S_dist, M_bound, r, eps_g_first, eps_g_second, k_max)
    for k, v in asdict(p).items():
        if isinstance(v, float) and not v > 0:
            raise ParameterError(f"derived {k} is not positive ({v})")
    return p


# ---------------------------------------------------------------------------
# state and single steps

@dataclass(frozen=True)
class PagdState:
    x: np.ndarray
    v: np.ndarray
    f_x: float
    energy: float
    steps_since_perturbation: int
    iter: int = 0

    @classmethod
    def start(cls, x0, f_x0: float, params: PagdParams) -> "PagdState":
        x0 = np.array(x0, dtype=float)
        # no perturbation has happened yet, so the gate is open
        return cls(x0, np.zeros_like(x0), float(f_x0), float(f_x0),
                   math.floor(params.T_steps) + 1, 0)

    def recomputed_energy(self, params: PagdParams) -> float:
        return hamiltonian_energy(self.f_x, self.v, params)


def hamiltonian_energy(f_x: float, v, params: PagdParams) -> float:
    """``f(x) + ||v||^2 / (2 eta)``."""
    v = np.asarray(v)
    return float(f_x + v @ v / (2 * params.eta))


def agd_step(state: PagdState, params: PagdParams, grad_oracle: Callable,
             key=(0, 1)):
    """Momentum step; returns ``(x_next, v_next, y, g_y)``."""
    y = state.x + (1 - params.theta) * state.v
    g_y = np.asarray(grad_oracle(y, key), dtype=float)
    x_next = y - params.eta * g_y
    return x_next, x_next - state.x, y, g_y


def nce_condition(f_x: float, f_y: float, g_y, x, y, params: PagdParams) -> bool:
    """``f(x) <= f(y) + <g(y), x - y> - gamma/2 ||x - y||^2``; never true when ``x == y``."""
    d = np.asarray(x) - np.asarray(y)
    if not np.any(d):
        return False
    return bool(f_x <= f_y + float(np.dot(g_y, d)) - 0.5 * params.gamma * float(d @ d))


def nce_step(x, v, params: PagdParams, f_oracle: Callable, f_x: float | None = None):
    """Negative curvature exploitation; returns ``(x_next, v_next, f_next, tag)``.

    Large momentum (``||v|| >= s``) or zero momentum only resets momentum;
    otherwise the better of ``x +- s v/||v||`` is taken.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    vn = float(np.linalg.norm(v))
    zero = np.zeros_like(v)
    if vn >= params.s or vn == 0.0:
        return x.copy(), zero, (f_oracle(x) if f_x is None else f_x), "nce-reset"
    step = params.s * v / vn
    cands = [x + step, x - step]
    vals = [float(f_oracle(c)) for c in cands]
    best = int(np.argmin(vals))
    return cands[best], zero, vals[best], "nce-line"


def uniform_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    """Uniform sample from the d-ball: Gaussian direction, radius ``r U^(1/d)``."""
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return radius * rng.uniform() ** (1.0 / dim) * direction


def perturb(state: PagdState, params: PagdParams, rng: np.random.Generator,
            f_oracle: Callable | None = None) -> PagdState:
    """Add a uniform-ball perturbation of radius r; requires the timer to exceed T_steps."""
    if not state.steps_since_perturbation > params.T_steps:
        raise DomainError("perturbation refused: the last one was too recent")
    xi = uniform_ball(rng, state.x.size, params.r)
    x = state.x + xi
    f_x = state.f_x if (params.r == 0 or f_oracle is None) else float(f_oracle(x))
    return replace(state, x=x, f_x=f_x, energy=hamiltonian_energy(f_x, state.v, params),
                   steps_since_perturbation=0)


# ---------------------------------------------------------------------------
# driver

@dataclass
class PagdResult:
    best_x: np.ndarray
    best_grad_norm: float
    state: PagdState
    trace: list
    terminated: str
    extra: dict = field(default_factory=dict)

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def trace_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def run(f_oracle: Callable, grad_oracle: Callable, x0, params: PagdParams, seed: int = 0,
        max_iter: int | None = None, terminate: str = "certified",
        true_grad: Callable | None = None, eps_g: float = 0.0,
        checkpoint: Callable | None = None, checkpoint_every: int = 0,
        resume: dict | None = None) -> PagdResult:
    """Run PAGD from x0.

    ``grad_oracle(x, key)`` returns a noisy gradient where ``key = (iteration,
    block)`` names the noise draw (block 0 at x, 1 at y). Stops after
    ``max_iter`` (default ``k_max``) iterations or, with
    ``terminate="certified"``, once the noisy gradient at x stayed below
    ``eps - eps_g`` for ``T_steps`` consecutive iterations. ``true_grad`` is
    only used to record diagnostics.
    """
    if terminate not in ("certified", "none"):
        raise ValidationError(f"unknown termination rule {terminate!r}")
    limit = params.k_max if max_iter is None else int(max_iter)

    def call(fn, *args):
        try:
            return fn(*args)
        except LindqocError as exc:
            raise type(exc)(f"iteration {t}: {exc}") from exc

    t = 0
    if resume is None:
        x0 = np.array(x0, dtype=float)
        state = PagdState.start(x0, call(f_oracle, x0), params)
        trace, best_x, best_g, streak = [], x0.copy(), math.inf, 0
    else:
        state, trace, best_x, best_g, streak = _restore(resume)
    terminated = "max_iter"
    while state.iter < limit:
        t = state.iter
        g_x = np.asarray(call(grad_oracle, state.x, (t, 0)), dtype=float)
        gx_norm = float(np.linalg.norm(g_x))
        if gx_norm < best_g:
            best_x, best_g = state.x.copy(), gx_norm
        streak = streak + 1 if gx_norm <= params.eps - eps_g else 0
        if terminate == "certified" and streak >= params.T_steps:
            terminated = "certified"
            break
        event = "agd"
        if gx_norm <= params.eps and state.steps_since_perturbation > params.T_steps:
            state = perturb(state, params, np.random.default_rng([seed, t, 2]),
                            lambda z: call(f_oracle, z))
            event = "perturbed"
        e_before = state.energy
        x_next, v_next, y, g_y = agd_step(state, params, lambda z, k: call(grad_oracle, z, k), (t, 1))
        f_y = float(call(f_oracle, y)) if np.any(y != state.x) else state.f_x
        if nce_condition(state.f_x, f_y, g_y, state.x, y, params):
            x_next, v_next, f_next, tag = nce_step(state.x, state.v, params,
                                                   lambda z: call(f_oracle, z), state.f_x)
            event = tag if event == "agd" else event + "+" + tag
        else:
            f_next = float(call(f_oracle, x_next))
        row = {"iter": t, "event": event, "f": f_next, "grad_norm_x": gx_norm,
               "grad_norm_y": float(np.linalg.norm(g_y)), "energy_before": e_before,
               "v_norm": float(np.linalg.norm(state.v)),
               "step_norm": float(np.linalg.norm(x_next - state.x))}
        if true_grad is not None:
            tg = np.asarray(call(true_grad, y), dtype=float)
            row["true_grad_norm_y"] = float(np.linalg.norm(tg))
            row["noise_norm_y"] = float(np.linalg.norm(tg - g_y))
        state = PagdState(x_next, v_next, f_next, hamiltonian_energy(f_next, v_next, params),
                          state.steps_since_perturbation + 1, t + 1)
        row["energy"] = state.energy
        trace.append(row)
        if checkpoint is not None and checkpoint_every and state.iter % checkpoint_every == 0:
            checkpoint(snapshot(state, trace, best_x, best_g, streak))
    if state.iter >= limit and terminated != "certified":
        # final iterate still counts as a candidate
        g_x = np.asarray(call(grad_oracle, state.x, (state.iter, 0)), dtype=float)
        if float(np.linalg.norm(g_x)) < best_g:
            best_x, best_g = state.x.copy(), float(np.linalg.norm(g_x))
    return PagdResult(best_x, best_g, state, trace, terminated)


def snapshot(state: PagdState, trace, best_x, best_g, streak) -> dict:
    return {"x": [float(a) for a in state.x], "v": [float(a) for a in state.v],
            "f_x": state.f_x, "energy": state.energy,
            "steps_since_perturbation": state.steps_since_perturbation, "iter": state.iter,
            "best_x": [float(a) for a in best_x], "best_grad_norm": best_g, "streak": streak,
            "trace": trace}


def _restore(doc: dict):
    state = PagdState(np.array(doc["x"], dtype=float), np.array(doc["v"], dtype=float),
                      float(doc["f_x"]), float(doc["energy"]),
                      int(doc["steps_since_perturbation"]), int(doc["iter"]))
    return (state, list(doc["trace"]), np.array(doc["best_x"], dtype=float),
            float(doc["best_grad_norm"]), int(doc["streak"]))


def save_checkpoint(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# certification

def fd_hessian(f_oracle: Callable, x, h: float = 1e-4) -> np.ndarray:
    """Symmetrized central-difference Hessian."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.zeros((n, n))
    f0 = float(f_oracle(x))
    E = np.eye(n) * h
    for i in range(n):
        fp = float(f_oracle(x + E[i]))
        fm = float(f_oracle(x - E[i]))
        H[i, i] = (fp - 2 * f0 + fm) / h ** 2
        for j in range(i + 1, n):
            H[i, j] = (f_oracle(x + E[i] + E[j]) - f_oracle(x + E[i] - E[j])
                       - f_oracle(x - E[i] + E[j]) + f_oracle(x - E[i] - E[j])) / (4 * h * h)
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def fd_grad(f_oracle: Callable, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    E = np.eye(x.size) * h
    return np.array([(f_oracle(x + e) - f_oracle(x - e)) / (2 * h) for e in E])


def check_second_order(f_oracle: Callable, x, params: PagdParams, grad: Callable | None = None,
                       h: float = 1e-4) -> dict:
    """Report ``||grad f(x)||``, ``lambda_min`` of the FD Hessian and both stationarity tests."""
    g = np.asarray(grad(x), dtype=float) if grad is not None else fd_grad(f_oracle, x)
    lam = float(np.linalg.eigvalsh(fd_hessian(f_oracle, x, h))[0])
    gn = float(np.linalg.norm(g))
    return {"grad_norm": gn, "lambda_min": lam, "first_order": gn <= params.eps,
            "second_order": lam >= -math.sqrt(params.rho * params.eps),
            "curvature_threshold": -math.sqrt(params.rho * params.eps)}


# ---------------------------------------------------------------------------
# trace audits

def energy_inequality_violations(trace, params: PagdParams, eps_g: float, slack: float = 1e-9):
    """Rows (plain AGD steps) breaking the per-step Hamiltonian decrease inequality."""
    bad = []
    for row in trace:
        if row["event"] != "agd" or row.get("true_grad_norm_y") is None:
            continue
        lhs = row["energy"] - row["energy_before"]
        rhs = (-params.theta / (2 * params.eta) * row["v_norm"] ** 2
               - params.eta / 8 * row["true_grad_norm_y"] ** 2 + 1.25 * params.eta * eps_g ** 2)
        if lhs > rhs + slack:
            bad.append((row["iter"], lhs, rhs))
    return bad


def nce_drop_violations(trace, params: PagdParams, eps_g: float, slack: float = 1e-10):
    """NCE line steps whose energy drop is below ``min(s^2/2eta, (gamma - 2 rho s) s^2/2 - s eps_g)``."""
    need = min(params.s ** 2 / (2 * params.eta),
               0.5 * (params.gamma - 2 * params.rho * params.s) * params.s ** 2 - params.s * eps_g)
    return [(r["iter"], r["energy"] - r["energy_before"]) for r in trace
            if r["event"].endswith("nce-line") and r["energy"] > r["energy_before"] - need + slack]


def improve_or_localize_violations(trace, params: PagdParams, window: int | None = None,
                                   slack: float = 1e-9):
    """Windows of plain AGD steps breaking the improve-or-localize inequality.

    For ``window`` consecutive AGD rows, ``sum ||x_tau - x_{tau-1}||^2`` must not
    exceed ``(2 eta/theta)(E_t - E_{t+T}) + (2 eta^2/theta) sum ||e(y_tau)||^2``,
    with the noise norms recorded by an oracle-mode run.
    """
    T = max(1, int(window if window is not None else math.floor(params.T_steps)))
    bad = []
    run: list = []
    for row in list(trace) + [None]:
        if row is not None and row["event"] == "agd" and row.get("noise_norm_y") is not None:
            run.append(row)
            continue
        for a in range(0, len(run) - T + 1):
            rows = run[a:a + T]
            lhs = sum(r["step_norm"] ** 2 for r in rows)
            rhs = (2 * params.eta / params.theta * (rows[0]["energy_before"] - rows[-1]["energy"])
                   + 2 * params.eta ** 2 / params.theta * sum(r["noise_norm_y"] ** 2 for r in rows))
            if lhs > rhs + slack:
                bad.append((rows[0]["iter"], lhs, rhs))
        run = []
    return bad
