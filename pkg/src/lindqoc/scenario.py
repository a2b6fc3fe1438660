"""Scenario files: parsing, the end-to-end optimization run and its artifacts."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, LindqocError, ValidationError
from .model import (DensityState, Observable, _decode_matrix, control_to_dict, load_model,
                    matrix_to_json, model_from_dict)
from .objective import (GradientOracleConfig, NoiseModel, ObjectiveConfig, evaluate_f,
                        fd_gradient, final_states, lipschitz_constants)
from .pagd import PagdParams, derive_params, load_checkpoint, run, save_checkpoint

BUNDLED = ("amplitude_damping", "driven_purity", "two_qubit_entangling")


@dataclass
class ScenarioConfig:
    name: str
    objective: ObjectiveConfig
    gradient: GradientOracleConfig
    optimizer: dict
    initial: np.ndarray
    output_dir: Path | None = None
    source: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def eps_g(self) -> float:
        return self.gradient.eps_g


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled scenario {name!r}", "scenario")
    return Path(str(resources.files("lindqoc") / "data" / f"{name}.json"))


def _get(doc, key, kind, default=..., where=""):
    label = f"{where}.{key}" if where else key
    if key not in doc:
        if default is ...:
            raise ConfigError("missing field", label)
        return default
    val = doc[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise ConfigError("must be a finite number", label)
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError("must be an integer", label)
        return val
    if kind is str and not isinstance(val, str):
        raise ConfigError("must be a string", label)
    if kind is dict and not isinstance(val, dict):
        raise ConfigError("must be an object", label)
    return val


def _state(entry, dim, label):
    if isinstance(entry, dict) and "basis" in entry:
        k = entry["basis"]
        if not isinstance(k, int) or not 0 <= k < dim:
            raise ConfigError(f"basis index must be an integer in [0, {dim})", label)
        return DensityState.basis(dim, k).rho
    if isinstance(entry, dict) and "pure" in entry:
        try:
            psi = np.array([complex(a, b) for a, b in entry["pure"]])
        except (TypeError, ValueError):
            raise ConfigError("pure state must be a list of [re, im] pairs", label) from None
        if psi.size != dim or not np.linalg.norm(psi) > 0:
            raise ConfigError(f"pure state needs {dim} nonzero amplitudes", label)
        return DensityState.pure(psi).rho
    if entry == "mixed":
        return np.eye(dim, dtype=complex) / dim
    m = _decode_matrix(entry, label)
    try:
        return DensityState(m).rho
    except ValidationError as exc:
        raise ConfigError(str(exc), label) from None


def _matrix(entry, dim, label):
    if isinstance(entry, dict) and "projector" in entry:
        return _state({"pure": entry["projector"]}, dim, label)
    m = _decode_matrix(entry, label)
    if m.shape[0] != dim:
        raise ConfigError(f"dimension {m.shape[0]} does not match the model ({dim})", label)
    return m


def parse_scenario(doc: dict, base: Path | None = None) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    name = _get(doc, "name", str, "scenario")
    normalized = bool(doc.get("normalized", False))
    mspec = doc.get("model")
    if isinstance(mspec, str):
        path = Path(mspec) if base is None or Path(mspec).is_absolute() else base / mspec
        if not path.exists():
            raise ConfigError(f"file not found: {path}", "model")
        model = load_model(path, normalized=normalized)
    elif isinstance(mspec, dict):
        model = model_from_dict(mspec, normalized=normalized)
    else:
        raise ConfigError("must be a file path or an inline model object", "model")
    ctl = _get(doc, "control", dict)
    N = _get(ctl, "N", int, where="control")
    T = _get(ctl, "T", float, where="control")
    if N < 1 or T <= 0:
        raise ConfigError("need N >= 1 and T > 0", "control")
    n_vars = model.n_controls * (N + 1)
    init = ctl.get("initial", "zero")
    if init == "zero":
        initial = np.zeros(n_vars)
    else:
        initial = np.asarray(init, dtype=float).reshape(-1)
        if initial.size != n_vars:
            raise ConfigError(f"expected {n_vars} values", "control.initial")
    obj = _get(doc, "objective", dict)
    sim = doc.get("simulation", {})
    try:
        observable = Observable(_matrix(_get(obj, "observable", object, where="objective"),
                                        model.dim, "objective.observable"), normalized=normalized)
    except ValidationError as exc:
        raise ConfigError(str(exc), "objective.observable") from None
    rho0 = _state(_get(obj, "rho0", object, where="objective"), model.dim, "objective.rho0")
    h1 = sim.get("h1")
    try:
        objective = ObjectiveConfig(
            model=model, observable=observable, rho0=rho0, T=T, N=N,
            alpha=_get(obj, "alpha", float, 0.0, "objective"),
            sign=_get(obj, "sign", str, "maximize", "objective"),
            mode=_get(sim, "mode", str, "oracle", "simulation"),
            eps=_get(sim, "eps", float, 1e-4, "simulation"),
            oracle_steps=_get(sim, "oracle_steps", int, 200, "simulation"),
            normalized=normalized,
            h1=None if h1 is None else _matrix(h1, model.dim, "simulation.h1"))
    except ValidationError as exc:
        raise ConfigError(str(exc), "objective") from None
    opt = dict(doc.get("optimizer", {}))
    grad = doc.get("gradient", {})
    eps_g = opt.get("eps_g", 0.0)
    if not (isinstance(eps_g, (int, float)) or eps_g in ("first", "second")):
        raise ConfigError("must be a number, 'first' or 'second'", "optimizer.eps_g")
    try:
        gcfg = GradientOracleConfig(
            eps_g=0.0, fd_order=_get(grad, "fd_order", int, 2, "gradient"),
            fd_step=grad.get("fd_step"),
            noise_mode=_get(opt, "noise_mode", str, "spherical", "optimizer"),
            seed=_get(opt, "seed", int, 0, "optimizer"))
    except ValidationError as exc:
        raise ConfigError(str(exc), "gradient") from None
    out = doc.get("output", {}).get("dir")
    cfg = ScenarioConfig(name, objective, gcfg, opt, initial,
                         None if out is None else Path(out), base, doc)
    # resolve eps_g now so config errors surface before any work
    params = scenario_params(cfg)
    eg = params.eps_g_first if eps_g == "first" else params.eps_g_second if eps_g == "second" \
        else float(eps_g)
    if eg < 0:
        raise ConfigError("must be >= 0", "optimizer.eps_g")
    cfg.gradient = replace(cfg.gradient, eps_g=eg)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read file ({exc.strerror})", str(path)) from None
    return parse_scenario(doc, path.parent)


def scenario_params(cfg: ScenarioConfig) -> PagdParams:
    ell, rho = lipschitz_constants(cfg.objective)
    opt = cfg.optimizer
    try:
        return derive_params(eps=float(opt.get("eps", 0.05)), ell=ell, rho=rho,
                             c=float(opt.get("c", 4.0)), chi=opt.get("chi"),
                             delta=float(opt.get("delta", 0.1)),
                             Delta_f=float(opt.get("Delta_f", 2.0)), dim=cfg.objective.dim)
    except LindqocError as exc:
        raise ConfigError(str(exc), "optimizer") from None


# ---------------------------------------------------------------------------
# running

def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class _Oracles:
    """f and noisy-gradient oracles with a cache of exact FD gradients."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.noise = NoiseModel(cfg.gradient.eps_g, cfg.gradient.noise_mode, cfg.gradient.seed)
        self._cache: dict[bytes, np.ndarray] = {}
        self.evaluations = 0

    def f(self, x):
        self.evaluations += 1
        return evaluate_f(self.cfg.objective, x)

    def exact_grad(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = fd_gradient(self.cfg.objective, x, self.cfg.gradient)
        return self._cache[key]

    def grad(self, x, key):
        return self.noise.apply(self.exact_grad(x), *key)


def run_scenario(cfg: ScenarioConfig, out_dir=None, max_iter: int | None = None,
                 resume=None) -> dict:
    """Optimize from the initial control and write the artifacts; returns the summary."""
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    if out is None:
        raise ConfigError("no output directory given", "output.dir")
    out.mkdir(parents=True, exist_ok=True)
    params = scenario_params(cfg)
    opt = cfg.optimizer
    limit = max_iter if max_iter is not None else opt.get("max_iter")
    every = int(opt.get("checkpoint_every", 0))
    ck_path = out / "checkpoint.json"
    oracles = _Oracles(cfg)
    record_true = cfg.objective.mode == "oracle"
    started = time.perf_counter()
    result = run(oracles.f, oracles.grad, cfg.initial, params, seed=cfg.gradient.seed,
                 max_iter=limit, terminate=opt.get("terminate", "certified"),
                 true_grad=oracles.exact_grad if record_true else None, eps_g=cfg.eps_g,
                 checkpoint=lambda doc: save_checkpoint(ck_path, doc), checkpoint_every=every,
                 resume=None if resume is None else load_checkpoint(resume))
    best = result.best_x
    oracle_cfg = cfg.objective.with_mode("oracle")
    certified = float(np.linalg.norm(fd_gradient(oracle_cfg, best, cfg.gradient)))
    rho_T = final_states(cfg.objective, best[None])[0]
    elapsed = time.perf_counter() - started

    (out / "trace.csv").write_text(result.trace_csv())
    _dump(out / "controls.json", control_to_dict(cfg.objective.control(best)))
    _dump(out / "rho_final.json", {"rho": matrix_to_json(rho_T)})
    summary = {
        "scenario": cfg.name,
        "mode": cfg.objective.mode,
        "seed": cfg.gradient.seed,
        "iterations": result.state.iter,
        "terminated": result.terminated,
        "final_f": evaluate_f(cfg.objective, best),
        "final_f_oracle": evaluate_f(oracle_cfg, best),
        "best_noisy_grad_norm": result.best_grad_norm,
        "certified_grad_norm": certified,
        "certified": certified <= params.eps,
        "eps_g": cfg.eps_g,
        "noise_mode": cfg.gradient.noise_mode,
        "fd_order": cfg.gradient.fd_order,
        "params": params.to_dict(),
    }
    _dump(out / "summary.json", summary)
    # wall-clock lives apart so the other artifacts are reproducible byte for byte
    _dump(out / "timing.json", {"wall_clock_seconds": elapsed})
    return summary


def trace_rows(out_dir) -> list[dict]:
    """Read back a trace CSV as a list of dicts with numeric fields parsed."""
    rows = []
    with open(Path(out_dir) / "trace.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k == "event":
                    parsed[k] = v
                elif k == "iter":
                    parsed[k] = int(v)
                else:
                    parsed[k] = float(v) if v != "" else None
            rows.append(parsed)
    return rows
