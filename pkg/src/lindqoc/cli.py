"""Command-line entry point: ``lindqoc <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a JSON
diagnostic goes to stderr and, when an output directory is known, to
``diagnostic.json`` there).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, LindqocError
from .estimator import cost_report
from .interaction import SplitModel, simulate_interaction
from .model import (SIGMA_MINUS, SIGMA_X, SIGMA_Z, ControlField, LindbladModel, control_from_dict,
                    matrix_to_json, trace_distance)
from .objective import (GradientOracleConfig, derivative_bound_check, fd_gradient,
                        regularizer_gradient, split_model)
from .propagator import oracle_evolve, simulate
from .scenario import BUNDLED, bundled_path, parse_scenario, run_scenario

THREADS_ENV = "LINDQOC_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _scenario_doc(args) -> tuple[dict, Path | None]:
    if (args.scenario is None) == (args.bundled is None):
        raise ConfigError("give exactly one of --scenario or --bundled", "scenario")
    path = Path(args.scenario) if args.scenario else bundled_path(args.bundled)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read file ({exc.strerror})", str(path)) from None
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object", str(path))
    return doc, path.parent


def _override(doc: dict, section: str, key: str, value) -> None:
    if value is not None:
        doc.setdefault(section, {})[key] = value


def _load(args):
    doc, base = _scenario_doc(args)
    _override(doc, "simulation", "mode", getattr(args, "mode", None))
    _override(doc, "simulation", "eps", getattr(args, "sim_eps", None))
    _override(doc, "simulation", "oracle_steps", getattr(args, "oracle_steps", None))
    _override(doc, "optimizer", "seed", getattr(args, "seed", None))
    _override(doc, "optimizer", "eps_g", getattr(args, "eps_g", None))
    _override(doc, "optimizer", "noise_mode", getattr(args, "noise_mode", None))
    _override(doc, "optimizer", "eps", getattr(args, "eps", None))
    _override(doc, "optimizer", "checkpoint_every", getattr(args, "checkpoint_every", None))
    return parse_scenario(doc, base)


def _control(cfg, path: str | None) -> ControlField:
    if path is None:
        return cfg.objective.control(cfg.initial)
    try:
        u = control_from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read control file ({exc})", "control") from None
    if u.n_c != cfg.objective.n_c:
        raise ConfigError(f"control has {u.n_c} channels, model has {cfg.objective.n_c}", "control")
    return u


def _eps_g_arg(text: str):
    if text in ("first", "second"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number, 'first' or 'second'") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> dict:
    cfg = _load(args)
    obj = cfg.objective
    u = _control(cfg, args.control)
    res = simulate(obj.model, u, obj.rho0, obj.T, eps=args.sim_eps or obj.eps)
    doc = {"rho": matrix_to_json(res.rho), "trace_defect": res.trace_defect,
           "plan": None if res.plan is None else res.plan.to_dict(),
           "segments": res.diagnostics}
    if args.oracle_steps:
        ref = oracle_evolve(obj.model, u, obj.rho0, obj.T, steps=args.oracle_steps)
        doc["oracle_trace_distance"] = trace_distance(res.rho, ref)
    return doc


def benchmark_split(ratio: float = 10.0, gamma: float = 0.3) -> tuple[SplitModel, ControlField]:
    """Qubit with ``||H1|| = ratio ||H2||``: ``H1 = ratio/2 sz``, ``H2 = u(t) sx`` with ``|u| <= 1/2``."""
    rest = LindbladModel(np.zeros((2, 2)), [SIGMA_X], [np.sqrt(gamma) * SIGMA_MINUS])
    u = ControlField(2.0, [[0.5], [-0.3], [0.2], [0.5], [-0.1]])
    return SplitModel(0.5 * ratio * SIGMA_Z, rest), u


def cmd_compare_interaction(args) -> dict:
    if args.scenario or args.bundled:
        cfg = _load(args)
        if cfg.objective.h1 is None:
            raise ConfigError("scenario has no h1 to split off", "simulation.h1")
        split = split_model(cfg.objective.model, cfg.objective.h1)
        u = _control(cfg, args.control)
        rho0, T = cfg.objective.rho0, cfg.objective.T
    else:
        split, u = benchmark_split(args.ratio)
        rho0, T = np.diag([0.0, 1.0]).astype(complex), u.T
    eps = args.sim_eps or 1e-4
    full = split.full()
    ref = oracle_evolve(full, u, rho0, T, steps=args.oracle_steps or 100000)
    direct = simulate(full, u, rho0, T, eps=eps)
    inter = simulate_interaction(split, u, rho0, T, eps=eps, n_steps=args.n_steps)
    return {
        "direct": {"trace_distance": trace_distance(direct.rho, ref),
                   "segments": len(direct.diagnostics),
                   "dyson_samples": int(sum(d["dyson_samples"] for d in direct.diagnostics)),
                   "plan": direct.plan.to_dict()},
        "interaction": {"trace_distance": trace_distance(inter.rho, ref),
                        "slices": len(inter.diagnostics),
                        "dyson_samples": int(sum(d["dyson_samples"] for d in inter.diagnostics)),
                        "plan": inter.plan.to_dict()},
        "states_trace_distance": trace_distance(direct.rho, inter.rho),
    }


def cmd_check_gradients(args) -> dict:
    cfg = _load(args)
    obj = cfg.objective
    rng = np.random.default_rng(args.seed or 0)
    x = rng.uniform(-args.amplitude, args.amplitude, cfg.initial.size)
    gcfg = cfg.gradient
    g = fd_gradient(obj, x, gcfg)
    # reference: same stencil at a finer step, one order higher
    fine = GradientOracleConfig(fd_order=gcfg.fd_order + 1, fd_step=(gcfg.fd_step or 1e-3) / 2)
    ref = fd_gradient(obj, x, fine)
    doc = {"point": x.tolist(), "gradient": g.tolist(),
           "regularizer_gradient": regularizer_gradient(obj, x).tolist(),
           "reference_max_abs_diff": float(np.max(np.abs(g - ref)))}
    norm_obj = parse_scenario({**cfg.raw, "normalized": True}, cfg.source).objective \
        if args.bounds else None
    if norm_obj is not None:
        doc["bounds"] = {str(k): derivative_bound_check(norm_obj, k, points=args.points,
                                                        seed=args.seed or 0)
                         for k in (1, 2)}
    return doc


def cmd_estimate(args) -> dict:
    cfg = _load(args)
    obj = cfg.objective
    opt = cfg.optimizer
    eps = args.eps if args.eps is not None else float(opt.get("eps", 0.05))
    return cost_report(obj.model, args.T or obj.T, eps,
                       Delta_f=float(opt.get("Delta_f", 2.0)), delta=float(opt.get("delta", 0.1)),
                       observable_norm=obj.observable.norm, alpha=obj.alpha,
                       c=float(opt.get("c", 4.0)), chi=opt.get("chi"), sim_eps=args.sim_eps)


def cmd_optimize(args) -> dict:
    cfg = _load(args)
    out = args.out_dir or (str(cfg.output_dir) if cfg.output_dir else f"out/{cfg.name}")
    args._out_dir = out
    return run_scenario(cfg, out, max_iter=args.max_iter, resume=args.resume)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lindqoc", description="Open-system quantum optimal control")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario_required=True):
        g = sp.add_argument_group("scenario")
        g.add_argument("--scenario", help="scenario JSON file")
        g.add_argument("--bundled", choices=BUNDLED, help="use a bundled scenario")
        sp.add_argument("--threads", type=int,
                        default=int(os.environ.get(THREADS_ENV, "0")) or None,
                        help=f"BLAS thread cap (default ${THREADS_ENV}, else unlimited)")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")
        sp.set_defaults(scenario_required=scenario_required)

    sp = sub.add_parser("simulate", help="propagate rho0 with the Kraus-series simulator")
    common(sp)
    sp.add_argument("--control", help="control JSON (default: the scenario's initial control)")
    sp.add_argument("--sim-eps", type=float, help="simulation precision")
    sp.add_argument("--oracle-steps", type=int,
                    help="also run the reference integrator with this many steps")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("optimize", help="run PAGD on a scenario and write artifacts")
    common(sp)
    sp.add_argument("--out-dir", help="artifact directory (default: the scenario's output.dir)")
    sp.add_argument("--mode", choices=("oracle", "kraus", "interaction"))
    sp.add_argument("--sim-eps", type=float)
    sp.add_argument("--oracle-steps", type=int)
    sp.add_argument("--eps", type=float, help="target stationarity")
    sp.add_argument("--eps-g", type=_eps_g_arg, help="gradient noise level, or first/second")
    sp.add_argument("--noise-mode", choices=("none", "spherical", "adversarial"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-iter", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--resume", help="checkpoint JSON to resume from")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("compare-interaction",
                        help="direct vs interaction-picture simulation against the reference")
    common(sp, scenario_required=False)
    sp.add_argument("--control")
    sp.add_argument("--ratio", type=float, default=10.0,
                    help="||H1|| / ||H2|| of the built-in benchmark")
    sp.add_argument("--n-steps", type=int)
    sp.add_argument("--sim-eps", type=float)
    sp.add_argument("--oracle-steps", type=int)
    sp.set_defaults(func=cmd_compare_interaction)

    sp = sub.add_parser("check-gradients", help="finite-difference gradients and derivative bounds")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--amplitude", type=float, default=1.0)
    sp.add_argument("--points", type=int, default=20)
    sp.add_argument("--no-bounds", dest="bounds", action="store_false")
    sp.set_defaults(func=cmd_check_gradients)

    sp = sub.add_parser("estimate", help="closed-form cost report; nothing is simulated")
    common(sp)
    sp.add_argument("--T", type=float, help="horizon (default: the scenario's)")
    sp.add_argument("--eps", type=float)
    sp.add_argument("--sim-eps", type=float)
    sp.set_defaults(func=cmd_estimate)
    return p


def _diagnostic(args, exc: BaseException) -> None:
    doc = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
           "traceback": traceback.format_exception(type(exc), exc, exc.__traceback__)[-3:]}
    text = json.dumps(doc, indent=2) + "\n"
    sys.stderr.write(text)
    out = getattr(args, "_out_dir", None)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "diagnostic.json").write_text(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.scenario_required and args.scenario is None and args.bundled is None:
            raise ConfigError("give --scenario or --bundled", "scenario")
        with threadpool_limits(limits=args.threads):
            doc = args.func(args)
        _emit(doc, args.out)
    except ConfigError as exc:
        print(f"lindqoc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LindqocError, np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        _diagnostic(args, exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
