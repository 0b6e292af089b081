"""Config-driven experiment runner.

One run per process. Configs are flat INI-style files (sections of key=value,
no includes); see the configs/ directory for annotated examples. Every run
writes its resolved config into summary.json for provenance; timestamps and
wall times are segregated into meta.json so result files are byte-identical
across reruns with the same config and seed.

Exit codes: 0 all verdicts pass (or no verdicts), 1 failed verdicts,
2 config error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.linalg import subspace_angles

from . import __version__
from .core import check_transpose_consistency, jitter
from .errors import ConfigError
from .hypergrad import fd_hypergrad, forward_hypergrad, reverse_hypergrad, unroll
from .oracle import convergence_harness, exact_hypergrad, exact_minimizer, ridge_quadratic
from .outer import OuterConfig, run_outer
from .problems import (
    HyperReprSpec,
    SupervisedData,
    evaluate_meta,
    generate_synthetic,
    hyperclean_problem,
    hyperrepr_problem,
    ridge_problem,
)

OUTPUT_DIR_ENV = "UNROLLDIFF_OUTPUT_DIR"

_REQUIRED = object()


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(options):
    def coerce(s: str):
        if s not in options:
            raise ValueError(f"must be one of {sorted(options)}, got {s!r}")
        return s
    return coerce


_DYNAMICS = _choice({"gd", "momentum", "hyper_lr_gd"})
_MODES = _choice({"reverse", "forward"})

# Section -> key -> (coercer, default-or-required), per experiment kind.
def _dynamics_schema(eta_default: float) -> dict:
    return {"kind": (_DYNAMICS, "gd"), "eta": (float, eta_default), "mu": (float, 0.9)}
_OUTER_SCHEMA = {
    "beta": (float, 1.0),
    "steps": (int, 100),
    "mode": (_MODES, "reverse"),
    "warm_start": (_bool, False),
    "tolerance": (float, 0.0),
}

SCHEMAS = {
    "gradcheck": {
        "problem": {
            "n_train": (int, 50), "n_val": (int, 50), "dim": (int, 20),
            "separation": (float, 2.0), "rho": (float, 0.3), "draws": (int, 3),
        },
        "dynamics": _dynamics_schema(0.02),
        "unroll": {"T": (int, 10)},
    },
    "ridge-verify": {
        "problem": {"n_train": (int, 30), "n_val": (int, 30), "dim": (int, 5), "reg0": (float, 1.0)},
        "dynamics": {"eta": (float, 0.005)},
        "unroll": {"T": (int, 500)},
    },
    "convergence": {
        "problem": {"n_train": (int, 30), "n_val": (int, 30), "dim": (int, 5), "reg0": (float, 1.0)},
        "dynamics": {"eta": (float, 0.005)},
        "unroll": {"T_max": (int, 60)},
    },
    "hyperclean": {
        "problem": {
            "n_train": (int, 100), "n_val": (int, 100), "dim": (int, 5),
            "separation": (float, 2.0), "rho": (float, 0.3),
        },
        "dynamics": _dynamics_schema(0.02),
        "unroll": {"T": (int, 50)},
        "outer": dict(_OUTER_SCHEMA),
    },
    "hyperrepr": {
        "problem": {
            "tasks": (int, 40), "holdout_tasks": (int, 20), "shots": (int, 10),
            "val_shots": (int, 10), "dim": (int, 10), "k_true": (int, 3), "k": (int, 3),
        },
        "dynamics": _dynamics_schema(0.5),
        "unroll": {"T": (int, 5)},
        "outer": dict(_OUTER_SCHEMA) | {"meta_batch": (int, 4)},
    },
}

DESCRIPTIONS = {
    "gradcheck": "transpose/mode/finite-difference checks on a hyper-cleaning instance",
    "ridge-verify": "ridge unroll endpoint and reverse mode vs the closed-form oracle",
    "convergence": "hypergradient error decay in T vs the implicit-differentiation limit",
    "hyperclean": "learn per-example loss weights on corrupted synthetic data",
    "hyperrepr": "learn a shared linear representation over synthetic episodes",
}


def parse_config(path) -> dict:
    """Parse and validate a run config; returns the resolved nested dict."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (T vs t)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(path), f"cannot parse config: {exc}") from exc

    if not parser.has_section("experiment"):
        raise ConfigError("experiment", "missing [experiment] section")
    exp = dict(parser.items("experiment"))
    kind = exp.pop("kind", None)
    if kind is None:
        raise ConfigError("experiment.kind", "experiment kind is required")
    if kind not in SCHEMAS:
        raise ConfigError("experiment.kind", f"unknown experiment kind {kind!r}")
    if "seed" not in exp:
        raise ConfigError("experiment.seed", "seed is mandatory")
    try:
        seed = int(exp.pop("seed"))
    except ValueError as exc:
        raise ConfigError("experiment.seed", str(exc)) from exc
    output_dir = exp.pop("output_dir", f"runs/{kind}")
    if exp:
        raise ConfigError(f"experiment.{next(iter(exp))}", "unknown key")

    schema = SCHEMAS[kind]
    resolved = {"experiment": {"kind": kind, "seed": seed, "output_dir": output_dir}}
    for section, keys in schema.items():
        got = dict(parser.items(section)) if parser.has_section(section) else {}
        out = {}
        for key, (coerce, default) in keys.items():
            if key in got:
                raw = got.pop(key)
                try:
                    out[key] = coerce(raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}", str(exc)) from exc
            elif default is _REQUIRED:
                raise ConfigError(f"{section}.{key}", "required key missing")
            else:
                out[key] = default
        if got:
            raise ConfigError(f"{section}.{next(iter(got))}", "unknown key")
        resolved[section] = out
    for section in parser.sections():
        if section != "experiment" and section not in schema:
            raise ConfigError(section, f"unknown section for kind {kind!r}")
    return resolved


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, payload: dict) -> None:
    _write_atomic(path, json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _rel_inf(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / (np.max(np.abs(a)) + 1e-12))


def _ridge_data(cfg: dict):
    p = cfg["problem"]
    rng = np.random.default_rng(cfg["experiment"]["seed"])
    beta = rng.standard_normal(p["dim"])
    def split(n):
        X = rng.standard_normal((n, p["dim"]))
        return SupervisedData(X, X @ beta + 0.1 * rng.standard_normal(n))
    return split(p["n_train"]), split(p["n_val"])


def _run_gradcheck(cfg: dict, out_dir: Path):
    p, d = cfg["problem"], cfg["dynamics"]
    seed = cfg["experiment"]["seed"]
    data = generate_synthetic(
        "hyperclean-corrupted",
        {"n_train": p["n_train"], "n_val": p["n_val"], "dim": p["dim"],
         "separation": p["separation"], "rho": p["rho"]},
        seed,
    )
    problem, lam0 = hyperclean_problem(
        data["train"], data["val"], data["spec"],
        T=cfg["unroll"]["T"], eta=d["eta"], dynamics=d["kind"], mu=d["mu"],
    )
    rng = np.random.default_rng(seed + 1)
    worst_transpose = 0.0
    worst_modes = 0.0
    worst_fd = 0.0
    for _ in range(p["draws"]):
        lam = jitter(lam0, rng, 0.4, margin=0.05)
        rep = check_transpose_consistency(
            problem.dynamics, problem.init.init(lam), lam, problem.train_data, 20, seed
        )
        worst_transpose = max(worst_transpose, rep.max_defect)
        rev = reverse_hypergrad(problem, unroll(problem, lam))
        fwd = forward_hypergrad(problem, lam)
        fd = fd_hypergrad(problem, lam)
        worst_modes = max(worst_modes, _rel_inf(rev.grad, fwd.grad))
        worst_fd = max(worst_fd, _rel_inf(rev.grad, fd.grad))

    verdicts = {
        "transpose_consistency": {"measured": worst_transpose, "threshold": 1e-10},
        "mode_agreement": {"measured": worst_modes, "threshold": 1e-8},
        "fd_agreement": {"measured": worst_fd, "threshold": 1e-4},
    }
    return {"lambda_dim": lam0.dim, "draws": p["draws"]}, verdicts


def _run_ridge_verify(cfg: dict, out_dir: Path):
    train, val = _ridge_data(cfg)
    eta = cfg["dynamics"]["eta"]
    T = cfg["unroll"]["T"]
    problem, lam0 = ridge_problem(train, val, T=T, eta=eta, reg0=cfg["problem"]["reg0"])
    q = ridge_quadratic(train.X, train.y, lam0.segment("reg").offset, lam0)

    traj = unroll(problem, lam0)
    w_star = exact_minimizer(q, lam0)
    endpoint_err = float(np.max(np.abs(traj.final.params - w_star)))

    prob_long = dataclasses.replace(problem, T=2000)
    rev = reverse_hypergrad(prob_long, unroll(prob_long, lam0))
    g_exact = exact_hypergrad(q, problem.outer, lam0, val)
    oracle_err = _rel_inf(g_exact, rev.grad)

    verdicts = {
        "unroll_endpoint_vs_closed_form": {"measured": endpoint_err, "threshold": 1e-6},
        "reverse_vs_implicit_oracle": {"measured": oracle_err, "threshold": 1e-7},
    }
    return {"T": T, "f_at_lam0": rev.f_value}, verdicts


def _run_convergence(cfg: dict, out_dir: Path):
    train, val = _ridge_data(cfg)
    problem, lam0 = ridge_problem(
        train, val, T=1, eta=cfg["dynamics"]["eta"], reg0=cfg["problem"]["reg0"]
    )
    q = ridge_quadratic(train.X, train.y, lam0.segment("reg").offset, lam0)
    T_max = cfg["unroll"]["T_max"]
    report = convergence_harness(problem, lam0, q, range(1, T_max + 1))
    report.to_csv(out_dir / "table.csv")

    ratio_dev = abs(report.fitted_ratio / report.theory_ratio - 1.0)
    # The scalar-lambda error can cross zero mid-sweep (norm dips then
    # rebounds), so only require a monotone tail of at least 10 points.
    verdicts = {
        "fitted_ratio_within_20pct": {"measured": ratio_dev, "threshold": 0.2},
        "monotone_tail": {"measured": float(report.monotone_from), "threshold": float(T_max - 10)},
    }
    results = {
        "fitted_ratio": report.fitted_ratio,
        "theory_ratio": report.theory_ratio,
        "monotone_from": report.monotone_from,
    }
    return results, verdicts


def _outer_config(cfg: dict, with_meta_batch: bool = False) -> OuterConfig:
    o = cfg["outer"]
    return OuterConfig(
        beta=o["beta"], steps=o["steps"], mode=o["mode"], warm_start=o["warm_start"],
        meta_batch=o["meta_batch"] if with_meta_batch else None,
        tolerance=o["tolerance"], seed=cfg["experiment"]["seed"],
    )


def _run_hyperclean(cfg: dict, out_dir: Path):
    p, d = cfg["problem"], cfg["dynamics"]
    seed = cfg["experiment"]["seed"]
    data = generate_synthetic(
        "hyperclean-corrupted",
        {"n_train": p["n_train"], "n_val": p["n_val"], "dim": p["dim"],
         "separation": p["separation"], "rho": p["rho"]},
        seed,
    )
    problem, lam0 = hyperclean_problem(
        data["train"], data["val"], data["spec"],
        T=cfg["unroll"]["T"], eta=d["eta"], dynamics=d["kind"], mu=d["mu"],
    )
    baseline = unroll(problem, lam0)
    baseline_f = problem.outer.value(baseline.final.params, lam0, problem.val_data)

    lam_star, trace = run_outer(problem, _outer_config(cfg), lam0)
    trace.to_csv(out_dir / "trace.csv")

    mask = data["spec"].mask
    weights = lam_star.get("weights")
    results = {
        "final_f": trace.rows[-1].f_value,
        "baseline_f_all_ones": baseline_f,
        "mean_weight_clean": float(weights[~mask].mean()),
        "mean_weight_corrupted": float(weights[mask].mean()),
        "weight_gap": float(weights[~mask].mean() - weights[mask].mean()),
        "stop_reason": trace.stop_reason,
        "steps_run": len(trace.rows),
        "final_lambda_segments": {seg.name: lam_star.get(seg.name) for seg in lam_star.segments},
    }
    return results, None, trace


def _run_hyperrepr(cfg: dict, out_dir: Path):
    p, d = cfg["problem"], cfg["dynamics"]
    seed = cfg["experiment"]["seed"]
    gen = generate_synthetic(
        "shared-subspace-tasks",
        {"tasks": p["tasks"], "holdout_tasks": p["holdout_tasks"], "shots": p["shots"],
         "val_shots": p["val_shots"], "dim": p["dim"], "k_true": p["k_true"]},
        seed,
    )
    meta, holdout = gen["meta"], gen["holdout"]
    spec = HyperReprSpec(k=p["k"], p=meta.p, true_basis=meta.descriptor["true_basis"])
    kwargs = dict(T=cfg["unroll"]["T"], eta=d["eta"], dynamics=d["kind"], mu=d["mu"], repr_seed=seed)
    problem, lam0 = hyperrepr_problem(meta, spec, batch_size=cfg["outer"]["meta_batch"], **kwargs)
    single, _ = hyperrepr_problem(meta, spec, batch_size=1, **kwargs)

    lam_star, trace = run_outer(problem, _outer_config(cfg, with_meta_batch=True), lam0, meta=meta)
    trace.to_csv(out_dir / "trace.csv")

    def max_angle(lam):
        R = lam.get(spec.repr_segment).reshape(spec.k, spec.p)
        return float(np.max(subspace_angles(R.T, spec.true_basis)))

    results = {
        "holdout_loss_trained": evaluate_meta(single, lam_star, holdout.episodes),
        "holdout_loss_frozen": evaluate_meta(single, lam0, holdout.episodes),
        "max_principal_angle_init": max_angle(lam0),
        "max_principal_angle_final": max_angle(lam_star),
        "stop_reason": trace.stop_reason,
        "steps_run": len(trace.rows),
    }
    return results, None, trace


def execute(cfg: dict) -> tuple[Path, dict]:
    """Run one configured experiment; returns the output dir and verdicts."""
    kind = cfg["experiment"]["kind"]
    out_dir = Path(os.environ.get(OUTPUT_DIR_ENV) or cfg["experiment"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    trace = None
    if kind == "gradcheck":
        results, verdicts = _run_gradcheck(cfg, out_dir)
    elif kind == "ridge-verify":
        results, verdicts = _run_ridge_verify(cfg, out_dir)
    elif kind == "convergence":
        results, verdicts = _run_convergence(cfg, out_dir)
    elif kind == "hyperclean":
        results, verdicts, trace = _run_hyperclean(cfg, out_dir)
    elif kind == "hyperrepr":
        results, verdicts, trace = _run_hyperrepr(cfg, out_dir)
    else:  # pragma: no cover - parse_config rejects unknown kinds
        raise ConfigError("experiment.kind", f"unknown kind {kind!r}")
    wall_s = time.perf_counter() - t0

    if verdicts is not None:
        for entry in verdicts.values():
            entry["pass"] = bool(entry["measured"] <= entry["threshold"])
        _write_json(out_dir / "verdict.json", verdicts)

    _write_json(out_dir / "summary.json", {"config": cfg, "results": results})
    meta = {
        "started_at": started,
        "wall_seconds": wall_s,
        "per_step_wall_ms": trace.wall_ms() if trace is not None else None,
        "package_version": __version__,
        "numpy_version": np.__version__,
    }
    _write_json(out_dir / "meta.json", meta)
    return out_dir, (verdicts or {})


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="unrolldiff", description="bilevel experiments via unrolled differentiation"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("config", help="path to an INI-style run config")
    val_p = sub.add_parser("validate", help="parse and validate a config without running")
    val_p.add_argument("config")
    sub.add_parser("list-experiments", help="show available experiment kinds")
    args = parser.parse_args(argv)

    if args.command == "list-experiments":
        for kind in sorted(SCHEMAS):
            print(f"{kind:14s} {DESCRIPTIONS[kind]}")
        return 0

    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(f"OK: {cfg['experiment']['kind']} config is valid")
        return 0

    try:
        out_dir, verdicts = execute(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - process boundary of the CLI
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3

    failed = [name for name, v in verdicts.items() if not v["pass"]]
    for name, v in sorted(verdicts.items()):
        status = "PASS" if v["pass"] else "FAIL"
        print(f"{status} {name}: measured={v['measured']:.3e} threshold={v['threshold']:.3e}")
    print(f"artifacts written to {out_dir}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
