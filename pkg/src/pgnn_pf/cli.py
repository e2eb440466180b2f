"""Command-line entry point: ``pgnn-pf {gen,solve,train,report}``.

Exit codes:
    0  success
    2  bad arguments, unreadable or invalid case/config, unknown method
    3  too many power-flow failures while generating data
    4  Newton-Raphson did not converge (or the Jacobian was singular)
    5  training loss diverged
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from importlib.resources import files
from pathlib import Path

import numpy as np
import scipy

from .acpf import NonConvergence, PFSpec, SingularJacobian, newton_solve, solution_csv
from .case_model import (CaseFormatError, CaseValidationError, adjacency, build_admittance,
                         load_case)
from .data import (EmptySplit, Sequential, SplitSpec, TooManyFailures, add_noise, read_dataset,
                   split, write_dataset)
from .experiments import (MODELING_METHODS, SOLVER_METHODS, ExperimentConfig, analyze_recovery,
                          make_dataset, run_interp_extrap, run_modeling_comparison,
                          run_outlier_robustness, run_solver_comparison, write_gnuplot)
from .models import DivergedLoss, build_model, save_model, train

log = logging.getLogger("pgnn_pf")

EXIT_OK, EXIT_USAGE, EXIT_FAILURES, EXIT_NONCONVERGENCE, EXIT_DIVERGED = 0, 2, 3, 4, 5
BUILTIN_CASES = ("ieee57", "ieee118")
EXPERIMENTS = ("solver", "modeling", "recovery", "interp_extrap", "outliers")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- config


def resolve_case(name: str) -> Path:
    """A path to a case file, or the name of a bundled case."""
    if name in BUILTIN_CASES:
        return Path(str(files("pgnn_pf") / "cases" / f"{name}.case"))
    path = Path(name)
    if not path.is_file():
        raise UsageError(f"case file not found: {path}")
    return path


def _coerce(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        proto = default[0] if default else ""
        return tuple(_coerce(proto, t) for t in items)
    try:
        return type(default)(text)
    except ValueError as exc:
        raise UsageError(f"cannot read {text!r} as {type(default).__name__}") from exc


def _section(cp: configparser.ConfigParser, name: str, proto) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, text in cp.items(name):
        if key not in proto:
            raise UsageError(f"unknown key {key!r} in [{name}]; valid: {', '.join(sorted(proto))}")
        out[key] = _coerce(proto[key], text)
    return out


DATAGEN_DEFAULTS = {"steps": 2000, "data_seed": 7, "noise": 0.0}
TRAIN_DEFAULTS = {"method": "mlp+tpbnn", "data": "", "alpha_sup": 1.0, "alpha_unsup": 0.03,
                  "lr": 1e-3, "decoder_lr": 1e-2, "batch_size": 32, "max_epochs": 300,
                  "patience": 50, "noise": 0.01, "hidden": (128, 128), "decoder_hidden": (128,)}
REPORT_DEFAULTS = {"experiments": EXPERIMENTS, "gnuplot": True}


def load_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"bad config {p}: {exc}") from exc
        unknown = set(cp.sections()) - {"datagen", "train", "experiment", "report"}
        if unknown:
            raise UsageError(f"unknown config section(s) {sorted(unknown)}")
    return cp


def experiment_config(cp, seeds=None) -> ExperimentConfig:
    proto = {f.name: getattr(ExperimentConfig(), f.name) for f in dataclasses.fields(ExperimentConfig)}
    kw = _section(cp, "experiment", proto)
    if seeds is not None:
        kw["seeds"] = seeds
        kw["aux_seeds"] = seeds[:1]
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------- run directory


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(_jsonable(resolved), sort_keys=True).encode()).hexdigest()


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "artifact": pkg}


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def open_run(args, command: str, resolved: dict, seeds) -> Path:
    """Create ``out/<run-id>/`` and write the manifest; the id derives from the config hash."""
    h = config_hash({"command": command, **resolved})
    run_id = args.run_id or f"{command}-{h[:12]}"
    run_dir = Path(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": _jsonable(resolved), "config_hash": h,
                "seeds": list(seeds), "versions": _versions()}
    atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_dir


def _seeds(args):
    if args.seed is None:
        return None
    return tuple(args.seed)


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cp = load_config(args.config)
    opts = {**DATAGEN_DEFAULTS, **_section(cp, "datagen", DATAGEN_DEFAULTS)}
    if args.steps is not None:
        opts["steps"] = args.steps
    if args.seed:
        opts["data_seed"] = args.seed[0]
    if opts["steps"] < 0:
        raise UsageError("--steps must be nonnegative")
    case_path = resolve_case(args.case)
    sys_ = load_case(case_path)
    cfg = ExperimentConfig(n_steps=opts["steps"], data_seed=opts["data_seed"])
    ds, census = make_dataset(sys_, cfg)
    if opts["noise"] > 0:
        ds = add_noise(ds, opts["noise"], opts["data_seed"])
    run_dir = open_run(args, "gen", {"case": str(case_path), **opts}, [opts["data_seed"]])
    write_dataset(ds, run_dir / "dataset.csv", {"case": sys_.name, "census": census, **opts})
    print(f"converged {census['converged']}/{census['steps']} steps, failed {census['failed']}")
    print(f"wrote {run_dir / 'dataset.csv'}")
    return EXIT_OK


def cmd_solve(args) -> int:
    case_path = resolve_case(args.case)
    sys_ = load_case(case_path)
    y = build_admittance(sys_)
    k = args.load_scale
    spec = PFSpec.from_system(sys_, np.asarray(sys_.gen_dispatch) * k, sys_.p_demand * k,
                              sys_.q_demand * k)
    sol = newton_solve(spec, y, tol=args.tol, max_iter=args.max_iter)
    run_dir = open_run(args, "solve", {"case": str(case_path), "load_scale": k, "tol": args.tol,
                                       "max_iter": args.max_iter}, [])
    atomic_write(run_dir / "solution.csv", solution_csv(sol, sys_.ext_ids))
    print(f"converged in {sol.iterations} iterations, mismatch inf-norm {sol.final_mismatch_norm:.3e}")
    print(f"wrote {run_dir / 'solution.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cp = load_config(args.config)
    opts = {**TRAIN_DEFAULTS, **_section(cp, "train", TRAIN_DEFAULTS)}
    if args.method:
        opts["method"] = args.method
    if args.data:
        opts["data"] = args.data
    if opts["method"] not in SOLVER_METHODS[1:]:
        raise UsageError(f"unknown method {opts['method']!r}; valid: {', '.join(SOLVER_METHODS[1:])}")
    seeds = _seeds(args) or (0,)
    case_path = resolve_case(args.case)
    sys_ = load_case(case_path)
    if opts["data"]:
        if not Path(opts["data"]).is_file():
            raise UsageError(f"dataset not found: {opts['data']}")
        ds = read_dataset(opts["data"])
    else:
        ds = make_dataset(sys_, ExperimentConfig())[0]
    if ds.n_bus != sys_.n_bus:
        raise UsageError(f"dataset has {ds.n_bus} buses but case has {sys_.n_bus}")
    exp = ExperimentConfig(lr=opts["lr"], decoder_lr=opts["decoder_lr"],
                           batch_size=opts["batch_size"], max_epochs=opts["max_epochs"],
                           patience=opts["patience"])
    run_dir = open_run(args, "train", {"case": str(case_path), **opts}, seeds)
    adj = adjacency(sys_).a
    for seed in seeds:
        tr, va, te = split(ds, SplitSpec(Sequential(), seed))
        if opts["noise"] > 0:
            tr, va = add_noise(tr, opts["noise"], 2 * seed + 1), add_noise(va, opts["noise"], 2 * seed + 2)
        from .nn import LossWeights

        model = build_model(opts["method"], tr, seed, LossWeights(opts["alpha_sup"], opts["alpha_unsup"]),
                            opts["hidden"], opts["decoder_hidden"], adj)
        tc = exp.train_config(seed)
        hist = train(model, tr, va, tc)
        save_model(model, run_dir / f"model-seed{seed}.npz", tc)
        atomic_write(run_dir / f"history-seed{seed}.csv", hist.to_csv())
        rmse = float(np.sqrt(np.mean((model.predict_v(te.x) - te.v) ** 2)))
        print(f"seed {seed}: {len(hist.val_sup)} epochs, best {hist.best_epoch}, test rmse {rmse:.4e}")
    print(f"wrote {run_dir}")
    return EXIT_OK


def _report_case(sys_, cfg: ExperimentConfig, experiments, out: Path, gnuplot: bool) -> None:
    ds, census = make_dataset(sys_, cfg)
    tag = sys_.name
    atomic_write(out / f"{tag}_census.json", json.dumps(census, indent=2, sort_keys=True) + "\n")
    if "solver" in experiments:
        rep = run_solver_comparison(sys_, cfg, ds)
        atomic_write(out / f"{tag}_solver_comparison.csv", rep.to_csv())
        atomic_write(out / f"{tag}_solver_mape_cdf.csv", rep.cdf_csv())
        if gnuplot:
            write_gnuplot(out / f"{tag}_solver_mape_cdf.gp", f"{tag}_solver_mape_cdf.csv",
                          "MAPE CDF", list(rep.methods) + ["pgnn_aggregate"], "quantile", "MAPE (%)")
    if "modeling" in experiments or "recovery" in experiments:
        rep = run_modeling_comparison(sys_, cfg, ds)
        if "modeling" in experiments:
            atomic_write(out / f"{tag}_modeling_comparison.csv", rep.to_csv())
        if "recovery" in experiments:
            y, a = build_admittance(sys_), adjacency(sys_)
            lines = ["method,seed,pattern_precision,pattern_recall,weight_rmse_on_pattern"]
            for method in ("bnn", "tpbnn"):
                for seed, dec in sorted(rep.models.get(method, {}).items()):
                    rr = analyze_recovery(dec, y, a)
                    lines.append(f"{method},{seed},{rr.pattern_precision:.9g},"
                                 f"{rr.pattern_recall:.9g},{rr.weight_rmse_on_pattern:.9g}")
                    if seed == cfg.seeds[0]:
                        rr.write_heatmaps(out, f"{tag}_{method}_")
            atomic_write(out / f"{tag}_recovery.csv", "\n".join(lines) + "\n")
    if "interp_extrap" in experiments:
        for name, rep in run_interp_extrap(sys_, cfg, ds).items():
            atomic_write(out / f"{tag}_{name}_curves.csv", rep.to_csv())
            atomic_write(out / f"{tag}_{name}_gaps.csv", rep.gaps_csv())
    if "outliers" in experiments:
        rep = run_outlier_robustness(sys_, cfg, ds)
        atomic_write(out / f"{tag}_outliers.csv", rep.to_csv())
        atomic_write(out / f"{tag}_outlier_slopes.csv", rep.slopes_csv())


def cmd_report(args) -> int:
    cp = load_config(args.config)
    opts = {**REPORT_DEFAULTS, **_section(cp, "report", REPORT_DEFAULTS)}
    bad = [e for e in opts["experiments"] if e not in EXPERIMENTS]
    if bad:
        raise UsageError(f"unknown experiment(s) {bad}; valid: {', '.join(EXPERIMENTS)}")
    cfg = experiment_config(cp, _seeds(args))
    cases = [resolve_case(args.case)]
    if args.full and args.case != "ieee118":
        cases.append(resolve_case("ieee118"))
    resolved = {"cases": [str(c) for c in cases], "report": opts, "experiment": cfg}
    run_dir = open_run(args, "report", resolved, cfg.seeds)
    for path in cases:
        _report_case(load_case(path), cfg, opts["experiments"], run_dir, opts["gnuplot"])
    print(f"wrote {run_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--case", default="ieee57", help="case file path or bundled name")
    parent.add_argument("--config", help="key-value config file (INI sections)")
    parent.add_argument("--out", default="out", help="output root; runs go to OUT/<run-id>/")
    parent.add_argument("--run-id", help="override the config-derived run id")
    parent.add_argument("--seed", type=int, nargs="+", help="seed(s); overrides the config")
    parent.add_argument("--full", action="store_true", help="also run IEEE 118")
    parent.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pgnn-pf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[parent], help="generate a solved operating-point dataset")
    g.add_argument("--steps", type=int)
    s = sub.add_parser("solve", parents=[parent], help="Newton-solve the case's operating point")
    s.add_argument("--load-scale", type=float, default=1.0, help="multiply demand and dispatch")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=20)
    t = sub.add_parser("train", parents=[parent], help="train a voltage predictor")
    t.add_argument("--method", help=f"one of {', '.join(SOLVER_METHODS[1:])}")
    t.add_argument("--data", help="dataset CSV written by gen")
    sub.add_parser("report", parents=[parent], help="run the configured experiments")
    return p


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "train": cmd_train, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, CaseFormatError, CaseValidationError, EmptySplit, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TooManyFailures as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    except (NonConvergence, SingularJacobian) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
