"""Command-line entry point: generate instances, solve, compare configurations,
and re-run from a manifest."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .admm import BACKENDS, MODES, AdmmConfig, ConvergenceReport, run_admm
from .block1 import assemble_block1_qp, initial_state
from .model import (
    ParseError,
    UcInstance,
    ValidationError,
    dumps_instance,
    generate_synthetic,
    instance_to_dict,
    load_instance,
)
from .qp import dump_qp
from .solvers import DvqeConfig

log = logging.getLogger("ucqubo")

EXIT_OK, EXIT_USAGE, EXIT_MAXITER, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    instance: dict  # {"path": ...} or {"generate": {...}}
    config: dict
    out: str
    run_id: str
    version: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(**{k: data[k] for k in ("instance", "config", "out", "run_id", "version", "seed")})


def config_to_dict(cfg: AdmmConfig) -> dict:
    return {
        "rho": list(cfg.rho),
        "beta": list(cfg.beta),
        "eps_pri": cfg.eps_pri,
        "eps_dual": cfg.eps_dual,
        "max_iter": cfg.max_iter,
        "mode": cfg.mode,
        "batches": cfg.batches,
        "unit_coherent": cfg.unit_coherent,
        "backend": cfg.backend,
        "seed": cfg.seed,
        "dvqe": {
            "depth": cfg.dvqe.depth,
            "learning_rate": cfg.dvqe.learning_rate,
            "max_iters": cfg.dvqe.max_iters,
            "shots": cfg.dvqe.shots,
        },
        "compare_exact": cfg.compare_exact,
    }


def config_from_dict(d: dict) -> AdmmConfig:
    dv = d.get("dvqe", {})
    return AdmmConfig(
        rho=tuple(d["rho"]),
        beta=tuple(d["beta"]),
        eps_pri=d["eps_pri"],
        eps_dual=d["eps_dual"],
        max_iter=d["max_iter"],
        mode=d["mode"],
        batches=d["batches"],
        unit_coherent=d["unit_coherent"],
        backend=d["backend"],
        seed=d["seed"],
        dvqe=DvqeConfig(
            depth=dv.get("depth", 2),
            learning_rate=dv.get("learning_rate", 0.1),
            max_iters=dv.get("max_iters", 100),
            shots=dv.get("shots", 1024),
        ),
        compare_exact=d.get("compare_exact", False),
    )


def _run_id(inst: UcInstance, cfg_dict: dict) -> str:
    payload = json.dumps({"instance": instance_to_dict(inst), "config": cfg_dict}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# outputs


def dispatch_csv(inst: UcInstance, report: ConvergenceReport) -> str:
    """One row per (t, s): every unit's output, their sum and the net load."""
    N, T, S = inst.n_units, inst.horizon, inst.n_scenarios
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "s"] + [f"p_{i + 1}" for i in range(N)] + ["total", "net_load"])
    p = report.schedule.p
    L = np.asarray(inst.scenarios.net_load, float)
    for t in range(T):
        for s in range(S):
            col = p[:, t, s]
            w.writerow([t + 1, s + 1] + [f"{x:.6f}" for x in col] + [f"{col.sum():.6f}", f"{L[t, s]:.6f}"])
    return buf.getvalue()


def schedule_csv(inst: UcInstance, report: ConvergenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit", "t", "y", "u", "v"])
    sch = report.schedule
    for i in range(inst.n_units):
        for t in range(inst.horizon):
            w.writerow([i + 1, t + 1, int(sch.y[i, t]), int(sch.u[i, t]), int(sch.v[i, t])])
    return buf.getvalue()


def summary_text(report: ConvergenceReport, timings: bool = False) -> str:
    tr = report.trace
    lines = [
        f"status {report.status}",
        f"iterations {report.iterations}",
        f"cost {report.cost!r}",
        "residuals " + " ".join(repr(x) for x in report.residuals),
        f"dispatch_qp {report.dispatch_status}",
        f"max_violation {max(report.violations.values())!r}",
        f"lyapunov_increases {tr.lyapunov_increases()}",
        f"telegate_ops {sum(tr.telegate_ops)}",
    ]
    if timings:
        lines.append(f"wall_time_s {report.wall_time:.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument handling


def _positive_int(name):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def _positive_float(name):
    def conv(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}")
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{name} must be > 0, got {v}")
        return v
    return conv


def _add_instance_args(p, required: bool = False):
    p.add_argument("--units", type=_positive_int("--units"), default=5)
    p.add_argument("--horizon", type=_positive_int("--horizon"), default=6)
    p.add_argument("--scenarios", type=_positive_int("--scenarios"), default=1)
    p.add_argument("--seed", type=int, default=42)


def _add_solver_args(p):
    p.add_argument("--instance", type=Path, help="instance file; otherwise generate from --units/--horizon/--scenarios/--seed")
    p.add_argument("--batches", type=_positive_int("--batches"), default=3)
    p.add_argument("--unit-coherent", action="store_true")
    p.add_argument("--rho", type=_positive_float("--rho"), default=9e5)
    p.add_argument("--beta", type=_positive_float("--beta"), default=2e6)
    p.add_argument("--eps", type=_positive_float("--eps"), default=1e-3)
    p.add_argument("--max-iter", type=_positive_int("--max-iter"), default=4000)
    p.add_argument("--depth", type=_positive_int("--depth"), default=2)
    p.add_argument("--lr", type=_positive_float("--lr"), default=0.1)
    p.add_argument("--dvqe-iters", type=_positive_int("--dvqe-iters"), default=100)
    p.add_argument("--shots", type=_positive_int("--shots"), default=1024)
    p.add_argument("--timings", action="store_true", help="write wall-clock columns (breaks byte-identical reruns)")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ucqubo", description="Unit commitment by three-block ADMM with QUBO binary updates.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic instance file")
    _add_instance_args(g)
    g.add_argument("--out", type=Path, required=True, help="output file (or directory)")

    s = sub.add_parser("solve", help="run the ADMM solver")
    _add_instance_args(s)
    _add_solver_args(s)
    s.add_argument("--mode", choices=MODES, default="batched")
    s.add_argument("--backend", choices=BACKENDS, default="brute")
    s.add_argument("--exact-match", action="store_true", help="also solve Block 2 by brute force to score DVQE")
    s.add_argument("--dump-qp", type=Path, help="write the first Block-1 QP listing here")
    s.add_argument("--out", type=Path, required=True, help="output directory")

    c = sub.add_parser("compare", help="solve one instance under several configurations")
    _add_instance_args(c)
    _add_solver_args(c)
    c.add_argument("--mode", default="batched", help="comma-separated modes")
    c.add_argument("--backend", default="brute,dvqe", help="comma-separated backends")
    c.add_argument("--out", type=Path, required=True, help="output directory")

    r = sub.add_parser("rerun", help="reproduce a run from its manifest")
    r.add_argument("manifest", type=Path)
    r.add_argument("--out", type=Path, help="output directory (default: the manifest's)")
    r.add_argument("--timings", action="store_true")
    r.add_argument("--verbose", "-v", action="store_true")
    return ap


def _instance_from_args(args) -> tuple[UcInstance, dict]:
    if getattr(args, "instance", None) is not None:
        try:
            inst = load_instance(args.instance)
        except (ParseError, ValidationError, OSError) as exc:
            raise UsageError(f"cannot load {args.instance}: {exc}")
        return inst, {"path": str(Path(args.instance).resolve())}
    spec = {"units": args.units, "horizon": args.horizon, "scenarios": args.scenarios, "seed": args.seed}
    return generate_synthetic(args.units, args.horizon, args.scenarios, args.seed), {"generate": spec}


def _instance_from_manifest(entry: dict) -> UcInstance:
    if "path" in entry:
        try:
            return load_instance(entry["path"])
        except (ParseError, ValidationError, OSError) as exc:
            raise UsageError(f"cannot load {entry['path']}: {exc}")
    g = entry["generate"]
    return generate_synthetic(g["units"], g["horizon"], g["scenarios"], g["seed"])


def _config_from_args(args, mode: str, backend: str, compare_exact: bool = False) -> AdmmConfig:
    return AdmmConfig(
        rho=(args.rho,) * 3,
        beta=(args.beta,) * 3,
        eps_pri=args.eps,
        eps_dual=args.eps,
        max_iter=args.max_iter,
        mode=mode,
        batches=args.batches,
        unit_coherent=args.unit_coherent,
        backend=backend,
        seed=args.seed,
        dvqe=DvqeConfig(depth=args.depth, learning_rate=args.lr, max_iters=args.dvqe_iters, shots=args.shots),
        compare_exact=compare_exact,
    )


def _progress(verbose: bool):
    if not verbose:
        return None

    def cb(it, state, trace):
        if it == 1 or it % 50 == 0:
            print(f"iter {it}: pri {trace.pri_y[-1]:.3e} {trace.pri_u[-1]:.3e} {trace.pri_v[-1]:.3e} "
                  f"dual {trace.dual[-1]:.3e}", file=sys.stderr)
    return cb


def _check_config(inst: UcInstance, cfg: AdmmConfig):
    if cfg.mode == "batched":
        limit = inst.n_units if cfg.unit_coherent else inst.n_units * inst.horizon
        if cfg.batches > limit:
            raise UsageError(f"--batches {cfg.batches} exceeds the {limit} available "
                             f"{'units' if cfg.unit_coherent else 'unit-period pairs'}")


def execute_run(inst: UcInstance, inst_entry: dict, cfg: AdmmConfig, out: Path,
                timings: bool = False, verbose: bool = False, dump: Path | None = None) -> ConvergenceReport:
    """Solve and write trace.csv, dispatch.csv, schedule.csv, summary.txt and manifest.json."""
    _check_config(inst, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if dump is not None:
        dump_qp(assemble_block1_qp(inst, initial_state(inst, cfg.rho, cfg.beta)), dump)
    cfg_dict = config_to_dict(cfg)
    manifest = RunManifest(
        instance=inst_entry,
        config=cfg_dict,
        out=str(out.resolve()),
        run_id=_run_id(inst, cfg_dict),
        version=__version__,
        seed=cfg.seed,
    )
    report = run_admm(inst, cfg, callback=_progress(verbose))
    report.trace.to_csv(out / "trace.csv", timings=timings)
    (out / "dispatch.csv").write_text(dispatch_csv(inst, report))
    (out / "schedule.csv").write_text(schedule_csv(inst, report))
    (out / "summary.txt").write_text(summary_text(report, timings))
    (out / "manifest.json").write_text(manifest.to_json())
    return report


def _status_code(report: ConvergenceReport) -> int:
    return EXIT_OK if report.converged else EXIT_MAXITER


def cmd_gen(args) -> int:
    inst = generate_synthetic(args.units, args.horizon, args.scenarios, args.seed)
    out = Path(args.out)
    if out.is_dir():
        out = out / f"uc_n{args.units}_t{args.horizon}_s{args.scenarios}_seed{args.seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_instance(inst))
    print(out)
    return EXIT_OK


def cmd_solve(args) -> int:
    inst, entry = _instance_from_args(args)
    cfg = _config_from_args(args, args.mode, args.backend, compare_exact=args.exact_match)
    report = execute_run(inst, entry, cfg, Path(args.out), args.timings, args.verbose, args.dump_qp)
    sys.stdout.write(summary_text(report, args.timings))
    return _status_code(report)


def _split(text: str, allowed, flag: str) -> list[str]:
    items = [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in items if x not in allowed]
    if bad or not items:
        raise UsageError(f"{flag} accepts {', '.join(allowed)}; got {text!r}")
    return items


COMPARE_HEADER = ["config", "status", "iterations", "cost", "pri_y", "pri_u", "pri_v", "dual", "exact_match_rate"]


def cmd_compare(args) -> int:
    modes = _split(args.mode, MODES, "--mode")
    backends = _split(args.backend, BACKENDS, "--backend")
    configs = [(m, b) for m in modes for b in backends]
    if len(configs) < 2:
        raise UsageError("compare needs at least two configurations")
    inst, entry = _instance_from_args(args)
    out = Path(args.out)
    rows = []
    worst = EXIT_OK
    for mode, backend in configs:
        cfg = _config_from_args(args, mode, backend, compare_exact=(backend == "dvqe"))
        rep = execute_run(inst, entry, cfg, out / f"{mode}-{backend}", args.timings, args.verbose)
        match = [m for m in rep.trace.exact_match if not np.isnan(m)]
        rate = float(np.mean(match)) if match else (1.0 if backend == "brute" else float("nan"))
        row = [f"{mode}-{backend}", rep.status, rep.iterations, repr(rep.cost)]
        row += [repr(x) for x in rep.residuals] + [repr(rate)]
        if args.timings:
            row.append(f"{rep.wall_time:.3f}")
        rows.append(row)
        worst = max(worst, _status_code(rep))
    header = COMPARE_HEADER + (["wall_time_s"] if args.timings else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    (out / "comparison.csv").write_text(buf.getvalue())
    widths = [max(len(str(r[k])) for r in rows + [header]) for k in range(len(header))]
    for r in [header] + rows:
        print("  ".join(str(v).ljust(wd) for v, wd in zip(r, widths)))
    return worst


def cmd_rerun(args) -> int:
    try:
        manifest = RunManifest.from_json(Path(args.manifest).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}")
    inst = _instance_from_manifest(manifest.instance)
    cfg = config_from_dict(manifest.config)
    out = Path(args.out) if args.out is not None else Path(manifest.out)
    report = execute_run(inst, manifest.instance, cfg, out, args.timings, args.verbose)
    sys.stdout.write(summary_text(report, args.timings))
    return _status_code(report)


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "compare": cmd_compare, "rerun": cmd_rerun}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ucqubo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"ucqubo: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
