"""Command-line front end.

Exit status: 0 on success, 1 on invalid input, 2 when a solve does not
converge, a verification fails, or a value cloud comes back empty (the
artifacts are still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import JOBS_ENV, resolve_jobs
from .attainability import SampleOptions, backward_sample, cloud_sidecar, cloud_to_csv, forward_enrich
from .dynamics import bundle_to_csv, roll_bundle
from .errors import MFGError
from .master import (FieldOptions, build_field_from_solver, construct_from_field, field_from_json, field_to_json,
                     residual_table, residuals_to_csv)
from .model import GameModel, as_simplex, load_model, uniform
from .reformulation import Tolerances, verify_solution
from .relaxed import profile_from_csv, profile_to_csv, uniform_grid
from .solver import PICARD, SolveOptions, multi_start_solve, solve_picard

EXIT_OK, EXIT_INVALID, EXIT_UNSUCCESSFUL = 0, 1, 2
COMMANDS = ("solve", "verify", "attain", "master-build", "master-check", "trajectory")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    model_path: str
    t0: float = 0.0
    m0: list = field(default_factory=list)
    steps: int = 1000
    iters: int = 2000
    tol: float = 1e-4
    samples: int = 100_000
    starts: int = 1
    seed: int = 0
    mesh: float = 0.25
    nt: int = 5
    macro_k: int = 8
    tol_m: float = 5e-2
    tol_mu: float = 5e-2
    tol_z: float = 1e-3
    scheme: str = "fictitious-play"
    jobs: int = 1
    enrich: bool = False
    profile: str | None = None
    field: str | None = None
    mu0: list | None = None
    out: str | None = None
    profile_out: str | None = None
    trajectory_out: str | None = None

    def resolved(self) -> dict:
        return asdict(self)


def _parse_vector(text: str, name: str) -> list:
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of numbers, got {text!r}") from None


def validate_config(cfg: RunConfig, model: GameModel) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    if not 0.0 <= cfg.t0 < model.horizon_T:
        raise ConfigError(f"t0={cfg.t0} must satisfy 0 <= t0 < T={model.horizon_T}")
    if cfg.command not in ("master-build", "master-check") or cfg.m0:
        as_simplex(cfg.m0, model.d, "m0")
    if cfg.mu0 is not None:
        as_simplex(cfg.mu0, model.d, "mu0")
    for name in ("steps", "iters", "samples", "starts", "nt", "macro_k", "jobs"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be positive, got {getattr(cfg, name)}")
    if not 0.0 < cfg.mesh <= 0.25:
        raise ConfigError(f"--mesh must lie in (0, 1/4], got {cfg.mesh}")
    if abs(1.0 / cfg.mesh - round(1.0 / cfg.mesh)) > 1e-9:
        raise ConfigError(f"--mesh must be 1/n for an integer n, got {cfg.mesh}")
    if cfg.nt < 3 and cfg.command.startswith("master"):
        raise ConfigError("--nt must be at least 3")


# ---------------------------------------------------------------------------
# artifact writing


def _header(cfg: RunConfig, model: GameModel) -> dict:
    return {"tool": "mfg-fsolve", "version": __version__, "config": cfg.resolved(), "model": model.name}


def _write_json(path: str, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: str, text: str, header: dict, extra: dict | None = None) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="")
    _write_json(path + ".meta.json", {**header, **(extra or {})})


# ---------------------------------------------------------------------------
# commands


def _solve_options(cfg: RunConfig) -> SolveOptions:
    return SolveOptions(N=cfg.steps, max_iters=cfg.iters, tol_J=cfg.tol, seed=cfg.seed)


def cmd_solve(cfg, model, out):
    opts = _solve_options(cfg)
    if cfg.scheme == PICARD:
        reports = [solve_picard(model, cfg.t0, cfg.m0, opts)]
    else:
        reports = multi_start_solve(model, cfg.t0, cfg.m0, opts, starts=cfg.starts, jobs=cfg.jobs)
    best = next((r for r in reports if r.converged), reports[0])
    doc = {**_header(cfg, model), "converged": any(r.converged for r in reports),
           "reports": [r.to_dict() for r in reports]}
    if cfg.out:
        _write_json(cfg.out, doc)
    if cfg.profile_out:
        _write_csv(cfg.profile_out, profile_to_csv(best.profile, model.controls.labels), _header(cfg, model))
    if cfg.trajectory_out:
        _write_csv(cfg.trajectory_out, bundle_to_csv(best.bundle), _header(cfg, model))
    for r in reports:
        out.write(f"{r.scheme}: converged={r.converged} iterations={r.iterations} J={r.certificate.J:.3e} "
                  f"phi0={np.array2string(r.phi0, precision=6)}\n")
    return EXIT_OK if doc["converged"] else EXIT_UNSUCCESSFUL


def _load_profile(cfg, model):
    if not cfg.profile:
        raise ConfigError("--profile is required for this command")
    grid = uniform_grid(cfg.t0, model.horizon_T, cfg.steps)
    text = Path(cfg.profile).read_text(encoding="utf-8")
    return profile_from_csv(text, grid, model.controls.labels)


def cmd_verify(cfg, model, out):
    profile = _load_profile(cfg, model)
    mu0 = cfg.mu0 if cfg.mu0 is not None else uniform(model.d)
    bundle = roll_bundle(model, profile, cfg.t0, cfg.m0, mu0)
    cert = verify_solution(model, bundle, Tolerances(tol_J=cfg.tol))
    if cfg.out:
        _write_json(cfg.out, {**_header(cfg, model), "certificate": cert.to_dict()})
    out.write(f"verdict={cert.verdict} J={cert.J:.3e} support_violation={cert.support_violation:.3e}\n")
    return EXIT_OK if cert.certified else EXIT_UNSUCCESSFUL


def cmd_trajectory(cfg, model, out):
    mu0 = cfg.mu0 if cfg.mu0 is not None else uniform(model.d)
    if cfg.profile:
        bundle = roll_bundle(model, _load_profile(cfg, model), cfg.t0, cfg.m0, mu0)
    else:
        rep = multi_start_solve(model, cfg.t0, cfg.m0, _solve_options(cfg), starts=cfg.starts, jobs=cfg.jobs)[0]
        bundle = roll_bundle(model, rep.profile, cfg.t0, cfg.m0, mu0)
    text = bundle_to_csv(bundle)
    if cfg.out:
        _write_csv(cfg.out, text, _header(cfg, model))
    else:
        out.write(text)
    return EXIT_OK


def cmd_attain(cfg, model, out):
    opts = SampleOptions(samples=cfg.samples, macro_K=cfg.macro_k, seed=cfg.seed, tol_m=cfg.tol_m,
                         tol_mu=cfg.tol_mu, tol_z=cfg.tol_z)
    cloud = backward_sample(model, cfg.t0, cfg.m0, opts, jobs=cfg.jobs)
    if cfg.enrich:
        cloud = forward_enrich(model, cloud, _solve_options(cfg), starts=cfg.starts, jobs=cfg.jobs)
    if cfg.out:
        Path(cfg.out).write_text(cloud_to_csv(cloud), encoding="utf-8", newline="")
        sidecar = json.loads(cloud_sidecar(cloud))
        _write_json(cfg.out + ".meta.json", {**_header(cfg, model), **sidecar})
    out.write(f"accepted {len(cloud.points)} distinct points from {cloud.n_samples} samples "
              f"({cloud.n_valid} valid)\n")
    return EXIT_OK if cloud.points else EXIT_UNSUCCESSFUL


def cmd_master_build(cfg, model, out):
    opts = FieldOptions(Nt=cfg.nt, divisions=int(round(1.0 / cfg.mesh)), starts=cfg.starts, seed=cfg.seed,
                        N=cfg.steps, t_start=cfg.t0, max_iters=cfg.iters, tol_J=cfg.tol)
    fld = build_field_from_solver(model, opts, jobs=cfg.jobs)
    if cfg.out:
        doc = json.loads(field_to_json(fld))
        _write_json(cfg.out, {**_header(cfg, model), "field": doc})
    out.write(f"field: {fld.values.shape[0]} time nodes x {fld.values.shape[1]} simplex nodes, "
              f"{int(fld.multivalued.sum())} multivalued, {int(fld.unsolved.sum())} unsolved\n")
    return EXIT_OK


def cmd_master_check(cfg, model, out):
    if not cfg.field:
        raise ConfigError("--field is required for master-check")
    doc = json.loads(Path(cfg.field).read_text(encoding="utf-8"))
    fld = field_from_json(json.dumps(doc.get("field", doc)))
    rows = residual_table(model, fld)
    good = [r for _, _, r, f in rows if not f]
    summary = {"max_residual": max(good) if good else None, "flagged": sum(1 for *_, f in rows if f)}
    if cfg.out:
        _write_csv(cfg.out, residuals_to_csv(rows), _header(cfg, model), summary)
    out.write(f"max interior residual {summary['max_residual']} ({summary['flagged']} flagged nodes)\n")
    status = EXIT_OK
    if cfg.m0:
        rep = construct_from_field(model, fld, cfg.t0, cfg.m0)
        if cfg.trajectory_out:
            _write_csv(cfg.trajectory_out, bundle_to_csv(rep.bundle), _header(cfg, model),
                       {"certificate": rep.certificate.to_dict()})
        out.write(f"constructed trajectory: verdict={rep.certificate.verdict} J={rep.certificate.J:.3e}\n")
        status = EXIT_OK if rep.converged else EXIT_UNSUCCESSFUL
    return status


HANDLERS = {"solve": cmd_solve, "verify": cmd_verify, "attain": cmd_attain, "master-build": cmd_master_build,
            "master-check": cmd_master_check, "trajectory": cmd_trajectory}


def run(cfg: RunConfig, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        model = load_model(cfg.model_path)
        validate_config(cfg, model)
        return HANDLERS[cfg.command](cfg, model, out)
    except (MFGError, ValueError, OSError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_INVALID


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfg-fsolve", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--model", required=True, help="model JSON file or builtin:<name>")
        s.add_argument("--t0", type=float, default=0.0)
        s.add_argument("--m0", default=None, help="initial distribution, e.g. 1,0")
        s.add_argument("--mu0", default=None, help="initial law of the representative player (default uniform)")
        s.add_argument("--steps", type=int, default=1000)
        s.add_argument("--iters", type=int, default=2000)
        s.add_argument("--tol", type=float, default=1e-4)
        s.add_argument("--samples", type=int, default=100_000)
        s.add_argument("--starts", type=int, default=1)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--mesh", type=float, default=0.25)
        s.add_argument("--nt", type=int, default=5)
        s.add_argument("--macro-k", type=int, default=8)
        s.add_argument("--tol-m", type=float, default=5e-2)
        s.add_argument("--tol-mu", type=float, default=5e-2)
        s.add_argument("--tol-z", type=float, default=1e-3)
        s.add_argument("--scheme", choices=["fictitious-play", "picard"], default="fictitious-play")
        s.add_argument("--jobs", type=int, default=None, help=f"worker processes (fallback: ${JOBS_ENV}, then 1)")
        s.add_argument("--enrich", action="store_true", help="attain: add certified multi-start solutions")
        s.add_argument("--profile", default=None, help="strategy profile CSV")
        s.add_argument("--field", default=None, help="master field JSON")
        s.add_argument("--out", default=None)
        s.add_argument("--profile-out", default=None)
        s.add_argument("--trajectory-out", default=None)
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    return RunConfig(
        command=ns.command, model_path=ns.model, t0=ns.t0,
        m0=_parse_vector(ns.m0, "--m0") if ns.m0 else [],
        mu0=_parse_vector(ns.mu0, "--mu0") if ns.mu0 else None,
        steps=ns.steps, iters=ns.iters, tol=ns.tol, samples=ns.samples, starts=ns.starts, seed=ns.seed,
        mesh=ns.mesh, nt=ns.nt, macro_k=ns.macro_k, tol_m=ns.tol_m, tol_mu=ns.tol_mu, tol_z=ns.tol_z,
        scheme=ns.scheme, jobs=resolve_jobs(ns.jobs), enrich=ns.enrich, profile=ns.profile, field=ns.field, out=ns.out,
        profile_out=ns.profile_out, trajectory_out=ns.trajectory_out)


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; here that means invalid input
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        cfg = config_from_args(ns)
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
