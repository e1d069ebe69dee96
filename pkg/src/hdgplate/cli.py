"""Command-line driver: mesh generation, single solves, convergence studies.

Numerical work is imported lazily so the HDG_THREADS environment variable
can cap the BLAS worker pool before numpy is loaded.  All outputs are
deterministic; wall-clock times go to the metadata sidecar only, so
re-running a study reproduces the CSV byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import asdict, dataclass

__all__ = ["RunConfig", "main"]

_EXIT_OK = 0
_EXIT_CONFIG = 1
_EXIT_SOLVER = 2


@dataclass(frozen=True)
class RunConfig:
    command: str
    mesh_kind: str = "tri"
    n: int = 8
    levels: tuple = ()
    k: int = 1
    l: int = -1
    t: float = 1.0
    E: float = 1.0
    nu: float = 0.3
    kappa: float = 5.0 / 6.0
    tol: float = 1e-10
    max_iter: int = 20000
    preconditioner: str = "direct"
    out: str | None = None
    seed: int = 0


def _apply_thread_cap() -> None:
    cap = os.environ.get("HDG_THREADS", "")
    if cap and cap != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdgplate",
        description="Hybrid DG solver for clamped Reissner-Mindlin plates "
                    "on the unit square")
    sub = parser.add_subparsers(dest="command", required=True)

    mesh_p = sub.add_parser("mesh", help="generate a structured mesh file")
    mesh_p.add_argument("--kind", choices=["tri", "quad"], default="tri")
    mesh_p.add_argument("--n", type=int, required=True)
    mesh_p.add_argument("--out", required=True)

    def common(p):
        p.add_argument("--mesh", choices=["tri", "quad"], default="tri")
        p.add_argument("--k", type=int, default=1)
        p.add_argument("--l", type=int, default=-1,
                       help="rotation trace degree (default: k)")
        p.add_argument("--t", type=float, default=1.0)
        p.add_argument("--E", type=float, default=1.0)
        p.add_argument("--nu", type=float, default=0.3)
        p.add_argument("--kappa", type=float, default=5.0 / 6.0)
        p.add_argument("--tol", type=float, default=1e-10)
        p.add_argument("--max-iter", type=int, default=20000)
        p.add_argument("--precond", choices=["none", "jacobi", "direct"],
                       default="direct")
        p.add_argument("--seed", type=int, default=0,
                       help="recorded in run metadata")

    solve_p = sub.add_parser("solve", help="solve one level, print errors")
    common(solve_p)
    solve_p.add_argument("--n", type=int, default=8)

    conv_p = sub.add_parser("convergence", help="run a mesh refinement study")
    common(conv_p)
    conv_p.add_argument("--levels", required=True,
                        help="comma-separated cells per side, e.g. 2,4,8,16")
    conv_p.add_argument("--out", required=True, help="CSV output path")

    return parser


def _materials(args):
    from .assembly import PlateMaterial, SpaceConfig
    from .solver import SolverConfig
    material = PlateMaterial(E=args.E, nu=args.nu, kappa=args.kappa, t=args.t)
    spaces = SpaceConfig(args.k, args.l)
    config = SolverConfig(tol=args.tol, max_iter=args.max_iter,
                          preconditioner=args.precond)
    return material, spaces, config


def _metadata(args, material, spaces, config, extra=None):
    meta = {
        "material": asdict(material),
        "k": spaces.k,
        "l": spaces.l,
        "solver": asdict(config),
        "quadrature": {
            "assembly_degree": 2 * spaces.k + 2,
            "edge_degree": 2 * spaces.k + 2,
            "source_degree": max(spaces.k + 8, 2 * spaces.k + 2),
            "error_degree": 26,
        },
        "seed": args.seed,
        "git_revision": _git_revision(),
    }
    if extra:
        meta.update(extra)
    return meta


def _cmd_mesh(args) -> int:
    from .mesh import generate_structured, save_mesh
    kind = {"tri": "triangle", "quad": "quadrilateral"}[args.kind]
    mesh = generate_structured(kind, args.n)
    with open(args.out, "w") as stream:
        save_mesh(mesh, stream)
    print(f"wrote {args.out}: {mesh.num_vertices} vertices, "
          f"{mesh.num_edges} edges, {mesh.num_elements} elements")
    return _EXIT_OK


def _cmd_solve(args) -> int:
    from .mesh import generate_structured
    from . import verification as vf
    material, spaces, config = _materials(args)
    kind = {"tri": "triangle", "quad": "quadrilateral"}[args.mesh]
    exact = vf.exact_fields(material)
    mesh = generate_structured(kind, args.n)
    fields = vf.solve_plate(mesh, spaces, material, exact, config=config)
    rep = fields.reports["step2"]
    if not all(r.converged for r in fields.reports.values()):
        print("solver failed to reach tolerance", file=sys.stderr)
        return _EXIT_SOLVER
    errs = vf.table_errors(fields, exact)
    print(f"n={args.n} iter={rep.iterations} "
          f"err_theta={errs[0]:.10e} err_tgamma={errs[1]:.10e} "
          f"err_sigma={errs[2]:.10e} err_omega={errs[3]:.10e}")
    return _EXIT_OK


def _cmd_convergence(args) -> int:
    from . import verification as vf
    material, spaces, config = _materials(args)
    try:
        levels = [int(s) for s in args.levels.split(",") if s]
    except ValueError:
        raise ValueError(f"bad --levels value {args.levels!r}") from None
    if not levels or any(n < 1 for n in levels):
        raise ValueError("--levels must list positive integers")

    table = vf.run_convergence(material, args.mesh, spaces, levels, config)
    with open(args.out, "w") as stream:
        table.write_csv(stream)

    meta = _metadata(args, material, spaces, config, extra={
        "mesh_kind": args.mesh,
        "levels": levels,
        "iterations": [r.iterations for r in table.reports],
        "wall_times": [r.wall_time for r in table.reports],
    })
    with open(args.out + ".meta.json", "w") as stream:
        json.dump(meta, stream, indent=2)
        stream.write("\n")
    print(f"wrote {args.out} ({len(levels)} levels) and {args.out}.meta.json")
    return _EXIT_OK


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; keep 2 for solver failures
        return _EXIT_OK if exc.code == 0 else _EXIT_CONFIG
    try:
        if args.command == "mesh":
            return _cmd_mesh(args)
        if args.command == "solve":
            return _cmd_solve(args)
        return _cmd_convergence(args)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except RuntimeError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return _EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
