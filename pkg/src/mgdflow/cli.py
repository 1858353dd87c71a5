"""Command-line entry point: config parsing, run orchestration, CSV/VTK output.

Configs are line-oriented ``key = value`` files with ``[section]`` headers
and ``#`` comments; ``--set section.key=value`` flags override file values.
Exit codes: 0 success, 1 setup/config error, 2 run completed but a solve
failed to converge.
"""

import argparse
import configparser
import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench, diagnostics, fem, mesh as meshmod, stepper


class ConfigError(Exception):
    def __init__(self, key, reason):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")


@dataclass
class Config:
    problem: str = "taylor_green"
    scheme: str = "modular"
    gamma: float = None
    beta: float = None
    re: float = None
    nu: float = None
    dt: float = None
    t_final: float = None
    m: int = None
    h: float = None
    mesh: str = None
    omega: float = 1.0
    tau: float = None
    solver_type: str = "gmres"
    solver_tol: float = 1e-8
    solver_restart: int = 200
    solver_max_iters: int = 2000
    out_dir: str = "out"
    field_stride: int = 0
    m_list: tuple = (16, 24, 32)
    gammas: tuple = (0.0, 0.2, 2.0, 20.0, 200.0, 2000.0, 20000.0)
    betas: tuple = (0.0,)
    schemes: tuple = ("monolithic", "modular")


_SCHEMA = {
    ("problem", "kind"): ("problem", str),
    ("problem", "scheme"): ("scheme", str),
    ("problem", "gamma"): ("gamma", float),
    ("problem", "beta"): ("beta", float),
    ("problem", "re"): ("re", float),
    ("problem", "nu"): ("nu", float),
    ("problem", "dt"): ("dt", float),
    ("problem", "t_final"): ("t_final", float),
    ("problem", "m"): ("m", int),
    ("problem", "h"): ("h", float),
    ("problem", "mesh"): ("mesh", str),
    ("problem", "omega"): ("omega", float),
    ("problem", "tau"): ("tau", float),
    ("solver", "type"): ("solver_type", str),
    ("solver", "tol"): ("solver_tol", float),
    ("solver", "restart"): ("solver_restart", int),
    ("solver", "max_iters"): ("solver_max_iters", int),
    ("output", "directory"): ("out_dir", str),
    ("output", "field_stride"): ("field_stride", int),
    ("convergence", "m_list"): ("m_list", "int_list"),
    ("sweep", "gammas"): ("gammas", "float_list"),
    ("sweep", "betas"): ("betas", "float_list"),
    ("sweep", "schemes"): ("schemes", "str_list"),
}


def _convert(key, raw, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "int_list":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind == "float_list":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "str_list":
            return tuple(v for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}")


def parse_config(path=None, overrides=()):
    """Read and validate a Config; unknown keys are rejected, flags win."""
    cfg = Config()
    items = []
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as e:
            raise ConfigError(str(path), f"cannot read config: {e}")
        except configparser.Error as e:
            raise ConfigError(str(path), f"malformed config: {e}")
        for section in parser.sections():
            for option, raw in parser.items(section):
                items.append((section, option, raw))
    for entry in overrides:
        if "=" not in entry:
            raise ConfigError(entry, "override must look like [section.]key=value")
        key, raw = entry.split("=", 1)
        key = key.strip()
        if "." in key:
            section, option = key.split(".", 1)
        else:
            hits = [sec_opt for sec_opt in _SCHEMA if sec_opt[1] == key]
            if len(hits) != 1:
                raise ConfigError(key, "unknown or ambiguous override key")
            section, option = hits[0]
        items.append((section.strip(), option.strip(), raw.strip()))

    for section, option, raw in items:
        spec = _SCHEMA.get((section, option))
        if spec is None:
            raise ConfigError(f"{section}.{option}", "unknown configuration key")
        attr, kind = spec
        setattr(cfg, attr, _convert(f"{section}.{option}", raw, kind))

    _apply_defaults(cfg)
    _validate(cfg)
    return cfg


def _apply_defaults(cfg):
    if cfg.problem == "taylor_green":
        if cfg.m is None and cfg.mesh is None:
            cfg.m = 16
        cfg.gamma = 1.0 if cfg.gamma is None else cfg.gamma
        cfg.beta = 0.2 if cfg.beta is None else cfg.beta
        cfg.re = 100.0 if cfg.re is None and cfg.nu is None else cfg.re
        cfg.tau = 100.0 if cfg.tau is None else cfg.tau
        cfg.t_final = 1.0 if cfg.t_final is None else cfg.t_final
        if cfg.dt is None and cfg.m is not None:
            cfg.dt = 1.0 / cfg.m
    elif cfg.problem == "step_channel":
        cfg.h = 0.5 if cfg.h is None and cfg.mesh is None else cfg.h
        cfg.gamma = 1.0 if cfg.gamma is None else cfg.gamma
        cfg.beta = 0.0 if cfg.beta is None else cfg.beta
        cfg.nu = 1.0 / 600.0 if cfg.nu is None and cfg.re is None else cfg.nu
        cfg.t_final = 40.0 if cfg.t_final is None else cfg.t_final
        cfg.dt = 0.01 if cfg.dt is None else cfg.dt
    elif cfg.problem == "cylinder":
        cfg.nu = 0.001 if cfg.nu is None and cfg.re is None else cfg.nu
        cfg.gamma = 5.0 * cfg.nu if cfg.gamma is None and cfg.nu else cfg.gamma
        cfg.beta = 0.0 if cfg.beta is None else cfg.beta
        cfg.t_final = 8.0 if cfg.t_final is None else cfg.t_final
        cfg.dt = 0.001 if cfg.dt is None else cfg.dt
    elif cfg.problem == "custom":
        cfg.gamma = 0.0 if cfg.gamma is None else cfg.gamma
        cfg.beta = 0.0 if cfg.beta is None else cfg.beta
    else:
        raise ConfigError("problem.kind", f"unknown problem {cfg.problem!r}")
    if cfg.nu is None and cfg.re is not None:
        cfg.nu = 1.0 / cfg.re
    if cfg.re is None and cfg.nu is not None:
        cfg.re = 1.0 / cfg.nu


def _validate(cfg):
    if cfg.m is not None and cfg.mesh is not None:
        raise ConfigError("problem.m", "ambiguous mesh source: both m and mesh given")
    if cfg.problem == "taylor_green" and cfg.m is not None and cfg.m < 1:
        raise ConfigError("problem.m", "m must be a positive integer")
    if cfg.dt is not None and cfg.dt <= 0:
        raise ConfigError("problem.dt", "dt must be positive")
    if cfg.t_final is not None and cfg.t_final <= 0:
        raise ConfigError("problem.t_final", "t_final must be positive")
    if cfg.nu is not None and cfg.nu <= 0:
        raise ConfigError("problem.nu", "viscosity must be positive")
    if cfg.gamma is not None and cfg.gamma < 0:
        raise ConfigError("problem.gamma", "gamma must be nonnegative")
    if cfg.beta is not None and cfg.beta < 0:
        raise ConfigError("problem.beta", "beta must be nonnegative")
    if cfg.scheme not in ("plain", "monolithic", "modular"):
        raise ConfigError("problem.scheme", f"unknown scheme {cfg.scheme!r}")
    if cfg.solver_type not in ("gmres", "direct"):
        raise ConfigError("solver.type", f"unknown solver {cfg.solver_type!r}")


def solver_options(cfg):
    return stepper.SolverOptions(
        kind=cfg.solver_type,
        tol=cfg.solver_tol,
        restart=cfg.solver_restart,
        max_iters=cfg.solver_max_iters,
    )


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def write_csv(table, path):
    """Write (header, rows) as RFC-4180 CSV with 17-significant-digit floats."""
    header, rows = table
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    return rows[0], rows[1:]


def write_vtk(mesh, fields, path):
    """Legacy VTK 2.0 ASCII unstructured grid.

    fields may carry "velocity" (vector dof array; vertex values are
    exported), "pressure" (per vertex) and "divergence" (per cell).
    """
    v = mesh.vertices
    t = mesh.triangles
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\nmgdflow fields\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write("POINTS %d double\n" % len(v))
        for x, y in v:
            f.write("%.17g %.17g 0\n" % (x, y))
        f.write("CELLS %d %d\n" % (len(t), 4 * len(t)))
        for a, b, c in t:
            f.write("3 %d %d %d\n" % (a, b, c))
        f.write("CELL_TYPES %d\n" % len(t))
        f.write("5\n" * len(t))
        point_fields = {k: fields[k] for k in ("velocity", "pressure") if k in fields}
        if point_fields:
            f.write("POINT_DATA %d\n" % len(v))
            if "velocity" in point_fields:
                u = point_fields["velocity"]
                ns = len(u) // 2
                f.write("VECTORS velocity double\n")
                for i in range(len(v)):
                    f.write("%.17g %.17g 0\n" % (u[i], u[ns + i]))
            if "pressure" in point_fields:
                f.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
                for val in point_fields["pressure"]:
                    f.write("%.17g\n" % val)
        if "divergence" in fields:
            f.write("CELL_DATA %d\n" % len(t))
            f.write("SCALARS divergence double 1\nLOOKUP_TABLE default\n")
            for val in fields["divergence"]:
                f.write("%.17g\n" % val)


def cell_divergence(dofmap, u):
    """Pointwise div u_h at cell centroids (it is linear per cell)."""
    t = fem.tables(dofmap, 1)
    ns = dofmap.n_scalar
    td = dofmap.tri_dofs
    gx = np.einsum("tk,tqk->tq", u[:ns][td], t.g2[..., 0])
    gy = np.einsum("tk,tqk->tq", u[ns:][td], t.g2[..., 1])
    return (gx + gy)[:, 0]


LEDGER_COLUMNS = (
    "n", "t", "norm_u", "div_u", "div_uhat", "grad_uhat",
    "energy_residual", "s1_iters", "s1_converged", "s2_residual",
)

ERROR_COLUMNS = ("n", "t", "e_u_l2", "e_div", "e_grad", "e_p")

FORCE_COLUMNS = ("n", "t", "fx", "fy", "cd", "cl", "dp")


def write_ledger(result, out_dir):
    out = Path(out_dir)
    ledger = result.ledger
    rows = [[getattr(r, c) for c in LEDGER_COLUMNS] for r in ledger.records]
    write_csv((list(LEDGER_COLUMNS), rows), out / "ledger.csv")
    if result.setup.exact is not None:
        rows = [[getattr(r, c) for c in ERROR_COLUMNS] for r in ledger.records]
        write_csv((list(ERROR_COLUMNS), rows), out / "errors.csv")
    if result.setup.force_tag is not None:
        coeffs = diagnostics.force_coefficients(ledger)
        rows = [
            [r.n, r.t, r.fx, r.fy, cd, cl, r.dp]
            for r, cd, cl in zip(ledger.records, coeffs.cd, coeffs.cl)
        ]
        write_csv((list(FORCE_COLUMNS), rows), out / "forces.csv")


def write_summary(result, out_dir):
    setup = result.setup
    header = [
        "scheme", "gamma", "beta", "nu", "dt", "t_final", "dofs",
        "failed", "first_fail_step", "wall_time", "mean_s1_iters", "max_s1_iters",
        "sup_norm_u", "l2_div_u",
    ]
    row = [
        setup.scheme, setup.params.gamma, setup.params.beta, setup.nu,
        setup.dt, setup.t_final,
        result.disc.n_vel + result.disc.n_p,
        result.failed, result.first_fail_step, result.wall_time,
        result.mean_s1_iters, result.max_s1_iters,
        result.aggregate("norm_u")["sup"], result.aggregate("div_u")["l2"],
    ]
    if setup.exact is not None:
        header += ["sup_e_u", "sup_e_div", "l2_e_div", "l2_e_p"]
        row += [
            result.aggregate("e_u_l2")["sup"],
            result.aggregate("e_div")["sup"],
            result.aggregate("e_div")["l2"],
            result.aggregate("e_p")["l2"],
        ]
    write_csv((header, [row]), Path(out_dir) / "summary.csv")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _build_run(cfg):
    so = solver_options(cfg)
    if cfg.problem == "taylor_green":
        spec = bench.TaylorGreenSpec(omega=cfg.omega, tau=cfg.tau, re=cfg.re)
        return bench.taylor_green_setup(
            spec, cfg.m, gamma=cfg.gamma, beta=cfg.beta, scheme=cfg.scheme,
            t_final=cfg.t_final, dt=cfg.dt, solver=so,
        )
    if cfg.problem == "step_channel":
        if cfg.mesh is not None:
            mesh = meshmod.read_msh(cfg.mesh)
            _, setup = bench.step_channel_setup(
                cfg.gamma, cfg.beta, cfg.scheme, t_final=cfg.t_final,
                dt=cfg.dt, nu=cfg.nu, solver=so,
            )
            return mesh, setup
        return bench.step_channel_setup(
            cfg.gamma, cfg.beta, cfg.scheme, h=cfg.h, t_final=cfg.t_final,
            dt=cfg.dt, nu=cfg.nu, solver=so,
        )
    if cfg.problem == "cylinder":
        mesh = meshmod.read_msh(cfg.mesh) if cfg.mesh else None
        return bench.cylinder_setup(
            cfg.scheme, mesh=mesh, gamma=cfg.gamma, beta=cfg.beta,
            t_final=cfg.t_final, dt=cfg.dt, nu=cfg.nu, solver=so,
        )
    if cfg.problem == "custom":
        if cfg.mesh is None:
            raise ConfigError("problem.mesh", "custom problems need a mesh file")
        mesh = meshmod.read_msh(cfg.mesh)
        zero = lambda x, y, t: (np.zeros_like(np.asarray(x, float)),) * 2
        setup = stepper.ProblemSetup(
            nu=cfg.nu, dt=cfg.dt, t_final=cfg.t_final, scheme=cfg.scheme,
            params=stepper.StabilizationParams(cfg.gamma, cfg.beta),
            dirichlet={name: zero for name in mesh.tags.values()},
            solver=so,
        )
        return mesh, setup
    raise ConfigError("problem.kind", f"unknown problem {cfg.problem!r}")


def cmd_run(cfg):
    mesh, setup = _build_run(cfg)
    out = Path(cfg.out_dir)
    if cfg.field_stride:
        out.mkdir(parents=True, exist_ok=True)
        setup.field_stride = cfg.field_stride

        def writer(disc, state):
            fields = {
                "velocity": state.u_curr,
                "pressure": state.p_curr,
                "divergence": cell_divergence(disc.dofmap, state.u_curr),
            }
            write_vtk(disc.mesh, fields, out / ("fields_%04d.vtk" % state.n))

        setup.field_writer = writer
    result = stepper.run_simulation(mesh, setup)
    out.mkdir(parents=True, exist_ok=True)
    write_ledger(result, out)
    write_summary(result, out)
    return 2 if result.failed else 0


def cmd_convergence(cfg):
    so = solver_options(cfg)
    spec = bench.TaylorGreenSpec(omega=cfg.omega, tau=cfg.tau, re=cfg.re)
    table = bench.taylor_green_convergence(
        list(cfg.m_list), gamma=cfg.gamma, beta=cfg.beta, scheme=cfg.scheme,
        spec=spec, solver=so,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["m"]
    for name in bench.RateTable.NORMS:
        header += [name, name + "_rate"]
    rows = []
    for i, m in enumerate(table.m):
        row = [m]
        for name in bench.RateTable.NORMS:
            row.append(table.errors[name][i])
            row.append(math.nan if i == 0 else table.rates[name][i - 1])
        rows.append(row)
    write_csv((header, rows), out / "rate_table.csv")
    return 2 if any(table.failed) else 0


def cmd_sweep(cfg):
    so = solver_options(cfg)
    entries = [
        (scheme, gamma, beta)
        for scheme in cfg.schemes
        for beta in cfg.betas
        for gamma in cfg.gammas
    ]
    result = bench.timing_sweep(entries, m=cfg.m or 32, solver=so)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["scheme", "gamma", "beta", "wall_time", "failed",
              "first_fail_step", "mean_iters", "max_iters"]
    rows = [[r[k] for k in header] for r in result.rows]
    write_csv((header, rows), out / "sweep.csv")
    return 0


def cmd_check(cfg):
    """Standalone verification of the energy identity and the stability bound."""
    so = solver_options(cfg)
    spec = bench.TaylorGreenSpec()
    mesh, setup = bench.taylor_green_setup(spec, m=16, solver=so)
    result = stepper.run_simulation(mesh, setup)
    worst = max(r.energy_residual for r in result.ledger.records)
    ok1 = worst <= 1e-9 and not result.failed
    print("energy identity: max residual %.3e -> %s" % (worst, "PASS" if ok1 else "FAIL"))

    decay = bench.TaylorGreenSpec(omega=2.0, tau=100.0, re=100.0)
    mesh2, setup2 = bench.taylor_green_setup(
        decay, m=16, solver=stepper.SolverOptions(kind="direct")
    )
    zero = lambda x, y, t: (np.zeros_like(np.asarray(x, float)),) * 2
    setup2.dirichlet = {"wall": zero}
    setup2.exact = None
    setup2.body_force = None
    result2 = stepper.run_simulation(mesh2, setup2)
    budget = diagnostics.stability_budget(
        result2.ledger, result2.disc.M, result2.disc.G, setup2.nu,
        setup2.params.gamma, setup2.params.beta,
        result2.u0, result2.u1, result2.u_final_prev, result2.u_final,
    )
    ok2 = budget["satisfied"]
    print(
        "stability bound: lhs %.6e <= rhs %.6e -> %s"
        % (budget["lhs"], budget["rhs"], "PASS" if ok2 else "FAIL")
    )
    return 0 if (ok1 and ok2) else 2


def main(argv=None):
    parser = argparse.ArgumentParser(prog="mgdflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "convergence", "sweep", "check"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file path")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.out:
            cfg.out_dir = args.out
        handler = {
            "run": cmd_run,
            "convergence": cmd_convergence,
            "sweep": cmd_sweep,
            "check": cmd_check,
        }[args.command]
        return handler(cfg)
    except (ConfigError, meshmod.MeshError, stepper.MissingBoundaryData) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
