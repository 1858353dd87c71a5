"""Benchmark problems and studies.

Taylor-Green convergence/efficiency/pressure-robustness studies, channel
flow over a step, and channel flow past a cylinder, each driving the time
steppers at desk scale.  Studies return plain result tables; CSV/VTK
serialization lives in the CLI.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import diagnostics, mesh as meshmod, stepper


class NonPositiveError(Exception):
    pass


# ---------------------------------------------------------------------------
# Taylor-Green vortex
# ---------------------------------------------------------------------------


@dataclass
class TaylorGreenSpec:
    """Decaying vortex on the unit square with a closed-form forcing.

    The velocity decays like exp(-2 w^2 pi^2 t / tau) while the viscosity is
    1/Re; the body force 2 w^2 pi^2 (nu - 1/tau) u makes the pair an exact
    solution for any (tau, Re).  When tau == Re the force vanishes
    identically and the vortex is a homogeneous decay.
    """

    omega: float = 1.0
    tau: float = 100.0
    re: float = 100.0

    @property
    def nu(self):
        return 1.0 / self.re

    def _decay(self, t):
        w = self.omega
        return np.exp(-2.0 * w**2 * math.pi**2 * np.asarray(t) / self.tau)

    def velocity(self, x, y, t):
        k = self.omega * math.pi
        e = self._decay(t)
        return (-np.cos(k * x) * np.sin(k * y) * e, np.sin(k * x) * np.cos(k * y) * e)

    def pressure(self, x, y, t):
        k = self.omega * math.pi
        e2 = self._decay(t) ** 2
        return -0.25 * (np.cos(2 * k * x) + np.cos(2 * k * y)) * e2

    def velocity_grad(self, x, y, t):
        k = self.omega * math.pi
        e = self._decay(t)
        dxu = k * np.sin(k * x) * np.sin(k * y) * e
        dyu = -k * np.cos(k * x) * np.cos(k * y) * e
        dxv = k * np.cos(k * x) * np.cos(k * y) * e
        dyv = -k * np.sin(k * x) * np.sin(k * y) * e
        return dxu, dyu, dxv, dyv

    def forcing(self, x, y, t):
        c = 2.0 * self.omega**2 * math.pi**2 * (self.nu - 1.0 / self.tau)
        ux, uy = self.velocity(x, y, t)
        return c * ux, c * uy

    @property
    def forcing_is_zero(self):
        return abs(self.nu - 1.0 / self.tau) == 0.0

    def strong_residual(self, x, y, t):
        """Momentum residual of the exact fields with the closed-form forcing.

        Every derivative is evaluated from its own analytic formula, so this
        is an independent check of the forcing before any run uses it.
        """
        k = self.omega * math.pi
        e = self._decay(t)
        ux, uy = self.velocity(x, y, t)
        dux = -(2.0 * k**2 / self.tau) * np.asarray(ux)
        duy = -(2.0 * k**2 / self.tau) * np.asarray(uy)
        dxu, dyu, dxv, dyv = self.velocity_grad(x, y, t)
        lap_x = -2.0 * k**2 * np.asarray(ux)
        lap_y = -2.0 * k**2 * np.asarray(uy)
        e2 = e * e
        dp_x = 0.5 * k * np.sin(2 * k * x) * e2
        dp_y = 0.5 * k * np.sin(2 * k * y) * e2
        fx, fy = self.forcing(x, y, t)
        rx = dux + ux * dxu + uy * dyu - self.nu * lap_x + dp_x - fx
        ry = duy + ux * dxv + uy * dyv - self.nu * lap_y + dp_y - fy
        return rx, ry


def taylor_green_setup(spec, m, gamma=1.0, beta=0.2, scheme="modular",
                       t_final=1.0, dt=None, solver=None, **kwargs):
    """Mesh and problem setup for a Taylor-Green run with dt = 1/m default."""
    mesh = meshmod.generate_unit_square(m)
    exact = stepper.ExactSolution(
        velocity=spec.velocity, pressure=spec.pressure, velocity_grad=spec.velocity_grad
    )
    setup = stepper.ProblemSetup(
        nu=spec.nu,
        dt=dt if dt is not None else 1.0 / m,
        t_final=t_final,
        scheme=scheme,
        params=stepper.StabilizationParams(gamma=gamma, beta=beta),
        dirichlet={"wall": spec.velocity},
        initial=lambda x, y: spec.velocity(x, y, 0.0),
        body_force=None if spec.forcing_is_zero else spec.forcing,
        exact=exact,
        solver=solver or stepper.SolverOptions(),
        **kwargs,
    )
    return mesh, setup


# ---------------------------------------------------------------------------
# rate fitting and the convergence study
# ---------------------------------------------------------------------------


def fit_rate(errors, resolutions):
    """Pairwise rates log(e_{i-1}/e_i) / log(m_i/m_{i-1})."""
    errors = np.asarray(errors, dtype=float)
    res = np.asarray(resolutions, dtype=float)
    if np.any(errors <= 0):
        raise NonPositiveError("rate fitting needs positive errors")
    return np.array(
        [
            math.log(errors[i - 1] / errors[i]) / math.log(res[i] / res[i - 1])
            for i in range(1, len(errors))
        ]
    )


@dataclass
class RateTable:
    m: list
    errors: dict  # norm name -> list of errors
    rates: dict  # norm name -> list of pairwise rates
    failed: list  # per-row failure flags

    NORMS = ("sup_e_u", "sup_e_div", "l2_e_div", "l2_e_p")


def taylor_green_convergence(m_list, gamma=1.0, beta=0.2, scheme="modular",
                             spec=None, solver=None, t_final=1.0):
    """Errors and fitted rates over a list of m (dt = 1/m, h ~ 1/m)."""
    if list(m_list) != sorted(m_list):
        raise ValueError("m_list must be ascending")
    spec = spec or TaylorGreenSpec()
    errors = {k: [] for k in RateTable.NORMS}
    failed = []
    for m in m_list:
        mesh, setup = taylor_green_setup(
            spec, m, gamma=gamma, beta=beta, scheme=scheme, solver=solver,
            t_final=t_final,
        )
        result = stepper.run_simulation(mesh, setup)
        failed.append(result.failed)
        errors["sup_e_u"].append(result.aggregate("e_u_l2")["sup"])
        errors["sup_e_div"].append(result.aggregate("e_div")["sup"])
        errors["l2_e_div"].append(result.aggregate("e_div")["l2"])
        errors["l2_e_p"].append(result.aggregate("e_p")["l2"])
    rates = {}
    for k, v in errors.items():
        try:
            rates[k] = list(fit_rate(v, m_list))
        except NonPositiveError:
            rates[k] = [math.nan] * (len(m_list) - 1)
    return RateTable(m=list(m_list), errors=errors, rates=rates, failed=failed)


# ---------------------------------------------------------------------------
# timing / solver-breakdown sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list  # dicts: scheme, gamma, beta, wall_time, failed, iteration stats


def timing_sweep(entries, m=32, spec=None, solver=None, t_final=1.0):
    """Run (scheme, gamma, beta) combinations and record time/failure/iterations.

    Failures are data, not errors: a run whose momentum solve never converges
    is recorded with failed=True and the step index of first failure.
    """
    spec = spec or TaylorGreenSpec()
    rows = []
    for scheme, gamma, beta in entries:
        mesh, setup = taylor_green_setup(
            spec, m, gamma=gamma, beta=beta, scheme=scheme, solver=solver,
            t_final=t_final,
        )
        result = stepper.run_simulation(mesh, setup)
        rows.append(
            {
                "scheme": scheme,
                "gamma": gamma,
                "beta": beta,
                "wall_time": result.wall_time,
                "failed": result.failed,
                "first_fail_step": result.first_fail_step,
                "mean_iters": result.mean_s1_iters,
                "max_iters": result.max_s1_iters,
            }
        )
    return SweepResult(rows=rows)


def re_robustness(re_list, m=32, gamma=1.0, beta=0.2, tau=100.0,
                  schemes=("plain", "monolithic", "modular"), solver=None):
    """Velocity/pressure error comparison across Reynolds numbers.

    tau stays fixed while Re varies, so the runs use the closed-form forcing
    that keeps the vortex exact for every Re.
    """
    rows = []
    for re in re_list:
        spec = TaylorGreenSpec(tau=tau, re=re)
        for scheme in schemes:
            mesh, setup = taylor_green_setup(
                spec, m, gamma=gamma, beta=beta, scheme=scheme, solver=solver
            )
            result = stepper.run_simulation(mesh, setup)
            rows.append(
                {
                    "re": re,
                    "scheme": scheme,
                    "failed": result.failed,
                    "sup_e_u": result.aggregate("e_u_l2")["sup"],
                    "l2_e_div": result.aggregate("e_div")["l2"],
                    "l2_e_grad": result.aggregate("e_grad")["l2"],
                    "l2_e_p": result.aggregate("e_p")["l2"],
                }
            )
    return rows


# ---------------------------------------------------------------------------
# step channel
# ---------------------------------------------------------------------------

STEP_RECTS = ((0.0, 0.0, 5.0, 10.0), (5.0, 1.0, 6.0, 10.0), (6.0, 0.0, 40.0, 10.0))


def step_channel_mesh(h=0.5):
    return meshmod.generate_rect_union(list(STEP_RECTS), h)


def step_inflow(x, y, t):
    return y * (10.0 - y) / 25.0, np.zeros_like(np.asarray(y, dtype=float))


def step_channel_setup(gamma, beta, scheme, h=0.5, t_final=40.0, dt=0.01,
                       nu=1.0 / 600.0, solver=None, inflow=step_inflow):
    mesh = step_channel_mesh(h)
    zero = lambda x, y, t: (np.zeros_like(np.asarray(x, dtype=float)),) * 2
    setup = stepper.ProblemSetup(
        nu=nu,
        dt=dt,
        t_final=t_final,
        scheme=scheme,
        params=stepper.StabilizationParams(gamma=gamma, beta=beta),
        dirichlet={"inlet": inflow, "outlet": inflow, "wall": zero},
        solver=solver or stepper.SolverOptions(precond="lagged_lu"),
    )
    return mesh, setup


def step_channel_run(gamma, beta, scheme, **kwargs):
    """Full step-channel run; the ledger carries the ||div u|| time series."""
    mesh, setup = step_channel_setup(gamma, beta, scheme, **kwargs)
    return stepper.run_simulation(mesh, setup)


# ---------------------------------------------------------------------------
# cylinder benchmark
# ---------------------------------------------------------------------------

CYL_CENTER = (0.2, 0.2)
CYL_RADIUS = 0.05
CHANNEL = (2.2, 0.41)


def make_cylinder_mesh(h=0.05, n_circle=None, rings=2):
    """Channel-with-cylinder mesh from a graded Delaunay point cloud.

    Points on the circle make the hole a polygon with vertices exactly on
    the cylinder; a few concentric rings bridge to a uniform background
    grid.  Deterministic for fixed parameters.
    """
    from scipy.spatial import Delaunay

    cx, cy = CYL_CENTER
    r = CYL_RADIUS
    lx, ly = CHANNEL
    if n_circle is None:
        n_circle = max(16, int(round(2.0 * math.pi * r / (0.55 * h))))
    delta = 2.0 * math.pi * r / n_circle

    pts = []
    for ring in range(rings + 1):
        rad = r + ring * delta
        offset = 0.5 * delta / rad if ring % 2 else 0.0
        ang = 2.0 * math.pi * np.arange(n_circle) / n_circle + offset
        px = cx + rad * np.cos(ang)
        py = cy + rad * np.sin(ang)
        keep = (px > 1e-9) & (px < lx - 1e-9) & (py > 1e-9) & (py < ly - 1e-9)
        pts.append(np.column_stack([px[keep], py[keep]]))

    nx = int(round(lx / h))
    ny = int(round(ly / h))
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    clearance = r + rings * delta + 0.55 * min(h, delta)
    dist = np.hypot(grid[:, 0] - cx, grid[:, 1] - cy)
    grid = grid[dist > clearance]

    points = np.vstack([grid] + pts)
    tri = Delaunay(points)
    cells = tri.simplices.astype(np.int64)
    cent = points[cells].mean(axis=1)
    keep = np.hypot(cent[:, 0] - cx, cent[:, 1] - cy) > r * math.cos(math.pi / n_circle)
    cells = cells[keep]
    # drop zero-area slivers qhull can leave along the straight walls
    p0, p1, p2 = points[cells[:, 0]], points[cells[:, 1]], points[cells[:, 2]]
    area = 0.5 * meshmod.cross2(p1 - p0, p2 - p0)
    cells = cells[np.abs(area) > 1e-14]

    used = np.unique(cells)
    remap = -np.ones(len(points), dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = points[used]
    cells = remap[cells]
    meshmod._orient_ccw(vertices, cells)

    edges, counts = meshmod._edge_counts(cells)
    bedges = edges[counts == 1]
    mids = 0.5 * (vertices[bedges[:, 0]] + vertices[bedges[:, 1]])
    tags = {1: "inlet", 2: "outlet", 3: "wall", 4: "cylinder"}
    btags = np.full(len(bedges), 4, dtype=np.int64)
    tol = 1e-9
    btags[np.abs(mids[:, 0]) < tol] = 1
    btags[np.abs(mids[:, 0] - lx) < tol] = 2
    on_wall = (np.abs(mids[:, 1]) < tol) | (np.abs(mids[:, 1] - ly) < tol)
    btags[on_wall & (btags == 4)] = 3
    mesh = meshmod.Mesh(vertices, cells, bedges, btags, tags)
    return meshmod.validate_mesh(mesh)


def extended_cylinder_mesh():
    """Benchmark-scale mesh (>= 40k Taylor-Hood dofs, densified cylinder polygon)."""
    return make_cylinder_mesh(h=0.014, n_circle=80, rings=3)


def cylinder_inflow(x, y, t):
    amp = 6.0 * y * (0.41 - y) / 0.41**2 * math.sin(math.pi * t / 8.0)
    return amp, np.zeros_like(np.asarray(y, dtype=float))


def cylinder_setup(scheme, mesh=None, gamma=None, beta=0.0, t_final=8.0,
                   dt=0.001, nu=0.001, solver=None):
    if mesh is None:
        mesh = make_cylinder_mesh()
    if gamma is None:
        gamma = 5.0 * nu if scheme != "plain" else 0.0
    zero = lambda x, y, t: (np.zeros_like(np.asarray(x, dtype=float)),) * 2
    setup = stepper.ProblemSetup(
        nu=nu,
        dt=dt,
        t_final=t_final,
        scheme=scheme,
        params=stepper.StabilizationParams(gamma=gamma, beta=beta),
        dirichlet={
            "inlet": cylinder_inflow,
            "outlet": cylinder_inflow,
            "wall": zero,
            "cylinder": zero,
        },
        solver=solver or stepper.SolverOptions(precond="lagged_lu"),
        force_tag="cylinder",
        pressure_probes=((0.15, 0.2), (0.25, 0.2)),
    )
    return mesh, setup


def cylinder_run(scheme, mesh=None, **kwargs):
    """Cylinder benchmark run; returns the result and force coefficients.

    Coefficients are scaled by 2/(rho U^2 D) with U = 1, the mean inflow at
    the peak of the sin(pi t / 8) ramp, and D = 0.1.
    """
    mesh, setup = cylinder_setup(scheme, mesh=mesh, **kwargs)
    result = stepper.run_simulation(mesh, setup)
    coeffs = diagnostics.force_coefficients(result.ledger, u_ref=1.0, diameter=0.1)
    return result, coeffs
