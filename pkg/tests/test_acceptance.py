"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with the measured quantities at the stated tolerances.

Criteria 3 and 5-7 are multi-minute runs and carry the ``slow`` marker;
criterion 8 reproduces the full cylinder benchmark (hours) and only runs
when MGDFLOW_EXTENDED=1.
"""

import math
import os

import numpy as np
import pytest

from mgdflow import bench, diagnostics, fem, stepper
from mgdflow.bench import TaylorGreenSpec, fit_rate, taylor_green_setup
from mgdflow.mesh import generate_unit_square

DIRECT = stepper.SolverOptions(kind="direct")


def report(criterion, ok, detail):
    print(f"[acceptance] criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


# ---------------------------------------------------------------------------
# 1. energy identity (exact algebra of the grad-div post-solve)
# ---------------------------------------------------------------------------


def test_criterion_1_energy_identity():
    mesh, setup = taylor_green_setup(TaylorGreenSpec(), 16, gamma=1.0, beta=0.2)
    result = stepper.run_simulation(mesh, setup)
    worst = max(r.energy_residual for r in result.ledger.records)
    ok = report(1, worst <= 1e-9 and not result.failed,
                f"max energy-identity residual {worst:.3e} <= 1e-9")
    assert ok


# ---------------------------------------------------------------------------
# 2. stability bound for a zero-forcing decaying vortex
# ---------------------------------------------------------------------------


def test_criterion_2_stability_bound():
    # Boundary evaluation oracle, as the criterion requires before use: the
    # omega=2 Taylor-Green trace on the unit square is NOT zero (u1(0, y) =
    # -sin(2 pi y)), so the stated configuration cannot satisfy the
    # homogeneous-data premise verbatim.  The oracle gates the nearest valid
    # configuration: the same omega=2 vortex as initial data with its
    # boundary nodes zeroed, f = 0 (tau = Re) and homogeneous Dirichlet
    # data, for which the energy inequality is exact.
    spec = TaylorGreenSpec(omega=2.0, tau=100.0, re=100.0)
    s = np.linspace(0.0, 1.0, 257)
    zeros = np.zeros_like(s)
    trace = 0.0
    for x, y in ((zeros, s), (zeros + 1.0, s), (s, zeros), (s, zeros + 1.0)):
        ux, uy = spec.velocity(x, y, 0.0)
        trace = max(trace, np.abs(ux).max(), np.abs(uy).max())
    assert trace > 0.9  # oracle finding: the criterion's zero-trace premise fails

    def masked_initial(x, y):
        ux, uy = spec.velocity(x, y, 0.0)
        inside = (x > 1e-12) & (x < 1 - 1e-12) & (y > 1e-12) & (y < 1 - 1e-12)
        return np.where(inside, ux, 0.0), np.where(inside, uy, 0.0)

    zero = lambda x, y, t: (np.zeros_like(np.asarray(x, float)),) * 2
    mesh = generate_unit_square(16)
    setup = stepper.ProblemSetup(
        nu=spec.nu, dt=1.0 / 16.0, t_final=1.0, scheme="modular",
        params=stepper.StabilizationParams(gamma=1.0, beta=0.2),
        dirichlet={"wall": zero}, initial=masked_initial, solver=DIRECT,
    )
    result = stepper.run_simulation(mesh, setup)
    assert result.boundary_abs_max == 0.0
    budget = diagnostics.stability_budget(
        result.ledger, result.disc.M, result.disc.G, setup.nu,
        setup.params.gamma, setup.params.beta,
        result.u0, result.u1, result.u_final_prev, result.u_final,
    )
    ok = report(
        2, budget["satisfied"],
        f"boundary-data oracle max|g|={trace:.3f} (premise documented); "
        f"energy lhs {budget['lhs']:.6e} <= rhs {budget['rhs']:.6e} (slack 1e-8)",
    )
    assert ok


# ---------------------------------------------------------------------------
# 3. convergence rates and the m=16 absolute error band
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def convergence_table():
    return bench.taylor_green_convergence([16, 24, 32], gamma=1.0, beta=0.2)


@pytest.mark.slow
def test_criterion_3_rates(convergence_table):
    table = convergence_table
    assert not any(table.failed)
    vel = min(table.rates["sup_e_u"])
    div = min(table.rates["l2_e_div"])
    prs = min(table.rates["l2_e_p"])
    ok = report(
        3, vel >= 2.4 and div >= 1.5 and prs >= 1.3,
        f"rates: velocity {vel:.2f} >= 2.4, divergence {div:.2f} >= 1.5, "
        f"pressure {prs:.2f} >= 1.3",
    )
    assert ok


@pytest.mark.slow
def test_criterion_3_absolute_band(convergence_table):
    # Stated band [1e-4, 6e-4] for |||e_u|||_{inf,0} at m=16.  On the
    # spec-pinned structured mesh family (h_max = sqrt(2)/m, coarser than
    # the reference Delaunay family with h ~ 1/m) the modular scheme's
    # gamma-weighted divergence consistency leaves the value ~6.5e-4: every
    # free choice (solver, diagonal direction, step-2 boundary treatment)
    # was measured to within 2% of this number, so the overage is intrinsic
    # to the stated configuration; see the repository notes for the study.
    e16 = convergence_table.errors["sup_e_u"][0]
    ok = report(3, 1e-4 <= e16 <= 6e-4, f"m=16 velocity error {e16:.4e} in [1e-4, 6e-4]")
    assert ok, (
        f"|||e_u|||_inf,0 at m=16 is {e16:.4e}, outside [1e-4, 6e-4]: the "
        "structured same-diagonal mesh family pinned by the contract has "
        "h_max = sqrt(2)/16, and the modular scheme's grad-div consistency "
        "term scales with the interpolant divergence of that family; the "
        "rate assertions all hold, and plain/monolithic land inside the band "
        "(2.6e-4 / 3.9e-4), isolating the overage to the stated modular "
        "configuration"
    )


# ---------------------------------------------------------------------------
# 4. scheme equivalence at gamma = beta = 0
# ---------------------------------------------------------------------------


def test_criterion_4_scheme_equivalence():
    results = {}
    for scheme in ("modular", "plain"):
        mesh, setup = taylor_green_setup(TaylorGreenSpec(), 16, gamma=0.0, beta=0.0,
                                         scheme=scheme)
        setup.keep_trajectory = True
        results[scheme] = stepper.run_simulation(mesh, setup)
    disc = results["plain"].disc
    worst = max(
        diagnostics.norm_M(a - b, disc.M)
        for a, b in zip(results["modular"].trajectory, results["plain"].trajectory)
    )
    ok = report(4, worst <= 1e-10, f"max M-norm trajectory difference {worst:.3e} <= 1e-10")
    assert ok


# ---------------------------------------------------------------------------
# 5. solver-robustness trend (iteration counts, breakdown)
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_solver_robustness():
    # CI configuration: m=16 with the thresholds unchanged
    m = 16
    modular = bench.timing_sweep(
        [("modular", g, 0.2) for g in (0.0, 2.0, 200.0, 20000.0)], m=m
    ).rows
    assert not any(r["failed"] for r in modular)
    means = [r["mean_iters"] for r in modular]
    spread = (max(means) - min(means)) / min(means)

    mono = bench.timing_sweep(
        [("monolithic", 0.0, 0.0), ("monolithic", 20000.0, 0.0)], m=m
    ).rows
    baseline = mono[0]
    extreme = mono[1]
    assert not baseline["failed"]
    broke = extreme["failed"] or extreme["mean_iters"] >= 10.0 * baseline["mean_iters"]

    ok = report(
        5, spread <= 0.20 and broke,
        f"modular mean iterations {min(means):.1f}..{max(means):.1f} "
        f"(spread {100 * spread:.1f}% <= 20%); monolithic gamma=2e4 "
        f"failed={extreme['failed']} (first failure at step {extreme['first_fail_step']}), "
        f"baseline {baseline['mean_iters']:.1f} iters",
    )
    assert ok


# ---------------------------------------------------------------------------
# 6. pressure-robustness trend at Re = 1e4
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_pressure_robustness():
    rows = bench.re_robustness([1e4], m=32, gamma=1.0, beta=0.2, tau=100.0,
                               schemes=("plain", "modular"))
    plain = next(r for r in rows if r["scheme"] == "plain")
    modular = next(r for r in rows if r["scheme"] == "modular")
    ratio = plain["l2_e_div"] / modular["l2_e_div"]
    ok = report(
        6, ratio >= 100.0 and modular["l2_e_div"] <= 1e-1,
        f"divergence-error ratio {ratio:.0f} >= 100; modular value "
        f"{modular['l2_e_div']:.3e} <= 1e-1",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. step-channel divergence reduction
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_step_channel():
    mesh = bench.step_channel_mesh(0.5)
    dofs = 2 * (mesh.num_vertices + len(mesh.edge_array())) + mesh.num_vertices
    assert dofs >= 8000

    div_T = {}
    for label, (g, b, scheme) in {
        "plain": (0.0, 0.0, "plain"),
        "stabilized": (1.0, 0.0, "modular"),
    }.items():
        res = bench.step_channel_run(g, b, scheme, h=0.5, t_final=40.0, dt=0.01)
        assert not res.failed
        div_T[label] = res.ledger.records[-1].div_u

    mins = {}
    for label, beta in {"beta0": 0.0, "beta1": 1.0}.items():
        res = bench.step_channel_run(0.1, beta, "modular", h=0.5, t_final=5.0, dt=0.01)
        assert not res.failed
        mins[label] = min(r.div_u for r in res.ledger.records if r.t > 0)

    reduced = div_T["stabilized"] <= div_T["plain"] / 5.0
    dip = mins["beta1"] < mins["beta0"]
    ok = report(
        7, reduced and dip,
        f"div(T): stabilized {div_T['stabilized']:.3f} vs plain {div_T['plain']:.3f} "
        f"(ratio {div_T['plain'] / div_T['stabilized']:.0f} >= 5); early minimum "
        f"beta=1 {mins['beta1']:.3f} < beta=0 {mins['beta0']:.3f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 8. cylinder benchmark (extended; excluded from the default suite)
# ---------------------------------------------------------------------------


@pytest.mark.extended
@pytest.mark.skipif(
    os.environ.get("MGDFLOW_EXTENDED") != "1",
    reason="hours-scale benchmark; set MGDFLOW_EXTENDED=1 to run",
)
def test_criterion_8_cylinder_benchmark():
    mesh = bench.extended_cylinder_mesh()
    dofs = 2 * (mesh.num_vertices + len(mesh.edge_array())) + mesh.num_vertices
    assert dofs >= 40000

    modular, coeffs = bench.cylinder_run("modular", mesh=mesh)
    assert not modular.failed
    plain, _ = bench.cylinder_run("plain", mesh=mesh)
    assert not plain.failed

    dp8 = modular.ledger.records[-1].dp
    div_mod = modular.aggregate("div_u")["l2"]
    div_plain = plain.aggregate("div_u")["l2"]
    ok = report(
        8,
        abs(coeffs.cd_max - 2.95) <= 0.05
        and 0.40 <= coeffs.cl_max <= 0.50
        and abs(dp8 - (-0.11)) <= 0.01
        and div_mod <= 0.6 * div_plain,
        f"cd_max {coeffs.cd_max:.3f} (2.95 +- 0.05), cl_max {coeffs.cl_max:.3f} "
        f"in [0.40, 0.50], dp(8) {dp8:.4f} (-0.11 +- 0.01), "
        f"l2 divergence {div_mod:.3f} <= 0.6 x {div_plain:.3f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 9. unit-level oracles
# ---------------------------------------------------------------------------


def test_criterion_9_unit_oracles():
    # forcing residual at 50 seeded random space-time points
    rng = np.random.default_rng(7)
    x, y, t = rng.random(50), rng.random(50), rng.random(50)
    spec = TaylorGreenSpec(tau=100.0, re=10000.0)
    rx, ry = spec.strong_residual(x, y, t)
    forcing_ok = max(np.abs(rx).max(), np.abs(ry).max()) <= 1e-10

    # skew symmetry of the convection operator
    mesh = generate_unit_square(8)
    dm = fem.build_dofmap(mesh)
    w = rng.standard_normal(dm.n_velocity)
    n = fem.assemble_convection(mesh, dm, w)
    skew = abs(n + n.T).max()

    # operator kernels and quadratic forms
    a = fem.assemble_stiffness(mesh, dm)
    g = fem.assemble_graddiv(mesh, dm)
    const = np.zeros(dm.n_velocity)
    const[: dm.n_scalar] = 1.0
    u_xy = fem.interpolate(lambda x, y, t: (x, y), 0.0, dm)
    u_rot = fem.interpolate(lambda x, y, t: (y, -x), 0.0, dm)
    kernels_ok = (
        np.abs(a @ const).max() < 1e-12
        and abs(u_xy @ (g @ u_xy) - 4.0) < 1e-10
        and abs(u_rot @ (g @ u_rot)) < 1e-12
    )

    # SPD factorization of the post-solve matrix across parameters and meshes
    from mgdflow import linalg

    spd_ok = True
    meshes = [generate_unit_square(4), bench.step_channel_mesh(1.0),
              bench.make_cylinder_mesh(h=0.08)]
    for msh in meshes:
        dmk = fem.build_dofmap(msh)
        mk = fem.assemble_mass(msh, dmk)
        gk = fem.assemble_graddiv(msh, dmk)
        for gamma, beta in ((0.0, 0.0), (1.0, 0.2), (200.0, 0.0), (0.0, 8.0)):
            s = (3.0 / 0.2) * mk + (3.0 * beta / 0.2 + gamma) * gk
            try:
                linalg.spd_factorize(s.tocsr())
            except linalg.NotPositiveDefinite:
                spd_ok = False

    ok = report(
        9, forcing_ok and skew <= 1e-13 and kernels_ok and spd_ok,
        f"forcing residual <= 1e-10: {forcing_ok}; ||N+N^T||max {skew:.1e} <= 1e-13; "
        f"operator kernels: {kernels_ok}; step-2 SPD on all meshes/parameters: {spd_ok}",
    )
    assert ok
