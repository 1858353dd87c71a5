import numpy as np
import pytest

from mgdflow import bench, diagnostics, fem, linalg, stepper
from mgdflow.bench import TaylorGreenSpec, taylor_green_setup
from mgdflow.mesh import generate_unit_square
from mgdflow.stepper import (
    MissingBoundaryData,
    ProblemSetup,
    SolverOptions,
    StabilizationParams,
    advance,
    boundary_values,
    build_discretization,
    run_simulation,
    startup,
    step1_solve,
    step2_solve,
)

DIRECT = SolverOptions(kind="direct")


def zero_bc(x, y, t):
    z = np.zeros_like(np.asarray(x, dtype=float))
    return z, z


def test_params_validated():
    with pytest.raises(ValueError):
        StabilizationParams(gamma=-1.0)
    with pytest.raises(ValueError):
        ProblemSetup(nu=0.01, dt=0.1, t_final=0.1)  # fewer than two steps
    with pytest.raises(ValueError):
        ProblemSetup(nu=0.01, dt=-0.1, t_final=1.0)


# ---------------------------------------------------------------------------
# startup
# ---------------------------------------------------------------------------


def test_startup_interpolant_accuracy():
    spec = TaylorGreenSpec()
    errs = []
    for m in (4, 8):
        mesh, setup = taylor_green_setup(spec, m, solver=DIRECT)
        disc = build_discretization(mesh)
        state = startup(disc, setup)
        errs.append(fem.l2_error(state.u_curr, spec.velocity, setup.dt, disc.dofmap))
    # interpolation error scales like h^3
    assert errs[0] / errs[1] > 6.0


def test_startup_zero_data_gives_zero():
    mesh = generate_unit_square(4)
    setup = ProblemSetup(
        nu=0.01, dt=0.1, t_final=1.0, scheme="modular",
        params=StabilizationParams(1.0, 0.2),
        dirichlet={"wall": zero_bc}, solver=DIRECT,
    )
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    assert np.all(state.u_curr == 0.0)
    assert np.all(state.p_curr == 0.0)


def test_startup_backward_euler_incompressibility():
    # no exact solution registered: one BE step; the tentative velocity is
    # discretely divergence-free from the first level on
    mesh, setup = bench.step_channel_setup(1.0, 0.2, "modular", h=1.0, t_final=0.1, dt=0.01)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    resid = disc.B @ state.u_hat
    pin = 0
    resid[pin] = 0.0
    norm_uhat = diagnostics.norm_M(state.u_hat, disc.M)
    assert np.linalg.norm(resid) <= 10 * setup.solver.tol * max(norm_uhat, 1.0)


# ---------------------------------------------------------------------------
# step 1
# ---------------------------------------------------------------------------


def test_step1_stokes_limit_recovers_linear_field():
    # u = (y, x), p = x - 1/2 solve steady Stokes with f = (1, 0); P2/P1
    # reproduce both exactly, so the solve returns the interpolants
    mesh = generate_unit_square(4)
    exact_u = lambda x, y, t: (y, x)
    exact_p = lambda x, y, t: x - 0.5
    setup = ProblemSetup(
        nu=1.0, dt=0.1, t_final=1.0, scheme="plain",
        dirichlet={"wall": exact_u},
        initial=lambda x, y: exact_u(x, y, 0.0),
        body_force=lambda x, y, t: (np.ones_like(x), np.zeros_like(y)),
        include_convection=False,
        solver=DIRECT,
    )
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, state.t + setup.dt)
    u_hat, p, rep, _ = step1_solve(disc, setup, state, bc_dofs, bc_vals)
    ui = fem.interpolate(exact_u, 0.0, disc.dofmap)
    pi = fem.interpolate(exact_p, 0.0, disc.dofmap, space="pressure")
    assert np.abs(u_hat - ui).max() < 1e-10
    assert np.abs(p - pi).max() < 1e-9


def test_step1_homogeneous_everything_is_zero():
    mesh = generate_unit_square(3)
    setup = ProblemSetup(
        nu=0.01, dt=0.1, t_final=1.0, scheme="modular",
        params=StabilizationParams(1.0, 0.2),
        dirichlet={"wall": zero_bc}, solver=DIRECT,
    )
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, 0.2)
    u_hat, p, rep, _ = step1_solve(disc, setup, state, bc_dofs, bc_vals)
    assert np.abs(u_hat).max() < 1e-13
    assert np.abs(p).max() < 1e-13


def test_step1_error_shrinks_with_dt():
    # one BDF2 step from an exact start: halving dt cuts the new error
    spec = TaylorGreenSpec()
    errs = []
    for dt in (1.0 / 8.0, 1.0 / 16.0):
        mesh, setup = taylor_green_setup(spec, 16, dt=dt, solver=DIRECT)
        disc = build_discretization(mesh)
        state = startup(disc, setup)
        bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, state.t + setup.dt)
        u_hat, _, _, _ = step1_solve(disc, setup, state, bc_dofs, bc_vals)
        errs.append(fem.l2_error(u_hat, spec.velocity, 2 * setup.dt, disc.dofmap))
    assert errs[1] < errs[0]


# ---------------------------------------------------------------------------
# step 2
# ---------------------------------------------------------------------------


def test_step2_identity_when_unstabilized():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 8, gamma=0.0, beta=0.0, solver=DIRECT)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, state.t + setup.dt)
    u_hat, _, _, _ = step1_solve(disc, setup, state, bc_dofs, bc_vals)
    u_new = step2_solve(disc, setup, state, u_hat, bc_dofs, bc_vals)
    assert np.abs(u_new - u_hat).max() <= 1e-12 * max(1.0, np.abs(u_hat).max())


def test_step2_divergence_free_passthrough():
    # u_hat an interpolated divergence-free linear field and a constant
    # history annihilate every grad-div term, so step 2 returns u_hat
    mesh = generate_unit_square(4)
    disc = build_discretization(mesh)
    field = lambda x, y, t: (y, -x)
    u = fem.interpolate(field, 0.0, disc.dofmap)
    setup = ProblemSetup(
        nu=0.01, dt=0.25, t_final=1.0, scheme="modular",
        params=StabilizationParams(gamma=3.0, beta=0.7),
        dirichlet={"wall": field}, solver=DIRECT,
    )
    state = stepper.TimeStepperState(
        u_prev=u.copy(), u_curr=u.copy(), u_hat=u.copy(),
        p_curr=np.zeros(disc.n_p), t=0.25, n=1,
    )
    bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, 0.5)
    u_new = step2_solve(disc, setup, state, u.copy(), bc_dofs, bc_vals)
    assert np.abs(u_new - u).max() < 1e-11


def test_step2_factor_cached_and_rebuilt():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 4, solver=DIRECT)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, state.t + setup.dt)
    step2_solve(disc, setup, state, state.u_hat, bc_dofs, bc_vals)
    first = state.step2_cache["factor"]
    step2_solve(disc, setup, state, state.u_hat, bc_dofs, bc_vals)
    assert state.step2_cache["factor"] is first
    setup.params = StabilizationParams(gamma=9.0, beta=0.0)
    step2_solve(disc, setup, state, state.u_hat, bc_dofs, bc_vals)
    assert state.step2_cache["factor"] is not first


# ---------------------------------------------------------------------------
# advance and full runs
# ---------------------------------------------------------------------------


def test_advance_damps_divergence():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 16, solver=DIRECT)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    for _ in range(2):
        advance(disc, setup, state)
        div_after = diagnostics.norm_G(state.u_curr, disc.G)
        div_before = diagnostics.norm_G(state.u_hat, disc.G)
        assert div_after < div_before


def test_advance_plain_scheme_keeps_tentative_velocity():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 8, scheme="plain", solver=DIRECT)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    advance(disc, setup, state)
    assert state.u_curr is state.u_hat or np.array_equal(state.u_curr, state.u_hat)
    assert state.last_identity_residual == 0.0


def test_failed_solve_completes_run_marked_failed():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(
        spec, 8, solver=SolverOptions(kind="gmres", max_iters=3, tol=1e-14)
    )
    result = run_simulation(mesh, setup)
    assert result.failed
    assert result.first_fail_step >= 1
    assert len(result.ledger.records) == 9


def test_run_length_and_monotone_time():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 8, solver=DIRECT)
    result = run_simulation(mesh, setup)
    ts = [r.t for r in result.ledger.records]
    assert len(ts) == 9  # n = 0..8
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_discrete_incompressibility_every_step():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 8)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    for _ in range(4):
        advance(disc, setup, state)
        resid = disc.B @ state.u_hat
        resid[0] = 0.0  # pinned gauge row carries no constraint
        assert np.linalg.norm(resid) <= 10 * setup.solver.tol * diagnostics.norm_M(
            state.u_hat, disc.M
        )


def test_scheme_equivalence_unstabilized():
    spec = TaylorGreenSpec()
    results = {}
    for scheme in ("modular", "plain"):
        mesh, setup = taylor_green_setup(spec, 8, gamma=0.0, beta=0.0, scheme=scheme)
        setup.keep_trajectory = True
        results[scheme] = run_simulation(mesh, setup)
    disc = results["plain"].disc
    for a, b in zip(results["modular"].trajectory, results["plain"].trajectory):
        assert diagnostics.norm_M(a - b, disc.M) <= 1e-10


# ---------------------------------------------------------------------------
# boundary data
# ---------------------------------------------------------------------------


def test_boundary_values_step_channel_inlet():
    mesh, setup = bench.step_channel_setup(1.0, 0.0, "modular", h=1.0)
    disc = build_discretization(mesh)
    dofs, vals = boundary_values(disc, setup.dirichlet, 3.0)
    coords = np.vstack([disc.dofmap.coords, disc.dofmap.coords])
    sel = (np.abs(coords[: len(dofs)][:, 0]) < 1e-12) & (
        np.abs(coords[: len(dofs)][:, 1] - 5.0) < 1e-12
    )
    # x-velocity at the inlet midpoint (0, 5): 5 (10 - 5) / 25 = 1
    xm = disc.dofmap.coords[dofs[dofs < disc.dofmap.n_scalar]]
    on = (np.abs(xm[:, 0]) < 1e-12) & (np.abs(xm[:, 1] - 5.0) < 1e-12)
    assert np.any(on)
    assert vals[: on.shape[0]][on] == pytest.approx(1.0, rel=1e-12)


def test_boundary_values_cylinder_profile():
    # 6 y (0.41 - y) / 0.41^2 sin(pi t / 8) at the midline y = 0.205, t = 4
    got = bench.cylinder_inflow(0.0, 0.205, 4.0)[0]
    assert got == pytest.approx(1.5, rel=1e-12)


def test_missing_boundary_data():
    mesh = generate_unit_square(2)
    disc = build_discretization(mesh)
    with pytest.raises(MissingBoundaryData):
        boundary_values(disc, {}, 0.0)


def test_constrained_dofs_exact():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 4, solver=DIRECT)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    advance(disc, setup, state)
    bc_dofs, bc_vals = boundary_values(disc, setup.dirichlet, state.t)
    assert np.abs(state.u_curr[bc_dofs] - bc_vals).max() < 1e-12


def test_pressure_mean_zero():
    spec = TaylorGreenSpec()
    mesh, setup = taylor_green_setup(spec, 8, solver=DIRECT)
    disc = build_discretization(mesh)
    state = startup(disc, setup)
    advance(disc, setup, state)
    mean = disc.pressure_weights @ state.p_curr / disc.area
    assert abs(mean) < 1e-13


def test_apply_dirichlet_homogeneous_zeroes_dofs():
    mesh = generate_unit_square(3)
    disc = build_discretization(mesh)
    k = (disc.M + disc.A).tocsr()
    rhs = np.ones(disc.n_vel)
    k2, rhs2 = stepper.apply_dirichlet(k, rhs, disc, {"wall": zero_bc}, 0.0)
    dofs = disc.dofmap.velocity_dirichlet_dofs()
    x = np.linalg.solve(k2.toarray(), rhs2)
    assert np.abs(x[dofs]).max() == 0.0
