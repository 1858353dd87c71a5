import numpy as np
import pytest

from mgdflow import bench, diagnostics, mesh as meshmod, stepper
from mgdflow.bench import NonPositiveError, TaylorGreenSpec, fit_rate

DIRECT = stepper.SolverOptions(kind="direct")


# ---------------------------------------------------------------------------
# manufactured vortex
# ---------------------------------------------------------------------------


def test_forcing_residual_oracle():
    # the closed-form forcing must satisfy the strong momentum equation at
    # random space-time points before any run is trusted with it
    rng = np.random.default_rng(7)
    x, y, t = rng.random(50), rng.random(50), rng.random(50)
    for spec in (TaylorGreenSpec(), TaylorGreenSpec(tau=100.0, re=10000.0),
                 TaylorGreenSpec(omega=2.0, tau=50.0, re=400.0)):
        rx, ry = spec.strong_residual(x, y, t)
        assert np.abs(rx).max() <= 1e-10
        assert np.abs(ry).max() <= 1e-10


def test_forcing_vanishes_when_tau_equals_re():
    spec = TaylorGreenSpec(tau=100.0, re=100.0)
    assert spec.forcing_is_zero
    fx, fy = spec.forcing(np.array([0.3]), np.array([0.6]), 0.2)
    assert np.abs(fx).max() == 0.0 and np.abs(fy).max() == 0.0


def test_exact_velocity_divergence_free():
    spec = TaylorGreenSpec(omega=3.0)
    rng = np.random.default_rng(1)
    x, y, t = rng.random(40), rng.random(40), rng.random(40)
    dxu, _, _, dyv = spec.velocity_grad(x, y, t)
    assert np.abs(dxu + dyv).max() <= 1e-13


# ---------------------------------------------------------------------------
# rate fitting
# ---------------------------------------------------------------------------


def test_fit_rate_quadratic():
    assert fit_rate([1.0, 0.25], [1, 2]) == pytest.approx([2.0])


def test_fit_rate_flat():
    assert fit_rate([1.0, 1.0], [1, 2]) == pytest.approx([0.0])


def test_fit_rate_matches_published_pair():
    # velocity column of the reference table: 2.47e-4 at m=16, 8.07e-5 at m=24
    rate = fit_rate([2.47e-4, 8.07e-5], [16, 24])[0]
    assert rate == pytest.approx(2.76, abs=0.005)


def test_fit_rate_scale_invariant():
    e = np.array([3e-3, 8e-4, 2.5e-4])
    m = [8, 16, 32]
    assert fit_rate(e, m) == pytest.approx(fit_rate(17.3 * e, m), rel=1e-12)


def test_fit_rate_rejects_nonpositive():
    with pytest.raises(NonPositiveError):
        fit_rate([1.0, 0.0], [1, 2])


# ---------------------------------------------------------------------------
# studies (smoke scale)
# ---------------------------------------------------------------------------


def test_convergence_smoke():
    table = bench.taylor_green_convergence([6, 8], solver=DIRECT)
    assert not any(table.failed)
    assert table.rates["sup_e_u"][0] > 1.5
    assert all(e > 0 for e in table.errors["l2_e_p"])


def test_timing_sweep_structure():
    rows = bench.timing_sweep(
        [("modular", 0.0, 0.0), ("monolithic", 0.0, 0.0)], m=6, solver=DIRECT
    ).rows
    assert len(rows) == 2
    for r in rows:
        assert not r["failed"]
        assert r["wall_time"] > 0
        assert r["first_fail_step"] == -1


def test_plain_equals_monolithic_unstabilized():
    # gamma = beta = 0: the monolithic scheme assembles the identical system
    spec = TaylorGreenSpec()
    lodgers = []
    for scheme in ("plain", "monolithic"):
        mesh, setup = bench.taylor_green_setup(spec, 6, gamma=0.0, beta=0.0,
                                               scheme=scheme, solver=DIRECT)
        res = stepper.run_simulation(mesh, setup)
        lodgers.append([r.norm_u for r in res.ledger.records])
    assert np.allclose(lodgers[0], lodgers[1], rtol=0, atol=1e-14)


def test_re_robustness_smoke():
    rows = bench.re_robustness([1.0], m=6, schemes=("plain", "modular"), solver=DIRECT)
    assert len(rows) == 2
    # at Re = 1 the schemes agree to the order of magnitude even at smoke
    # resolution (close agreement needs the benchmark-scale mesh)
    assert rows[0]["sup_e_u"] == pytest.approx(rows[1]["sup_e_u"], rel=1.5)
    assert not rows[0]["failed"] and not rows[1]["failed"]


# ---------------------------------------------------------------------------
# step channel
# ---------------------------------------------------------------------------


def test_step_channel_mesh_size():
    mesh = bench.step_channel_mesh(0.5)
    dm_dofs = 2 * (mesh.num_vertices + len(mesh.edge_array())) + mesh.num_vertices
    assert dm_dofs >= 8000
    metrics = meshmod.mesh_metrics(mesh)
    assert metrics["area_total"] == pytest.approx(399.0, rel=1e-12)


def test_step_channel_zero_inflow_zero_solution():
    zero = lambda x, y, t: (np.zeros_like(np.asarray(y, float)),) * 2
    mesh, setup = bench.step_channel_setup(1.0, 0.0, "modular", h=1.0,
                                           t_final=0.05, dt=0.01, inflow=zero)
    res = stepper.run_simulation(mesh, setup)
    assert max(r.norm_u for r in res.ledger.records) == 0.0
    assert max(r.div_u for r in res.ledger.records) == 0.0


def test_step_channel_divergence_damped_smoke():
    # short horizon, coarse mesh: the stabilized run has smaller divergence
    runs = {}
    for gamma, scheme in ((0.0, "plain"), (1.0, "modular")):
        res = bench.step_channel_run(gamma, 0.0, scheme, h=1.0, t_final=0.5, dt=0.05)
        assert not res.failed
        runs[scheme] = res.ledger.records[-1].div_u
    assert runs["modular"] < runs["plain"]


# ---------------------------------------------------------------------------
# cylinder
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def coarse_cylinder():
    return bench.make_cylinder_mesh(h=0.05)


def test_cylinder_mesh_topology(coarse_cylinder):
    m = meshmod.mesh_metrics(coarse_cylinder)
    # one hole: V - E + T = 0
    assert m["V"] - m["E"] + m["T"] == 0
    hole = np.pi * bench.CYL_RADIUS**2
    assert m["area_total"] == pytest.approx(2.2 * 0.41 - hole, rel=5e-3)
    assert set(coarse_cylinder.tags.values()) == {"inlet", "outlet", "wall", "cylinder"}


def test_cylinder_mesh_round_trip(coarse_cylinder, tmp_path):
    path = tmp_path / "cyl.msh"
    meshmod.write_msh(coarse_cylinder, path)
    back = meshmod.read_msh(path)
    assert np.array_equal(coarse_cylinder.triangles, back.triangles)
    assert back.tags == coarse_cylinder.tags


def test_cylinder_run_smoke(coarse_cylinder):
    res, coeffs = bench.cylinder_run("modular", mesh=coarse_cylinder,
                                     t_final=0.02, dt=0.01)
    assert not res.failed
    # rightward inflow pushes the cylinder downstream from the start
    assert res.ledger.records[-1].fx > 0
    assert np.isfinite(coeffs.cd_max)
    assert coeffs.dp.shape == (len(res.ledger.records),)


def test_cylinder_extended_mesh_reaches_benchmark_scale():
    mesh = bench.extended_cylinder_mesh()
    dofs = 2 * (mesh.num_vertices + len(mesh.edge_array())) + mesh.num_vertices
    assert dofs >= 40000
    m = meshmod.mesh_metrics(mesh)
    assert m["V"] - m["E"] + m["T"] == 0
