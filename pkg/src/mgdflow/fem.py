"""Taylor-Hood P2-P1 discretization on triangles.

Degree-of-freedom management, triangle quadrature, sparse assembly of the
mass, stiffness, divergence, grad-div and skew-symmetric convection
operators, nodal interpolation, and quadrature-based error norms.

Vector velocity dofs use a component-major layout: all x-components first
(one per scalar P2 node), then all y-components.  Scalar P2 nodes are the
mesh vertices followed by the edge midpoints, in the deterministic edge
order of ``mesh.edge_array()``.  Pressure dofs are the vertices.

Dirichlet conditions are never baked into the assembled operators; the
time steppers constrain systems by row/column elimination so the same
matrices serve all schemes and the identity checkers.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .mesh import Mesh


class DimensionMismatch(Exception):
    pass


# ---------------------------------------------------------------------------
# quadrature on the reference triangle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights on the reference triangle.

    Weights sum to 1/2 (the reference area); the rule integrates
    polynomials up to ``order`` exactly.
    """

    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,)
    order: int


def _perm3(a):
    c = 1.0 - 2.0 * a
    return [(c, a, a), (a, c, a), (a, a, c)]


def _perm6(a, b):
    c = 1.0 - a - b
    return [(c, a, b), (a, c, b), (a, b, c), (c, b, a), (b, c, a), (b, a, c)]


_RULES = {
    1: ([(1 / 3, 1 / 3, 1 / 3)], [1.0]),
    2: (_perm3(1 / 6), [1 / 3] * 3),
    4: (
        _perm3(0.445948490915965) + _perm3(0.091576213509771),
        [0.223381589678011] * 3 + [0.109951743655322] * 3,
    ),
    5: (
        [(1 / 3, 1 / 3, 1 / 3)]
        + _perm3(0.470142064105115)
        + _perm3(0.101286507323456),
        [0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3,
    ),
    6: (
        _perm3(0.063089014491502)
        + _perm3(0.249286745170910)
        + _perm6(0.310352451033785, 0.053145049844816),
        [0.050844906370207] * 3 + [0.116786275726379] * 3 + [0.082851075618374] * 6,
    ),
}


def triangle_rule(order):
    """Smallest tabulated rule exact for polynomials of the given degree."""
    for deg in sorted(_RULES):
        if deg >= order:
            pts, wts = _RULES[deg]
            return QuadratureRule(
                np.asarray(pts, dtype=float), 0.5 * np.asarray(wts, dtype=float), deg
            )
    raise ValueError(f"no tabulated rule of order {order}")


# ---------------------------------------------------------------------------
# reference bases
# ---------------------------------------------------------------------------

# local P2 node order: [v0, v1, v2, mid01, mid12, mid20]
_DLAM = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # d lambda_i / d(xi, eta)


def p2_values(bary):
    lam = np.asarray(bary)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.column_stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ]
    )


def p2_ref_grads(bary):
    lam = np.asarray(bary)
    nq = lam.shape[0]
    g = np.zeros((nq, 6, 2))
    for q in range(nq):
        l0, l1, l2 = lam[q]
        g[q, 0] = (4 * l0 - 1) * _DLAM[0]
        g[q, 1] = (4 * l1 - 1) * _DLAM[1]
        g[q, 2] = (4 * l2 - 1) * _DLAM[2]
        g[q, 3] = 4 * (l1 * _DLAM[0] + l0 * _DLAM[1])
        g[q, 4] = 4 * (l2 * _DLAM[1] + l1 * _DLAM[2])
        g[q, 5] = 4 * (l0 * _DLAM[2] + l2 * _DLAM[0])
    return g


def p1_values(bary):
    return np.asarray(bary, dtype=float)


# ---------------------------------------------------------------------------
# dof map
# ---------------------------------------------------------------------------


@dataclass
class DofMap:
    """P2 vector velocity / P1 pressure dof numbering and boundary data.

    n_scalar            : V + E scalar velocity nodes
    n_velocity          : 2 * n_scalar, component-major
    n_pressure          : V
    coords              : (n_scalar, 2) node coordinates
    tri_dofs            : (T, 6) scalar dofs per triangle, local order
                          [v0, v1, v2, mid01, mid12, mid20]
    scalar_tag          : (n_scalar,) boundary tag per node, -1 interior
    boundary_scalar     : sorted indices of boundary scalar nodes
    edges               : (E, 2) the edge list the midpoints are numbered by
    """

    mesh: Mesh
    n_scalar: int
    n_pressure: int
    coords: np.ndarray
    tri_dofs: np.ndarray
    scalar_tag: np.ndarray
    boundary_scalar: np.ndarray
    edges: np.ndarray
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def n_velocity(self):
        return 2 * self.n_scalar

    def velocity_dirichlet_dofs(self):
        """Constrained vector-velocity dofs (both components of every boundary node)."""
        b = self.boundary_scalar
        return np.concatenate([b, b + self.n_scalar])


def build_dofmap(mesh):
    V = mesh.num_vertices
    edges = mesh.edge_array()
    E = len(edges)
    edge_index = {(int(a), int(b)): k for k, (a, b) in enumerate(edges)}

    tri = mesh.triangles
    tri_dofs = np.empty((mesh.num_triangles, 6), dtype=np.int64)
    tri_dofs[:, :3] = tri
    local_pairs = [(0, 1), (1, 2), (2, 0)]
    for loc, (a, b) in enumerate(local_pairs):
        for t in range(mesh.num_triangles):
            va, vb = int(tri[t, a]), int(tri[t, b])
            key = (va, vb) if va < vb else (vb, va)
            tri_dofs[t, 3 + loc] = V + edge_index[key]

    coords = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])

    scalar_tag = -np.ones(V + E, dtype=np.int64)

    def _assign(dof, tag):
        # a node on two differently tagged edges keeps the smaller tag id
        if scalar_tag[dof] < 0 or tag < scalar_tag[dof]:
            scalar_tag[dof] = tag

    for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        a, b = int(a), int(b)
        key = (a, b) if a < b else (b, a)
        _assign(a, t)
        _assign(b, t)
        _assign(V + edge_index[key], t)

    boundary_scalar = np.flatnonzero(scalar_tag >= 0)
    return DofMap(mesh, V + E, V, coords, tri_dofs, scalar_tag, boundary_scalar, edges)


# ---------------------------------------------------------------------------
# per-mesh geometry tables
# ---------------------------------------------------------------------------


class _Tables:
    """Cached geometry and basis tables for one (mesh, quadrature order) pair."""

    def __init__(self, dofmap, order):
        mesh = dofmap.mesh
        rule = triangle_rule(order)
        p0 = mesh.vertices[mesh.triangles[:, 0]]
        p1 = mesh.vertices[mesh.triangles[:, 1]]
        p2 = mesh.vertices[mesh.triangles[:, 2]]
        j11 = p1[:, 0] - p0[:, 0]
        j12 = p2[:, 0] - p0[:, 0]
        j21 = p1[:, 1] - p0[:, 1]
        j22 = p2[:, 1] - p0[:, 1]
        det = j11 * j22 - j12 * j21
        inv_t = np.empty((len(det), 2, 2))
        inv_t[:, 0, 0] = j22 / det
        inv_t[:, 0, 1] = -j21 / det
        inv_t[:, 1, 0] = -j12 / det
        inv_t[:, 1, 1] = j11 / det

        self.rule = rule
        self.det = det
        self.n2 = p2_values(rule.points)                    # (nq, 6)
        ref = p2_ref_grads(rule.points)                     # (nq, 6, 2)
        # physical gradients: (T, nq, 6, 2)
        self.g2 = np.einsum("tab,qib->tqia", inv_t, ref)
        self.n1 = p1_values(rule.points)                    # (nq, 3)
        # quadrature point coordinates: (T, nq, 2)
        self.x = np.einsum("qk,tkd->tqd", rule.points, np.stack([p0, p1, p2], axis=1))
        self.wdet = rule.weights[None, :] * det[:, None]    # (T, nq)


def tables(dofmap, order):
    # cached per dofmap instance so repeated assembly reuses the geometry
    tab = dofmap._tables.get(order)
    if tab is None:
        tab = _Tables(dofmap, order)
        dofmap._tables[order] = tab
    return tab


def _scatter_scalar(dofmap, elem, shape=None):
    """Scatter (T, 6, 6) element blocks into a scalar CSR matrix."""
    td = dofmap.tri_dofs
    rows = np.repeat(td, 6, axis=1).ravel()
    cols = np.tile(td, (1, 6)).ravel()
    n = shape or dofmap.n_scalar
    mat = sparse.coo_matrix((elem.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def _symmetrize(mat):
    # duplicate summation order in the scatter can leave 1e-18 asymmetry
    out = 0.5 * (mat + mat.T)
    return out.tocsr()


def assemble_mass(mesh, dofmap, order=4):
    """Vector P2 mass matrix, (phi_j, phi_i)."""
    t = tables(dofmap, order)
    elem = np.einsum("tq,qi,qj->tij", t.wdet, t.n2, t.n2)
    ms = _scatter_scalar(dofmap, elem)
    return _symmetrize(sparse.block_diag((ms, ms), format="csr"))


def assemble_stiffness(mesh, dofmap, order=4):
    """Vector P2 stiffness matrix, (grad phi_j, grad phi_i)."""
    t = tables(dofmap, order)
    elem = np.einsum("tq,tqid,tqjd->tij", t.wdet, t.g2, t.g2)
    ks = _scatter_scalar(dofmap, elem)
    return _symmetrize(sparse.block_diag((ks, ks), format="csr"))


def assemble_divergence(mesh, dofmap, order=4):
    """Pressure-velocity divergence matrix B, B[i, j] = (div phi_j, q_i)."""
    t = tables(dofmap, order)
    td = dofmap.tri_dofs
    tp = mesh.triangles
    rows = np.repeat(tp, 6, axis=1).ravel()
    cols = np.tile(td, (1, 3)).ravel()
    blocks = []
    for comp in range(2):
        elem = np.einsum("tq,tqj,qi->tij", t.wdet, t.g2[:, :, :, comp], t.n1)
        b = sparse.coo_matrix(
            (elem.ravel(), (rows, cols)), shape=(dofmap.n_pressure, dofmap.n_scalar)
        ).tocsr()
        b.sum_duplicates()
        blocks.append(b)
    return sparse.hstack(blocks, format="csr")


def assemble_graddiv(mesh, dofmap, order=4):
    """Grad-div matrix G, G[i, j] = (div phi_j, div phi_i) on vector P2."""
    t = tables(dofmap, order)
    ns = dofmap.n_scalar
    td = dofmap.tri_dofs
    rows_s = np.repeat(td, 6, axis=1).ravel()
    cols_s = np.tile(td, (1, 6)).ravel()
    rows, cols, vals = [], [], []
    for a in range(2):
        for b in range(2):
            elem = np.einsum("tq,tqi,tqj->tij", t.wdet, t.g2[..., a], t.g2[..., b])
            rows.append(rows_s + a * ns)
            cols.append(cols_s + b * ns)
            vals.append(elem.ravel())
    g = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * ns, 2 * ns),
    ).tocsr()
    g.sum_duplicates()
    return _symmetrize(g)


def assemble_convection(mesh, dofmap, w, order=5):
    """Skew-symmetric convection matrix N(w) = (C - C^T) / 2.

    C[i, j] = (w_h . grad phi_j, phi_i); w is a vector velocity coefficient
    array.  Skew symmetry of the result is exact by construction.
    """
    if w.shape[0] != dofmap.n_velocity:
        raise DimensionMismatch("convecting field has wrong length")
    t = tables(dofmap, order)
    ns = dofmap.n_scalar
    td = dofmap.tri_dofs
    wx = np.einsum("tk,qk->tq", w[:ns][td], t.n2)
    wy = np.einsum("tk,qk->tq", w[ns:][td], t.n2)
    wgrad = wx[:, :, None] * t.g2[..., 0] + wy[:, :, None] * t.g2[..., 1]  # (T, nq, 6)
    elem = np.einsum("tq,tqj,qi->tij", t.wdet, wgrad, t.n2)
    cs = _scatter_scalar(dofmap, elem)
    c = sparse.block_diag((cs, cs), format="csr")
    n = 0.5 * (c - c.T)
    return n.tocsr()


def assemble_load(mesh, dofmap, f, time, order=5):
    """Load vector (f(., t), phi_i) over the vector P2 basis."""
    t = tables(dofmap, order)
    fx, fy = f(t.x[..., 0], t.x[..., 1], time)
    fx = np.broadcast_to(np.asarray(fx, dtype=float), t.wdet.shape)
    fy = np.broadcast_to(np.asarray(fy, dtype=float), t.wdet.shape)
    out = np.zeros(dofmap.n_velocity)
    ex = np.einsum("tq,qi->ti", t.wdet * fx, t.n2)
    ey = np.einsum("tq,qi->ti", t.wdet * fy, t.n2)
    np.add.at(out, dofmap.tri_dofs, ex)
    np.add.at(out, dofmap.tri_dofs + dofmap.n_scalar, ey)
    return out


def pressure_integral_weights(mesh, dofmap):
    """w_i = integral of pressure basis q_i; w . p is the mean of p times |Omega|."""
    from .mesh import signed_areas

    areas = np.abs(signed_areas(mesh.vertices, mesh.triangles))
    w = np.zeros(dofmap.n_pressure)
    np.add.at(w, mesh.triangles, (areas / 3.0)[:, None])
    return w


# ---------------------------------------------------------------------------
# interpolation and field evaluation
# ---------------------------------------------------------------------------


def interpolate(exact, time, dofmap, space="velocity"):
    """Nodal interpolation of a callable onto the P2 velocity or P1 pressure space.

    Velocity callables take (x, y, t) arrays and return (ux, uy); pressure
    callables return a single array.
    """
    if space == "velocity":
        x, y = dofmap.coords[:, 0], dofmap.coords[:, 1]
        ux, uy = exact(x, y, time)
        out = np.empty(dofmap.n_velocity)
        out[: dofmap.n_scalar] = np.broadcast_to(np.asarray(ux, dtype=float), x.shape)
        out[dofmap.n_scalar :] = np.broadcast_to(np.asarray(uy, dtype=float), x.shape)
        return out
    if space == "pressure":
        v = dofmap.mesh.vertices
        p = exact(v[:, 0], v[:, 1], time)
        return np.broadcast_to(np.asarray(p, dtype=float), (dofmap.n_pressure,)).copy()
    raise ValueError(f"unknown space {space!r}")


def velocity_at_quad(dofmap, u, order=6):
    """Values and gradients of a velocity field at quadrature points.

    Returns (ux, uy, grad) with shapes (T, nq), (T, nq), (T, nq, 2, 2) where
    grad[..., c, d] = d u_c / d x_d.
    """
    t = tables(dofmap, order)
    ns = dofmap.n_scalar
    td = dofmap.tri_dofs
    ex = u[:ns][td]  # (T, 6)
    ey = u[ns:][td]
    ux = np.einsum("tk,qk->tq", ex, t.n2)
    uy = np.einsum("tk,qk->tq", ey, t.n2)
    grad = np.empty(ux.shape + (2, 2))
    grad[..., 0, :] = np.einsum("tk,tqkd->tqd", ex, t.g2)
    grad[..., 1, :] = np.einsum("tk,tqkd->tqd", ey, t.g2)
    return ux, uy, grad


def pressure_at_quad(dofmap, p, order=6):
    t = tables(dofmap, order)
    ep = p[dofmap.mesh.triangles]
    return np.einsum("tk,qk->tq", ep, t.n1)


def l2_error(u, exact, time, dofmap, space="velocity", order=6):
    """Quadrature evaluation of || u_h - u(., t) || for one snapshot."""
    t = tables(dofmap, order)
    if space == "velocity":
        ux, uy, _ = velocity_at_quad(dofmap, u, order)
        ex, ey = exact(t.x[..., 0], t.x[..., 1], time)
        err2 = (ux - ex) ** 2 + (uy - ey) ** 2
    else:
        ph = pressure_at_quad(dofmap, p=u, order=order)
        pe = exact(t.x[..., 0], t.x[..., 1], time)
        err2 = (ph - pe) ** 2
    return float(np.sqrt(np.sum(t.wdet * err2)))


def h1_seminorm_error(u, exact_grad, time, dofmap, order=6):
    """|| grad(u_h - u) ||; exact_grad(x, y, t) returns (dxu, dyu, dxv, dyv)."""
    t = tables(dofmap, order)
    _, _, grad = velocity_at_quad(dofmap, u, order)
    gxx, gxy, gyx, gyy = exact_grad(t.x[..., 0], t.x[..., 1], time)
    err2 = (
        (grad[..., 0, 0] - gxx) ** 2
        + (grad[..., 0, 1] - gxy) ** 2
        + (grad[..., 1, 0] - gyx) ** 2
        + (grad[..., 1, 1] - gyy) ** 2
    )
    return float(np.sqrt(np.sum(t.wdet * err2)))


def div_l2_error(u, dofmap, exact_div=None, time=0.0, order=6):
    """|| div u_h - div u ||; defaults to the plain divergence norm."""
    t = tables(dofmap, order)
    _, _, grad = velocity_at_quad(dofmap, u, order)
    div = grad[..., 0, 0] + grad[..., 1, 1]
    if exact_div is not None:
        div = div - exact_div(t.x[..., 0], t.x[..., 1], time)
    return float(np.sqrt(np.sum(t.wdet * div**2)))


def export_coo(matrix, path):
    """Coordinate text dump: row col value with 17 significant digits."""
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as f:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            f.write("%d %d %.17g\n" % (r, c, v))
