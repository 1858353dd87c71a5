"""Conforming triangle meshes for the benchmark domains.

Structured generators for the unit square and unions of axis-aligned
rectangles (the step channel), a reader/writer for an ASCII MSH-2.2 subset
(used to ingest the cylinder domain), and mesh metrics.

Meshes are treated as immutable after construction; nothing in this package
mutates a built mesh.
"""

from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    pass


class TopologyError(MeshError):
    pass


class NonConformingSpec(MeshError):
    pass


class ParseError(MeshError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


SNAP_TOL = 1e-9


@dataclass
class Mesh:
    """Triangulation with tagged boundary segments.

    vertices       : (V, 2) float array
    triangles      : (T, 3) int array, counterclockwise
    boundary_edges : (Bn, 2) int array of vertex pairs
    boundary_tags  : (Bn,) int array, one tag per boundary edge
    tags           : dict tag id -> name ("wall", "inlet", ...)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    tags: dict = field(default_factory=dict)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    def edge_array(self):
        """Unique undirected edges, lexicographically sorted. Deterministic."""
        return unique_edges(self.triangles)

    def tag_id(self, name):
        for tid, tname in self.tags.items():
            if tname == name:
                return tid
        raise KeyError(f"no boundary tag named {name!r}")


def cross2(a, b):
    """z-component of the cross product of stacked 2D vectors."""
    a = np.asarray(a)
    b = np.asarray(b)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def signed_areas(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * cross2(p1 - p0, p2 - p0)


def unique_edges(triangles):
    pairs = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def _edge_counts(triangles):
    pairs = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs.sort(axis=1)
    edges, counts = np.unique(pairs, axis=0, return_counts=True)
    return edges, counts


def validate_mesh(mesh):
    """Check orientation, index ranges, and the edge-manifold property.

    Raises TopologyError on any violation.  Every generated or ingested mesh
    goes through here exactly once.
    """
    V = mesh.num_vertices
    if mesh.triangles.min(initial=0) < 0 or mesh.triangles.max(initial=-1) >= V:
        raise TopologyError("triangle vertex index out of range")
    if mesh.boundary_edges.size and (
        mesh.boundary_edges.min() < 0 or mesh.boundary_edges.max() >= V
    ):
        raise TopologyError("boundary edge vertex index out of range")
    areas = signed_areas(mesh.vertices, mesh.triangles)
    if np.any(areas <= 0):
        bad = int(np.argmax(areas <= 0))
        raise TopologyError(f"triangle {bad} is not counterclockwise (area {areas[bad]:g})")
    edges, counts = _edge_counts(mesh.triangles)
    if np.any(counts > 2):
        raise TopologyError("an edge is shared by more than two triangles")
    # every edge marked as boundary must belong to exactly one triangle
    boundary = edges[counts == 1]
    bset = {tuple(e) for e in boundary}
    given = np.sort(mesh.boundary_edges, axis=1)
    for e in given:
        if tuple(e) not in bset:
            raise TopologyError(f"edge {tuple(e)} tagged as boundary but interior to the mesh")
    if len(bset) != len(given):
        raise TopologyError("mesh boundary has untagged edges")
    return mesh


def _orient_ccw(vertices, triangles):
    """Flip clockwise triangles in place; returns the number of flips."""
    areas = signed_areas(vertices, triangles)
    flip = areas < 0
    if np.any(flip):
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
    return int(flip.sum())


def generate_unit_square(m):
    """Structured triangulation of [0,1]^2 with m cells per side.

    (m+1)^2 vertices on a uniform grid in row-major order (y-rows outer),
    every cell split along the same diagonal, 2 m^2 triangles, all four
    sides tagged "wall".
    """
    if m < 1:
        raise ValueError("m must be a positive integer")
    return generate_rect_union([(0.0, 0.0, 1.0, 1.0)], 1.0 / m, rules=[("wall", lambda x, y: True)])


def default_rect_rules(rects):
    """Default tagging: inlet on the left extreme, outlet on the right, wall elsewhere."""
    xmin = min(r[0] for r in rects)
    xmax = max(r[2] for r in rects)
    return [
        ("inlet", lambda x, y: abs(x - xmin) <= SNAP_TOL),
        ("outlet", lambda x, y: abs(x - xmax) <= SNAP_TOL),
        ("wall", lambda x, y: True),
    ]


def generate_rect_union(rects, h, rules=None):
    """Structured triangulation of a union of axis-aligned rectangles.

    rects : list of (x0, y0, x1, y1); interiors must not overlap and every
            rectangle edge must land on the global h-grid within 1e-9.
    h     : grid spacing.
    rules : list of (tag name, predicate(x, y)); the first predicate matching
            a boundary-edge midpoint assigns its tag.

    Raises NonConformingSpec for misaligned or overlapping rectangles, or if
    the union is not edge-connected.
    """
    rects = [tuple(float(c) for c in r) for r in rects]
    for (x0, y0, x1, y1) in rects:
        if not (x1 > x0 and y1 > y0):
            raise NonConformingSpec(f"degenerate rectangle {(x0, y0, x1, y1)}")
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            a, b = rects[i], rects[j]
            ox = min(a[2], b[2]) - max(a[0], b[0])
            oy = min(a[3], b[3]) - max(a[1], b[1])
            if ox > SNAP_TOL and oy > SNAP_TOL:
                raise NonConformingSpec(f"rectangles {i} and {j} overlap in their interiors")

    gx0 = min(r[0] for r in rects)
    gy0 = min(r[1] for r in rects)
    gx1 = max(r[2] for r in rects)
    gy1 = max(r[3] for r in rects)

    def snap(c, origin):
        k = (c - origin) / h
        ki = round(k)
        if abs(k - ki) * h > SNAP_TOL:
            raise NonConformingSpec(f"coordinate {c} does not align with the h={h} grid")
        return int(ki)

    nx = snap(gx1, gx0)
    ny = snap(gy1, gy0)
    irects = [(snap(r[0], gx0), snap(r[1], gy0), snap(r[2], gx0), snap(r[3], gy0)) for r in rects]

    inside = np.zeros((ny, nx), dtype=bool)  # cell (j, i)
    for (i0, j0, i1, j1) in irects:
        inside[j0:j1, i0:i1] = True
    if not inside.any():
        raise NonConformingSpec("empty cell set")

    # connectivity of the included cells through shared edges
    stack = [tuple(np.argwhere(inside)[0])]
    seen = {stack[0]}
    while stack:
        j, i = stack.pop()
        for dj, di in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nj, ni = j + dj, i + di
            if 0 <= nj < ny and 0 <= ni < nx and inside[nj, ni] and (nj, ni) not in seen:
                seen.add((nj, ni))
                stack.append((nj, ni))
    if len(seen) != int(inside.sum()):
        raise NonConformingSpec("rectangle union is not connected")

    # vertices used by at least one included cell, numbered row-major
    vused = np.zeros((ny + 1, nx + 1), dtype=bool)
    cj, ci = np.nonzero(inside)
    for dj in (0, 1):
        for di in (0, 1):
            vused[cj + dj, ci + di] = True
    vindex = -np.ones((ny + 1, nx + 1), dtype=np.int64)
    vindex[vused] = np.arange(int(vused.sum()))
    jj, ii = np.nonzero(vused)
    vertices = np.column_stack([gx0 + ii * h, gy0 + jj * h]).astype(float)

    v00 = vindex[cj, ci]
    v10 = vindex[cj, ci + 1]
    v01 = vindex[cj + 1, ci]
    v11 = vindex[cj + 1, ci + 1]
    tris = np.empty((2 * len(cj), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])

    edges, counts = _edge_counts(tris)
    bedges = edges[counts == 1]

    if rules is None:
        rules = default_rect_rules(rects)
    names = [name for name, _ in rules]
    tags = {k + 1: name for k, name in enumerate(names)}
    mids = 0.5 * (vertices[bedges[:, 0]] + vertices[bedges[:, 1]])
    btags = np.zeros(len(bedges), dtype=np.int64)
    for k in range(len(bedges)):
        for t, (_, pred) in enumerate(rules):
            if pred(mids[k, 0], mids[k, 1]):
                btags[k] = t + 1
                break
        else:
            raise NonConformingSpec("boundary edge matched no tagging rule")
    used = set(btags.tolist())
    tags = {tid: name for tid, name in tags.items() if tid in used}

    mesh = Mesh(vertices, tris, bedges, btags, tags)
    return validate_mesh(mesh)


@dataclass
class DomainSpec:
    """Mesh source: exactly one of a structured generator or an external file."""

    kind: str  # "unit_square" | "rect_union" | "external_file"
    m: int = 0
    rects: list = field(default_factory=list)
    h: float = 0.0
    path: str = ""
    rules: list = None

    def build(self):
        if self.kind == "unit_square":
            return generate_unit_square(self.m)
        if self.kind == "rect_union":
            return generate_rect_union(self.rects, self.h, rules=self.rules)
        if self.kind == "external_file":
            return read_msh(self.path)
        raise ValueError(f"unknown domain kind {self.kind!r}")


def mesh_metrics(mesh):
    """h_max/h_min (circumscribed diameters), total area, and V/E/T counts."""
    p0 = mesh.vertices[mesh.triangles[:, 0]]
    p1 = mesh.vertices[mesh.triangles[:, 1]]
    p2 = mesh.vertices[mesh.triangles[:, 2]]
    a = np.linalg.norm(p1 - p0, axis=1)
    b = np.linalg.norm(p2 - p1, axis=1)
    c = np.linalg.norm(p0 - p2, axis=1)
    area = signed_areas(mesh.vertices, mesh.triangles)
    circum = a * b * c / (2.0 * area)
    return {
        "h_max": float(circum.max()),
        "h_min": float(circum.min()),
        "area_total": float(area.sum()),
        "V": mesh.num_vertices,
        "E": len(mesh.edge_array()),
        "T": mesh.num_triangles,
    }


# ---------------------------------------------------------------------------
# MSH 2.2 subset: $MeshFormat / $PhysicalNames / $Nodes / $Elements with
# 2-node boundary lines (element type 1) and 3-node triangles (type 2).
# ---------------------------------------------------------------------------


class _Lines:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self):
        while self.pos < len(self.lines):
            raw = self.lines[self.pos]
            self.pos += 1
            line = raw.strip()
            if line:
                return line
        raise ParseError(self.pos, "unexpected end of file")

    @property
    def lineno(self):
        return self.pos


def read_msh(path):
    """Read a mesh from the supported MSH-2.2 ASCII subset.

    Boundary tags are taken from the physical groups of the line elements;
    physical names, when present, populate the tag-name map.  Triangle
    orientation is normalized to counterclockwise.
    """
    with open(path, "r") as f:
        text = f.read()
    src = _Lines(text)

    nodes = {}
    node_order = []
    tris = []
    bedges = []
    btags = []
    names = {}
    saw_nodes = saw_elements = False

    while True:
        try:
            line = src.next()
        except ParseError:
            break
        if not line.startswith("$"):
            raise ParseError(src.lineno, f"expected a section header, got {line!r}")
        section = line[1:]
        if section == "MeshFormat":
            fmt = src.next().split()
            if not fmt or not fmt[0].startswith("2."):
                raise ParseError(src.lineno, f"unsupported MSH version {fmt[:1]}")
            _expect_end(src, "MeshFormat")
        elif section == "PhysicalNames":
            try:
                count = int(src.next())
            except ValueError:
                raise ParseError(src.lineno, "bad PhysicalNames count")
            for _ in range(count):
                parts = src.next().split(None, 2)
                if len(parts) < 3:
                    raise ParseError(src.lineno, "malformed physical name")
                names[int(parts[1])] = parts[2].strip().strip('"')
            _expect_end(src, "PhysicalNames")
        elif section == "Nodes":
            saw_nodes = True
            try:
                count = int(src.next())
            except ValueError:
                raise ParseError(src.lineno, "bad node count")
            for _ in range(count):
                parts = src.next().split()
                if len(parts) < 3:
                    raise ParseError(src.lineno, "malformed node line")
                nid = int(parts[0])
                nodes[nid] = (float(parts[1]), float(parts[2]))
                node_order.append(nid)
            _expect_end(src, "Nodes")
        elif section == "Elements":
            saw_elements = True
            try:
                count = int(src.next())
            except ValueError:
                raise ParseError(src.lineno, "bad element count")
            for _ in range(count):
                parts = [int(p) for p in src.next().split()]
                if len(parts) < 3:
                    raise ParseError(src.lineno, "malformed element line")
                etype, ntags = parts[1], parts[2]
                tags, conn = parts[3:3 + ntags], parts[3 + ntags:]
                if etype == 1:
                    if len(conn) != 2:
                        raise ParseError(src.lineno, "line element needs 2 nodes")
                    bedges.append(conn)
                    btags.append(tags[0] if tags else 0)
                elif etype == 2:
                    if len(conn) != 3:
                        raise ParseError(src.lineno, "triangle element needs 3 nodes")
                    tris.append(conn)
                else:
                    raise ParseError(src.lineno, f"unsupported element type {etype}")
            _expect_end(src, "Elements")
        else:
            # skip unknown sections verbatim
            end = f"End{section}"
            while True:
                if src.next() == f"${end}":
                    break

    if not saw_nodes or not saw_elements:
        raise ParseError(src.lineno, "missing $Nodes or $Elements section")
    if not tris:
        raise ParseError(src.lineno, "mesh contains no triangles")

    index = {nid: k for k, nid in enumerate(node_order)}
    vertices = np.array([nodes[nid] for nid in node_order], dtype=float)
    triangles = np.array([[index[n] for n in t] for t in tris], dtype=np.int64)
    boundary_edges = np.array([[index[n] for n in e] for e in bedges], dtype=np.int64)
    boundary_edges = boundary_edges.reshape(-1, 2)
    boundary_tags = np.asarray(btags, dtype=np.int64)

    _orient_ccw(vertices, triangles)
    tagset = set(boundary_tags.tolist())
    tags = {t: names.get(t, f"boundary_{t}") for t in sorted(tagset)}
    mesh = Mesh(vertices, triangles, boundary_edges, boundary_tags, tags)
    return validate_mesh(mesh)


def _expect_end(src, section):
    line = src.next()
    if line != f"$End{section}":
        raise ParseError(src.lineno, f"expected $End{section}, got {line!r}")


def write_msh(mesh, path):
    """Write a mesh in the same MSH-2.2 subset read_msh understands."""
    with open(path, "w") as f:
        f.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        if mesh.tags:
            f.write("$PhysicalNames\n%d\n" % len(mesh.tags))
            for tid in sorted(mesh.tags):
                f.write('1 %d "%s"\n' % (tid, mesh.tags[tid]))
            f.write("$EndPhysicalNames\n")
        f.write("$Nodes\n%d\n" % mesh.num_vertices)
        for k, (x, y) in enumerate(mesh.vertices, start=1):
            f.write("%d %.17g %.17g 0\n" % (k, x, y))
        f.write("$EndNodes\n")
        ne = len(mesh.boundary_edges) + mesh.num_triangles
        f.write("$Elements\n%d\n" % ne)
        eid = 1
        for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags):
            f.write("%d 1 2 %d %d %d %d\n" % (eid, t, t, a + 1, b + 1))
            eid += 1
        for (a, b, c) in mesh.triangles:
            f.write("%d 2 2 0 0 %d %d %d\n" % (eid, a + 1, b + 1, c + 1))
            eid += 1
        f.write("$EndElements\n")
