"""Triangulation of the flow domain (hold-all rectangle minus shape interiors).

Boundary tag numbering::

    1  Inflow      (left side,   x = x_min)
    2  Outflow     (right side,  x = x_max)
    3  WallTop     (top side,    y = y_max)
    4  WallBottom  (bottom side, y = y_min)
    100 + 1000*j + l   Shape(j, l): segment l of shape j, both 1-based

Shape boundary nodes are given to the generator as fixed vertices and no
Steiner points are allowed on any boundary segment, so the shape polylines
appear in the mesh node-for-node.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import triangle

from .geometry import (
    DomainSpec,
    GeometryError,
    GluedShape,
    MultiShape,
    ShapeKind,
    validate_multishape,
)

INFLOW, OUTFLOW, WALL_TOP, WALL_BOTTOM = 1, 2, 3, 4
OUTER_TAGS = (INFLOW, OUTFLOW, WALL_TOP, WALL_BOTTOM)
TAG_NAMES = {INFLOW: "Inflow", OUTFLOW: "Outflow", WALL_TOP: "WallTop", WALL_BOTTOM: "WallBottom"}
FLUID_TAG = 10

DEFAULT_QUALITY_THRESHOLD = 0.2


def shape_tag(j: int, l: int) -> int:
    """Tag of segment ``l`` of shape ``j`` (both 1-based)."""
    return 100 + 1000 * j + l


def decode_shape_tag(tag: int) -> tuple[int, int]:
    return (tag - 100) // 1000, (tag - 100) % 1000


class MeshError(RuntimeError):
    pass


class MeshInvertedError(MeshError):
    def __init__(self, msg: str = "mesh inverted"):
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray  # (V, 2)
    triangles: np.ndarray  # (T, 3), counter-clockwise
    boundary_edges: np.ndarray  # (B, 2)
    edge_tags: np.ndarray  # (B,)
    shape_nodes: tuple[np.ndarray, ...]  # per shape: mesh node of each loop node
    generation: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_holes(self) -> int:
        return len(self.shape_nodes)

    @property
    def outer_nodes(self) -> np.ndarray:
        mask = np.isin(self.edge_tags, OUTER_TAGS)
        return np.unique(self.boundary_edges[mask])

    @property
    def shape_boundary_nodes(self) -> np.ndarray:
        if not self.shape_nodes:
            return np.empty(0, dtype=int)
        return np.unique(np.concatenate(self.shape_nodes))

    def tag_nodes(self, tag: int) -> np.ndarray:
        return np.unique(self.boundary_edges[self.edge_tags == tag])

    def boundary_node_map(self) -> dict[int, tuple]:
        """Boundary node -> ``("shape", j, l)`` (1-based) or ``("outer", tag)``.

        A node on two sides (a corner or a kink between segments) reports the
        first edge that touches it.
        """
        out: dict[int, tuple] = {}
        for (a, b), tag in zip(self.boundary_edges, self.edge_tags):
            label = ("outer", int(tag)) if tag in OUTER_TAGS else ("shape", *decode_shape_tag(int(tag)))
            out.setdefault(int(a), label)
            out.setdefault(int(b), label)
        return out

    def signed_areas(self) -> np.ndarray:
        return triangle_signed_areas(self.nodes, self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted (deterministic order)."""
        t = self.triangles
        e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_nodes - len(self.edges()) + len(self.triangles)


def triangle_signed_areas(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p0, p1, p2 = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


def _outer_boundary(spec: DomainSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    (x0, y0), (x1, y1) = spec.lower, spec.upper
    nx = max(1, math.ceil((x1 - x0) / spec.h))
    ny = max(1, math.ceil((y1 - y0) / spec.h))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    # counter-clockwise: bottom, right, top, left
    bottom = np.column_stack([xs[:-1], np.full(nx, y0)])
    right = np.column_stack([np.full(ny, x1), ys[:-1]])
    top = np.column_stack([xs[::-1][:-1], np.full(nx, y1)])
    left = np.column_stack([np.full(ny, x0), ys[::-1][:-1]])
    pts = np.vstack([bottom, right, top, left])
    m = len(pts)
    segs = np.column_stack([np.arange(m), (np.arange(m) + 1) % m])
    tags = np.concatenate(
        [np.full(nx, WALL_BOTTOM), np.full(ny, OUTFLOW), np.full(nx, WALL_TOP), np.full(ny, INFLOW)]
    )
    return pts, segs, tags


def _interior_point(loop: np.ndarray) -> np.ndarray:
    m = len(loop)
    seg = np.column_stack([np.arange(m), (np.arange(m) + 1) % m])
    t = triangle.triangulate({"vertices": loop, "segments": seg}, "pQ")
    tri = t["triangles"][0]
    return t["vertices"][tri].mean(axis=0)


def generate_mesh(spec: DomainSpec, shapes: MultiShape, generation: int = 0) -> TriMesh:
    """Constrained quality Delaunay mesh of the hold-all minus the shapes."""
    problems = validate_multishape(shapes, spec.lower, spec.upper)
    if problems:
        raise GeometryError("; ".join(problems))
    verts, segs, tags = _outer_boundary(spec)
    all_verts, all_segs, all_tags = [verts], [segs], [tags]
    holes, shape_nodes = [], []
    offset = len(verts)
    for j, sh in enumerate(shapes.shapes, start=1):
        loop = sh.loop
        m = len(loop)
        idx = offset + np.arange(m)
        shape_nodes.append(idx)
        all_verts.append(loop)
        all_segs.append(np.column_stack([idx, np.roll(idx, -1)]))
        all_tags.append(shape_tag(j, 1) + sh.segment_of_loop_edges())
        holes.append(_interior_point(loop))
        offset += m
    pslg = {
        "vertices": np.vstack(all_verts),
        "segments": np.vstack(all_segs),
        "segment_markers": np.concatenate(all_tags).astype(np.int32)[:, None],
    }
    if holes:
        pslg["holes"] = np.array(holes)
    max_area = math.sqrt(3) / 4 * spec.h**2
    try:
        out = triangle.triangulate(pslg, f"pq30YQa{max_area:.12g}")
    except Exception as exc:  # pragma: no cover - triangle aborts are rare
        raise MeshError(f"mesh generator failed: {exc}") from exc
    nodes = np.asarray(out["vertices"], dtype=float)
    n_in = len(pslg["vertices"])
    if len(nodes) < n_in or not np.array_equal(nodes[:n_in], pslg["vertices"]):
        raise MeshError("mesh generator reordered or dropped boundary vertices")
    tris = np.asarray(out["triangles"], dtype=np.int64)
    area = triangle_signed_areas(nodes, tris)
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    mesh = TriMesh(
        nodes=nodes,
        triangles=tris,
        boundary_edges=pslg["segments"].astype(np.int64),
        edge_tags=pslg["segment_markers"][:, 0].astype(np.int64),
        shape_nodes=tuple(shape_nodes),
        generation=generation,
    )
    _check_mesh(mesh)
    return mesh


def _check_mesh(mesh: TriMesh) -> None:
    if np.any(mesh.signed_areas() <= 0):
        raise MeshError("generated mesh has degenerate triangles")
    expected = 1 - mesh.n_holes
    chi = mesh.euler_characteristic()
    if chi != expected:
        raise MeshError(f"Euler characteristic {chi} != {expected}")
    t = mesh.triangles
    e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: edge shared by more than two triangles")
    bnd = {tuple(r) for r in uniq[counts == 1]}
    tagged = {tuple(sorted(r)) for r in mesh.boundary_edges.tolist()}
    if bnd != tagged:
        raise MeshError("boundary tags do not partition the mesh boundary")


@dataclass(frozen=True)
class MeshQualityReport:
    quality: np.ndarray
    minimum: float
    histogram: np.ndarray
    bin_edges: np.ndarray


def triangle_quality(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Normalized radius ratio ``2 r_in / r_circ``: 1 equilateral, 0 degenerate."""
    p = nodes[tris]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    area = np.abs(triangle_signed_areas(nodes, tris))
    denom = (a + b + c) * a * b * c
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(denom > 0, 16.0 * area**2 / denom, 0.0)
    return np.clip(q, 0.0, 1.0)


def mesh_quality(mesh: TriMesh, bins: int = 10) -> MeshQualityReport:
    q = triangle_quality(mesh.nodes, mesh.triangles)
    hist, edges = np.histogram(q, bins=bins, range=(0.0, 1.0))
    return MeshQualityReport(q, float(q.min()) if len(q) else 1.0, hist, edges)


def deform_mesh(mesh: TriMesh, field: np.ndarray, scale: float) -> TriMesh:
    """Move every node by ``scale * field`` (perturbation of identity)."""
    field = np.asarray(field, dtype=float)
    if field.shape != mesh.nodes.shape:
        raise ValueError(f"deformation has shape {field.shape}, mesh nodes {mesh.nodes.shape}")
    nodes = mesh.nodes + scale * field
    if not np.all(np.isfinite(nodes)) or np.any(triangle_signed_areas(nodes, mesh.triangles) <= 0):
        raise MeshInvertedError()
    return dataclasses.replace(mesh, nodes=nodes)


def shapes_from_mesh(mesh: TriMesh, shapes: MultiShape) -> MultiShape:
    """Current shape polylines read off the mesh's boundary nodes."""
    return shapes.with_loops([mesh.nodes[idx] for idx in mesh.shape_nodes])


def remesh(shapes: MultiShape, spec: DomainSpec, previous: TriMesh | None = None) -> TriMesh:
    """Fresh triangulation from the current shape polylines."""
    gen = previous.generation + 1 if previous is not None else 1
    return generate_mesh(spec, shapes, generation=gen)


# --- file interfaces ----------------------------------------------------------


def write_msh(path: str | Path, mesh: TriMesh) -> None:
    """Gmsh MSH 2.2 ASCII with physical tags on boundary lines and triangles."""
    import meshio

    pts = np.column_stack([mesh.nodes, np.zeros(mesh.n_nodes)])
    line_tags = mesh.edge_tags.astype(int)
    tri_tags = np.full(len(mesh.triangles), FLUID_TAG)
    m = meshio.Mesh(
        pts,
        [("line", mesh.boundary_edges), ("triangle", mesh.triangles)],
        cell_data={"gmsh:physical": [line_tags, tri_tags], "gmsh:geometrical": [line_tags, tri_tags]},
    )
    meshio.write(str(path), m, file_format="gmsh22", binary=False)


def read_msh(path: str | Path) -> tuple[TriMesh, MultiShape]:
    """Inverse of :func:`write_msh`; shapes are rebuilt from the segment tags."""
    import meshio

    m = meshio.read(str(path), file_format="gmsh")
    nodes = np.asarray(m.points[:, :2], dtype=float)
    lines, line_tags, tris = [], [], []
    for block, tags in zip(m.cells, m.cell_data["gmsh:physical"]):
        if block.type == "line":
            lines.append(block.data)
            line_tags.append(tags)
        elif block.type == "triangle":
            tris.append(block.data)
    edges = np.vstack(lines).astype(np.int64)
    etags = np.concatenate(line_tags).astype(np.int64)
    tris = np.vstack(tris).astype(np.int64)
    flip = triangle_signed_areas(nodes, tris) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    shape_nodes, shapes = [], []
    js = sorted({decode_shape_tag(t)[0] for t in etags if t >= 100})
    first_id = 0
    for j in js:
        sel = np.flatnonzero((etags >= 100) & ((etags - 100) // 1000 == j))
        succ = {int(edges[i, 0]): (int(edges[i, 1]), int(decode_shape_tag(etags[i])[1])) for i in sel}
        start = int(edges[sel[0], 0])
        loop_nodes, seg_of_edge, cur = [], [], start
        while True:
            loop_nodes.append(cur)
            cur, l = succ[cur]
            seg_of_edge.append(l)
            if cur == start:
                break
        seg_of_edge = np.array(seg_of_edge)
        # rotate so the loop starts at a segment boundary
        change = np.flatnonzero(seg_of_edge != np.roll(seg_of_edge, 1))
        shift = int(change[0]) if len(change) else 0
        loop_nodes = np.roll(np.array(loop_nodes), -shift)
        seg_of_edge = np.roll(seg_of_edge, -shift)
        breaks = [0] + [int(i) for i in np.flatnonzero(np.diff(seg_of_edge)) + 1]
        loop = nodes[loop_nodes]
        if len(breaks) == 1:
            sh = GluedShape.from_loop(loop, kind=ShapeKind.SINGLE_CLOSED, first_id=first_id)
        else:
            sh = GluedShape.from_loop(loop, breaks, first_id=first_id)
        first_id += sh.n
        shapes.append(sh)
        shape_nodes.append(loop_nodes)
    mesh = TriMesh(nodes, tris, edges, etags, tuple(shape_nodes))
    return mesh, MultiShape(tuple(shapes))


def write_vtk(path: str | Path, mesh: TriMesh, point_data: dict[str, np.ndarray] | None = None) -> None:
    """Legacy VTK 2.0 ASCII unstructured grid; 2-vectors are padded to 3D."""
    V, T = mesh.n_nodes, len(mesh.triangles)
    lines = ["# vtk DataFile Version 2.0", "shapeopt", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {V} double")
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.nodes.tolist()]
    lines.append(f"CELLS {T} {4 * T}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines.append(f"CELL_TYPES {T}")
    lines += ["5"] * T
    if point_data:
        lines.append(f"POINT_DATA {V}")
        for name, arr in point_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [repr(v) for v in arr.tolist()]
            else:
                if arr.shape[1] == 2:
                    arr = np.column_stack([arr, np.zeros(len(arr))])
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(repr(v) for v in row) for row in arr.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
