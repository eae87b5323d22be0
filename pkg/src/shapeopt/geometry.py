"""Boundary representation of piecewise-smooth multi-shapes.

A shape is a closed loop glued together from open polyline segments. Each
segment is one factor of the product shape space; the junction nodes between
consecutive segments are the places where kinks may form. Gluing is
structural: a :class:`GluedShape` built with :meth:`GluedShape.from_loop`
stores one merged loop of nodes and every segment is a slice of it, so a
segment's last node *is* the next segment's first node.

Geometric functionals (area, barycenter) and their exact node gradients live
here as well; the optimizer uses them for the constraint terms.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid or degenerate shape input."""


class Point2(NamedTuple):
    x: float
    y: float


class ShapeKind(enum.Enum):
    SINGLE_CLOSED = "SingleClosed"
    GLUED_OPEN = "GluedOpen"


@dataclass(frozen=True)
class OpenCurveSegment:
    """Polyline discretization of one open-curve factor."""

    id: int
    nodes: np.ndarray  # (m, 2)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise GeometryError(f"segment {self.id}: nodes must have shape (m, 2)")
        object.__setattr__(self, "nodes", nodes)


@dataclass(frozen=True)
class GluedShape:
    """One closed shape made of ``n`` segments.

    ``segments`` is kept exactly as given so that :func:`validate_multishape`
    can report gluing defects in hand-built input. Shapes produced by this
    package always come from :meth:`from_loop` and are glued by construction.
    """

    segments: tuple[OpenCurveSegment, ...]
    kind: ShapeKind = ShapeKind.GLUED_OPEN

    @property
    def n(self) -> int:
        return len(self.segments)

    @classmethod
    def from_loop(
        cls,
        loop: np.ndarray,
        breaks: Sequence[int] | None = None,
        kind: ShapeKind = ShapeKind.GLUED_OPEN,
        first_id: int = 0,
    ) -> "GluedShape":
        """Build a shape from a merged loop (no repeated closing node).

        ``breaks`` are the loop indices where segments start; segment ``l``
        runs from ``breaks[l]`` to ``breaks[l + 1]`` (cyclically). For
        ``SINGLE_CLOSED`` the whole loop is one segment that returns to its
        first node.
        """
        loop = np.asarray(loop, dtype=float)
        m = len(loop)
        if kind is ShapeKind.SINGLE_CLOSED:
            seg = OpenCurveSegment(first_id, np.vstack([loop, loop[:1]]))
            return cls((seg,), kind)
        if breaks is None:
            breaks = range(m)
        breaks = list(breaks)
        if not breaks or breaks[0] != 0 or any(b >= a for a, b in zip(breaks[1:], breaks)):
            raise GeometryError("segment breaks must start at 0 and increase")
        segs = []
        for l, start in enumerate(breaks):
            stop = breaks[l + 1] if l + 1 < len(breaks) else m
            idx = [i % m for i in range(start, stop + 1)]
            segs.append(OpenCurveSegment(first_id + l, loop[idx]))
        return cls(tuple(segs), kind)

    @property
    def breaks(self) -> list[int]:
        out, pos = [], 0
        for seg in self.segments:
            out.append(pos)
            pos += len(seg.nodes) - 1
        return out

    @property
    def loop(self) -> np.ndarray:
        """Merged loop of nodes, each glued node appearing once."""
        return np.vstack([seg.nodes[:-1] for seg in self.segments])

    def with_loop(self, loop: np.ndarray) -> "GluedShape":
        """Same segment structure, new node positions."""
        loop = np.asarray(loop, dtype=float)
        if loop.shape != (self.loop_size, 2):
            raise GeometryError("loop size does not match shape")
        first_id = self.segments[0].id
        if self.kind is ShapeKind.SINGLE_CLOSED:
            return GluedShape.from_loop(loop, kind=self.kind, first_id=first_id)
        return GluedShape.from_loop(loop, self.breaks, self.kind, first_id)

    @property
    def loop_size(self) -> int:
        return sum(len(seg.nodes) - 1 for seg in self.segments)

    def segment_of_loop_edges(self) -> np.ndarray:
        """Segment index (0-based) of loop edge ``i -> i+1``."""
        return np.concatenate(
            [np.full(len(seg.nodes) - 1, l) for l, seg in enumerate(self.segments)]
        )


@dataclass(frozen=True)
class MultiShape:
    shapes: tuple[GluedShape, ...]

    @property
    def s(self) -> int:
        return len(self.shapes)

    @property
    def N(self) -> int:
        return sum(sh.n for sh in self.shapes)

    @property
    def k(self) -> list[int]:
        """1-based start index of each shape's first factor."""
        starts, pos = [], 1
        for sh in self.shapes:
            starts.append(pos)
            pos += sh.n
        return starts

    def with_loops(self, loops: Sequence[np.ndarray]) -> "MultiShape":
        return MultiShape(tuple(sh.with_loop(lp) for sh, lp in zip(self.shapes, loops)))


@dataclass(frozen=True)
class ShapeGenerator:
    """Recipe for one benchmark shape: a circle sampled at kink nodes.

    ``kinks`` equally spaced nodes are joined by straight chords, each chord
    split into ``pieces`` segments. ``kinks == 0`` means a smooth-looking
    ``pieces``-gon inscribed in the circle, every side its own factor.
    """

    center: Point2
    radius: float
    kinks: int = 12
    pieces: int = 5

    @property
    def n_factors(self) -> int:
        return self.pieces if self.kinks == 0 else self.kinks * self.pieces


@dataclass(frozen=True)
class DomainSpec:
    lower: Point2 = Point2(0.0, 0.0)
    upper: Point2 = Point2(1.0, 1.0)
    shapes: tuple[ShapeGenerator, ...] = field(
        default_factory=lambda: (
            ShapeGenerator(Point2(0.3, 0.3), 0.1, kinks=12, pieces=5),
            ShapeGenerator(Point2(0.45, 0.75), 0.1, kinks=0, pieces=60),
        )
    )
    h: float = 0.023

    def __post_init__(self):
        if not (self.upper[0] > self.lower[0] and self.upper[1] > self.lower[1]):
            raise GeometryError("hold-all rectangle is empty")
        if self.h <= 0:
            raise GeometryError("mesh size h must be > 0")
        for gen in self.shapes:
            if not gen.radius > 0:
                raise GeometryError("shape radius must be > 0")
            if gen.pieces < 1 or gen.kinks < 0 or gen.n_factors < 3:
                raise GeometryError("shape needs at least 3 boundary factors")

    @property
    def extra_factors(self) -> list[int]:
        """``l_j``: factors beyond the kink count (12 + l_1 for the kinked shape)."""
        return [g.n_factors - g.kinks for g in self.shapes]


# --- functionals on raw loops -------------------------------------------------


def loop_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


def loop_barycenter(xy: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    if a == 0.0:
        raise GeometryError("barycenter of a shape with zero area")
    return np.array([np.sum((x + xn) * cross), np.sum((y + yn) * cross)]) / (6.0 * a)


def loop_area_gradient(xy: np.ndarray) -> np.ndarray:
    prev, nxt = np.roll(xy, 1, axis=0), np.roll(xy, -1, axis=0)
    return 0.5 * np.column_stack([nxt[:, 1] - prev[:, 1], prev[:, 0] - nxt[:, 0]])


def loop_barycenter_gradient(xy: np.ndarray) -> np.ndarray:
    """d(barycenter)/d(node) as an (m, 2, 2) array, ``out[i, a, b] = d b_a / d x_i,b``."""
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    xp, yp = np.roll(x, 1), np.roll(y, 1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    if a == 0.0:
        raise GeometryError("barycenter of a shape with zero area")
    sx = np.sum((x + xn) * cross)
    sy = np.sum((y + yn) * cross)
    # node i appears in edge (i-1, i) and edge (i, i+1)
    cross_prev = np.roll(cross, 1)
    dsx_dx = cross + cross_prev + (x + xn) * yn - (xp + x) * yp
    dsx_dy = (xp + x) * xp - (x + xn) * xn
    dsy_dx = (y + yn) * yn - (yp + y) * yp
    dsy_dy = cross + cross_prev + (yp + y) * xp - (y + yn) * xn
    ga = loop_area_gradient(xy)
    out = np.empty((len(xy), 2, 2))
    out[:, 0, 0] = dsx_dx / (6 * a) - sx * ga[:, 0] / (6 * a * a)
    out[:, 0, 1] = dsx_dy / (6 * a) - sx * ga[:, 1] / (6 * a * a)
    out[:, 1, 0] = dsy_dx / (6 * a) - sy * ga[:, 0] / (6 * a * a)
    out[:, 1, 1] = dsy_dy / (6 * a) - sy * ga[:, 1] / (6 * a * a)
    return out


def _segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Proper-or-touching intersection test for arrays of segment pairs."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    def on_seg(a, b, c):
        return (
            (np.minimum(a[..., 0], b[..., 0]) <= c[..., 0])
            & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
            & (np.minimum(a[..., 1], b[..., 1]) <= c[..., 1])
            & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1]))
        )

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    proper = (((d1 > 0) & (d2 < 0)) | ((d1 < 0) & (d2 > 0))) & (
        ((d3 > 0) & (d4 < 0)) | ((d3 < 0) & (d4 > 0))
    )
    touch = (
        ((d1 == 0) & on_seg(q1, q2, p1))
        | ((d2 == 0) & on_seg(q1, q2, p2))
        | ((d3 == 0) & on_seg(p1, p2, q1))
        | ((d4 == 0) & on_seg(p1, p2, q2))
    )
    return proper | touch


def loop_is_simple(xy: np.ndarray) -> bool:
    m = len(xy)
    if m < 3:
        return False
    if np.any(np.all(xy == np.roll(xy, -1, axis=0), axis=1)):
        return False
    a, b = xy, np.roll(xy, -1, axis=0)
    i, j = np.triu_indices(m, k=2)
    keep = ~((i == 0) & (j == m - 1))  # first and last edge share node 0
    i, j = i[keep], j[keep]
    if np.any(_segments_intersect(a[i], b[i], a[j], b[j])):
        return False
    # adjacent edges may only share their common node: reject fold-backs
    prev = np.roll(xy, 1, axis=0)
    u, v = xy - prev, b - xy
    cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    dot = np.sum(u * v, axis=1)
    return not np.any((cross == 0) & (dot < 0))


def loops_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """True if two simple loops cross, touch, or one contains the other."""
    a2, b2 = np.roll(a, -1, axis=0), np.roll(b, -1, axis=0)
    i, j = np.meshgrid(np.arange(len(a)), np.arange(len(b)), indexing="ij")
    if np.any(_segments_intersect(a[i], a2[i], b[j], b2[j])):
        return True
    return point_in_loop(a[0], b) or point_in_loop(b[0], a)


def point_in_loop(p, xy: np.ndarray) -> bool:
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    crosses = (y > p[1]) != (yn > p[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x + (p[1] - y) * (xn - x) / (yn - y)
    return bool(np.count_nonzero(crosses & (p[0] < xint)) % 2)


# --- shape-level operations ---------------------------------------------------


def _checked_loop(shape: GluedShape) -> np.ndarray:
    xy = shape.loop
    if not loop_is_simple(xy):
        raise GeometryError("degenerate shape")
    return xy


def polygon_area(shape: GluedShape) -> float:
    return loop_area(_checked_loop(shape))


def polygon_barycenter(shape: GluedShape) -> Point2:
    xy = _checked_loop(shape)
    return Point2(*map(float, loop_barycenter(xy)))


def area_gradient(shape: GluedShape) -> np.ndarray:
    """Gradient of the enclosed area w.r.t. each merged loop node, shape (m, 2)."""
    return loop_area_gradient(shape.loop)


def barycenter_gradient(shape: GluedShape) -> np.ndarray:
    """Jacobian blocks of the barycenter w.r.t. each merged loop node, shape (m, 2, 2)."""
    return loop_barycenter_gradient(shape.loop)


def validate_multishape(
    m: MultiShape, lower: Sequence[float] = (0.0, 0.0), upper: Sequence[float] = (1.0, 1.0)
) -> list[str]:
    """List every violated invariant of ``m``; empty iff valid."""
    report: list[str] = []
    loops: list[np.ndarray | None] = []
    for j, sh in enumerate(m.shapes, start=1):
        ok = True
        if sh.n < 1:
            report.append(f"shape {j} has no segments")
            loops.append(None)
            continue
        for seg in sh.segments:
            if len(seg.nodes) < 2:
                report.append(f"segment {seg.id} of shape {j} has fewer than 2 nodes")
                ok = False
            elif np.any(np.all(np.diff(seg.nodes, axis=0) == 0, axis=1)):
                report.append(f"segment {seg.id} of shape {j} has repeated consecutive nodes")
                ok = False
        if not ok:
            loops.append(None)
            continue
        if sh.kind is ShapeKind.SINGLE_CLOSED:
            if sh.n != 1:
                report.append(f"shape {j}: SingleClosed requires n = 1, got {sh.n}")
            if not np.array_equal(sh.segments[0].nodes[0], sh.segments[-1].nodes[-1]):
                report.append(f"closure violated for shape {j}")
        else:
            for h in range(sh.n - 1):
                if not np.array_equal(sh.segments[h].nodes[-1], sh.segments[h + 1].nodes[0]):
                    report.append(f"gluing violated for shape {j} between segments {h} and {h + 1}")
            if not np.array_equal(sh.segments[0].nodes[0], sh.segments[-1].nodes[-1]):
                report.append(f"closure violated for shape {j}")
        xy = sh.loop
        if not loop_is_simple(xy):
            report.append(f"shape {j} is not a simple closed polygon")
            loops.append(None)
            continue
        if loop_area(xy) <= 0:
            report.append(f"shape {j} is clockwise (non-positive area)")
        if np.any(xy <= np.asarray(lower)) or np.any(xy >= np.asarray(upper)):
            report.append(f"shape {j} is not strictly inside the hold-all domain")
        loops.append(xy)
    for a in range(len(loops)):
        for b in range(a + 1, len(loops)):
            if loops[a] is not None and loops[b] is not None and loops_intersect(loops[a], loops[b]):
                report.append(f"shapes {a + 1} and {b + 1} overlap")
    if m.N != sum(sh.n for sh in m.shapes) or (m.shapes and m.k[0] != 1):
        report.append("factor index bookkeeping inconsistent")
    return report


def build_benchmark_shapes(spec: DomainSpec) -> MultiShape:
    shapes = []
    first_id = 0
    for gen in spec.shapes:
        cx, cy = gen.center
        if gen.kinks == 0:
            t = 2 * np.pi * np.arange(gen.pieces) / gen.pieces
            loop = np.column_stack([cx + gen.radius * np.cos(t), cy + gen.radius * np.sin(t)])
        else:
            t = 2 * np.pi * np.arange(gen.kinks) / gen.kinks
            corners = np.column_stack([np.cos(t), np.sin(t)])
            nxt = np.roll(corners, -1, axis=0)
            s = np.arange(gen.pieces) / gen.pieces
            # straight chords between kink nodes, subdivided
            unit = (corners[:, None, :] * (1 - s)[None, :, None] + nxt[:, None, :] * s[None, :, None])
            loop = np.array([cx, cy]) + gen.radius * unit.reshape(-1, 2)
        shapes.append(GluedShape.from_loop(loop, first_id=first_id))
        first_id += shapes[-1].n
    multi = MultiShape(tuple(shapes))
    problems = validate_multishape(multi, spec.lower, spec.upper)
    if problems:
        raise GeometryError("; ".join(problems))
    return multi


def reorient_ccw(shape: GluedShape) -> GluedShape:
    """Reverse a clockwise shape (segments reversed, gluing kept)."""
    if loop_area(shape.loop) > 0:
        return shape
    segs = tuple(
        OpenCurveSegment(seg.id, seg.nodes[::-1].copy()) for seg in reversed(shape.segments)
    )
    return GluedShape(segs, shape.kind)


# --- CSV boundary interface ---------------------------------------------------

CSV_COLUMNS = ("shape_id", "segment_id", "node_index", "x", "y")


def write_boundary_csv(path: str | Path, m: MultiShape) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for j, sh in enumerate(m.shapes):
            for seg in sh.segments:
                for i, (x, y) in enumerate(seg.nodes):
                    w.writerow([j, seg.id, i, repr(float(x)), repr(float(y))])


def read_boundary_csv(path: str | Path, auto_reverse: bool = False) -> MultiShape:
    """Load shapes written by :func:`write_boundary_csv`.

    Clockwise shapes are an error unless ``auto_reverse`` is set.
    """
    rows: dict[int, dict[int, list[tuple[int, float, float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise GeometryError(f"boundary CSV must have columns {','.join(CSV_COLUMNS)}")
        for r in reader:
            rows.setdefault(int(r["shape_id"]), {}).setdefault(int(r["segment_id"]), []).append(
                (int(r["node_index"]), float(r["x"]), float(r["y"]))
            )
    shapes = []
    for j in sorted(rows):
        segs = []
        for sid in sorted(rows[j]):
            pts = sorted(rows[j][sid])
            segs.append(OpenCurveSegment(sid, np.array([[x, y] for _, x, y in pts])))
        kind = ShapeKind.SINGLE_CLOSED if len(segs) == 1 else ShapeKind.GLUED_OPEN
        sh = GluedShape(tuple(segs), kind)
        if loop_area(sh.loop) < 0:
            if not auto_reverse:
                raise GeometryError(f"shape {j} is clockwise; pass auto_reverse to fix")
            sh = reorient_ccw(sh)
        shapes.append(sh)
    return MultiShape(tuple(shapes))


def regular_polygon_area(n: int, r: float) -> float:
    return 0.5 * n * r * r * math.sin(2 * math.pi / n)
