import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapeopt.geometry import (
    DomainSpec,
    GeometryError,
    GluedShape,
    MultiShape,
    OpenCurveSegment,
    Point2,
    ShapeGenerator,
    ShapeKind,
    area_gradient,
    barycenter_gradient,
    build_benchmark_shapes,
    loop_area,
    loop_barycenter,
    polygon_area,
    polygon_barycenter,
    read_boundary_csv,
    regular_polygon_area,
    validate_multishape,
    write_boundary_csv,
)

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def regular_polygon(n, r=0.1, center=(0.3, 0.3)):
    t = 2 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)])


def star_polygon(rng, m=8):
    """Random simple polygon: star-shaped around the origin."""
    t = np.sort(rng.uniform(0, 2 * np.pi, m))
    r = rng.uniform(0.5, 1.5, m)
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def test_area_examples():
    assert polygon_area(GluedShape.from_loop(UNIT_SQUARE)) == pytest.approx(1.0, abs=1e-15)
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert polygon_area(GluedShape.from_loop(tri)) == pytest.approx(0.5, abs=1e-15)
    dodecagon = GluedShape.from_loop(regular_polygon(12))
    assert polygon_area(dodecagon) == pytest.approx(0.03, abs=1e-14)


def test_barycenter_examples():
    assert polygon_barycenter(GluedShape.from_loop(UNIT_SQUARE)) == pytest.approx((0.5, 0.5), abs=1e-15)
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert polygon_barycenter(GluedShape.from_loop(tri)) == pytest.approx((1 / 3, 1 / 3), abs=1e-15)
    assert polygon_barycenter(GluedShape.from_loop(regular_polygon(17))) == pytest.approx((0.3, 0.3), abs=1e-14)


def test_degenerate_shape_errors():
    bowtie = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(GeometryError, match="degenerate shape"):
        polygon_area(GluedShape.from_loop(bowtie))
    with pytest.raises(GeometryError):
        polygon_barycenter(GluedShape.from_loop(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])))


def test_area_gradient_unit_square_corner():
    g = area_gradient(GluedShape.from_loop(UNIT_SQUARE))
    assert g[0] == pytest.approx((-0.5, -0.5), abs=1e-15)


def test_gradients_under_translation_and_rotation():
    rng = np.random.default_rng(0)
    xy = star_polygon(rng)
    sh = GluedShape.from_loop(xy)
    c = np.array([0.3, -0.7])
    assert np.sum(area_gradient(sh) * c) == pytest.approx(0.0, abs=1e-14)
    db = np.einsum("iab,b->a", barycenter_gradient(sh), c)
    assert db == pytest.approx(c, abs=1e-13)
    reg = GluedShape.from_loop(regular_polygon(10))
    rot = (reg.loop - np.array([0.3, 0.3])) @ np.array([[0.0, 1.0], [-1.0, 0.0]])
    assert np.abs(np.einsum("iab,ib->a", barycenter_gradient(reg), rot)).max() < 1e-14


def fd_gradient(func, xy, step=1e-7):
    out = np.zeros(xy.shape + np.shape(func(xy)))
    for i in range(xy.shape[0]):
        for b in range(2):
            p, m = xy.copy(), xy.copy()
            p[i, b] += step
            m[i, b] -= step
            out[i, b] = (np.asarray(func(p)) - np.asarray(func(m))) / (2 * step)
    return out


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    xy = star_polygon(rng)
    sh = GluedShape.from_loop(xy)
    ga = area_gradient(sh)
    fa = fd_gradient(loop_area, xy)
    assert np.linalg.norm(ga - fa) / np.linalg.norm(fa) < 1e-6
    gb = barycenter_gradient(sh)  # [i, a, b] = d bary_a / d x_{i, b}
    fb = fd_gradient(loop_barycenter, xy).transpose(0, 2, 1)
    assert np.linalg.norm(gb - fb) / np.linalg.norm(fb) < 1e-6


def test_area_invariances():
    rng = np.random.default_rng(2)
    xy = star_polygon(rng, 9)
    a = loop_area(xy)
    assert loop_area(np.roll(xy, 3, axis=0)) == pytest.approx(a, rel=1e-13)
    assert loop_area(xy + [5.0, -2.0]) == pytest.approx(a, rel=1e-11)
    assert loop_area(xy[::-1]) == pytest.approx(-a, rel=1e-13)
    assert a > 0


def test_validate_examples():
    m = build_benchmark_shapes(DomainSpec())
    assert validate_multishape(m) == []
    open_chain = GluedShape(
        (
            OpenCurveSegment(0, [[0.2, 0.2], [0.4, 0.2]]),
            OpenCurveSegment(1, [[0.4, 0.2], [0.4, 0.4]]),
            OpenCurveSegment(2, [[0.4, 0.4], [0.2, 0.4]]),
        )
    )
    report = validate_multishape(MultiShape((open_chain,)))
    assert "closure violated for shape 1" in report
    single = GluedShape.from_loop(regular_polygon(8), kind=ShapeKind.SINGLE_CLOSED)
    assert single.n == 1
    assert validate_multishape(MultiShape((single,))) == []


def test_validate_reports_overlap_and_gluing():
    a = GluedShape.from_loop(regular_polygon(8, 0.1, (0.5, 0.5)))
    b = GluedShape.from_loop(regular_polygon(8, 0.1, (0.55, 0.5)))
    assert any("overlap" in r for r in validate_multishape(MultiShape((a, b))))
    bad = GluedShape(
        (
            OpenCurveSegment(0, [[0.2, 0.2], [0.4, 0.2]]),
            OpenCurveSegment(1, [[0.4, 0.25], [0.2, 0.2]]),
        )
    )
    assert any("gluing violated" in r for r in validate_multishape(MultiShape((bad,))))


def test_benchmark_default():
    spec = DomainSpec()
    m = build_benchmark_shapes(spec)
    assert m.s == 2
    assert m.N == 12 + 48 + 60
    assert polygon_barycenter(m.shapes[0]) == pytest.approx((0.3, 0.3), abs=1e-12)
    assert polygon_barycenter(m.shapes[1]) == pytest.approx((0.45, 0.75), abs=1e-12)
    for sh in m.shapes:
        assert polygon_area(sh) > 0


def test_benchmark_variants():
    with pytest.raises(GeometryError):
        DomainSpec(shapes=(ShapeGenerator(Point2(0.3, 0.3), 0.0),))
    spec = DomainSpec(shapes=(ShapeGenerator(Point2(0.3, 0.3), 0.1, kinks=12, pieces=1),))
    m = build_benchmark_shapes(spec)
    assert m.N == 12
    assert polygon_area(m.shapes[0]) == pytest.approx(0.03, abs=1e-14)
    assert regular_polygon_area(12, 0.1) == pytest.approx(0.03, abs=1e-15)
    with pytest.raises(GeometryError):
        build_benchmark_shapes(
            DomainSpec(
                shapes=(
                    ShapeGenerator(Point2(0.3, 0.3), 0.1),
                    ShapeGenerator(Point2(0.35, 0.3), 0.1, kinks=0, pieces=20),
                )
            )
        )
    with pytest.raises(GeometryError):
        build_benchmark_shapes(DomainSpec(shapes=(ShapeGenerator(Point2(0.05, 0.3), 0.1),)))


def test_gluing_is_structural():
    m = build_benchmark_shapes(DomainSpec())
    sh = m.shapes[0]
    moved = sh.with_loop(sh.loop + np.random.default_rng(3).normal(0, 1e-3, sh.loop.shape))
    for a, b in zip(moved.segments, moved.segments[1:] + moved.segments[:1]):
        assert np.array_equal(a.nodes[-1], b.nodes[0])


def test_boundary_csv_roundtrip(tmp_path):
    m = build_benchmark_shapes(DomainSpec())
    path = tmp_path / "b.csv"
    write_boundary_csv(path, m)
    back = read_boundary_csv(path)
    assert back.N == m.N
    for a, b in zip(m.shapes, back.shapes):
        assert np.array_equal(a.loop, b.loop)


def test_boundary_csv_clockwise(tmp_path):
    cw = MultiShape((GluedShape.from_loop(regular_polygon(8)[::-1]),))
    path = tmp_path / "cw.csv"
    write_boundary_csv(path, cw)
    with pytest.raises(GeometryError, match="clockwise"):
        read_boundary_csv(path)
    fixed = read_boundary_csv(path, auto_reverse=True)
    assert polygon_area(fixed.shapes[0]) > 0


@settings(max_examples=50, deadline=None)
@given(
    st.integers(4, 20),
    st.floats(0.01, 10.0),
    st.floats(-5, 5),
    st.floats(-5, 5),
)
def test_regular_polygon_properties(n, r, cx, cy):
    sh = GluedShape.from_loop(regular_polygon(n, r, (cx, cy)))
    assert polygon_area(sh) == pytest.approx(regular_polygon_area(n, r), rel=1e-10)
    b = polygon_barycenter(sh)
    assert math.hypot(b.x - cx, b.y - cy) < 1e-10 * (1 + r + abs(cx) + abs(cy))
