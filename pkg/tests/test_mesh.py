import math

import numpy as np
import pytest

from cutflux.geometry import make_feature, regular_polygon
from cutflux.mesh import (
    CUT,
    DIRICHLET,
    INACTIVE,
    NEUMANN,
    UNCUT,
    FullyTrimmedVertexError,
    Mesh,
    build_structured_mesh,
    classify_active,
    conformity_audit,
    hat_function,
    patch,
    refine,
    uniform_refine,
)

UNIT = (0.0, 0.0, 1.0, 1.0)


def test1_feature(status="included"):
    return make_feature(1, regular_polygon((0.2, 0.2), 0.04, 20, 0.0),
                        domain=UNIT, status=status)


class TestStructuredMesh:
    def test_two_by_two_counts(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 2)
        assert mesh.n_triangles == 8
        assert mesh.n_vertices == 9

    def test_paper_grid_counts(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 20)
        assert mesh.n_vertices == 441
        assert mesh.n_triangles == 800
        assert np.count_nonzero(mesh.dirichlet_vertices()) == 80

    def test_big_domain_grid(self):
        mesh = build_structured_mesh((-1, -1, 1, 1), math.sqrt(2) / 10)
        assert mesh.n_vertices == 441
        assert mesh.n_triangles == 800

    def test_diameter_bound(self):
        h = 0.21
        mesh = build_structured_mesh(UNIT, h)
        assert mesh.diameters.max() <= h * (1 + 1e-9)

    def test_boundary_tagging(self):
        mesh = build_structured_mesh(UNIT, 0.5, dirichlet_sides=("bottom", "top"))
        tags = set(mesh.boundary_tag.values())
        assert tags == {DIRICHLET, NEUMANN}
        for (a, b), tag in mesh.boundary_tag.items():
            ya, yb = mesh.vertices[a][1], mesh.vertices[b][1]
            if tag == DIRICHLET:
                assert ya == yb and ya in (0.0, 1.0)

    def test_conforming(self):
        conformity_audit(build_structured_mesh(UNIT, 0.3))


class TestRefine:
    def test_empty_marking_is_identity(self):
        mesh = build_structured_mesh(UNIT, 0.8)
        assert refine(mesh, []) is mesh

    def test_single_mark_stays_conforming(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 2)
        out = refine(mesh, [0])
        conformity_audit(out)
        assert out.n_triangles > mesh.n_triangles

    def test_mark_all_doubles(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 4)
        out = refine(mesh, range(mesh.n_triangles))
        assert out.n_triangles == 2 * mesh.n_triangles
        conformity_audit(out)

    def test_min_angle_over_ten_rounds(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 2)
        rng = np.random.default_rng(3)
        for _ in range(10):
            marked = rng.choice(mesh.n_triangles, size=max(1, mesh.n_triangles // 5),
                                replace=False)
            mesh = refine(mesh, marked)
            conformity_audit(mesh)
        assert mesh.min_angle() >= 20.0

    def test_boundary_tags_inherited(self):
        mesh = build_structured_mesh(UNIT, 0.8, dirichlet_sides=("left",))
        out = uniform_refine(mesh, 2)
        conformity_audit(out)
        for e in out.boundary_edges():
            a, b = out.edges[e]
            xa, xb = out.vertices[a][0], out.vertices[b][0]
            tag = out.edge_tag(int(e))
            if xa == 0.0 and xb == 0.0:
                assert tag == DIRICHLET
            else:
                assert tag == NEUMANN

    def test_generation_tracking(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 2)
        out = refine(mesh, range(mesh.n_triangles))
        assert out.generation.min() >= 1


class TestClassifyActive:
    def test_no_features_all_uncut(self):
        mesh = build_structured_mesh(UNIT, 0.3)
        cls = classify_active(mesh, [])
        assert np.all(cls.status == UNCUT)
        assert len(cls.cut_tris) == 0

    def test_included_feature_boundary_length(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 20)
        cls = classify_active(mesh, [test1_feature()])
        perimeter = 2 * 20 * 0.04 * math.sin(math.pi / 20)
        total = sum(s.length for segs in cls.segments.values() for s in segs)
        assert total == pytest.approx(perimeter, rel=1e-12)
        assert len(cls.cut_tris) > 0

    def test_neglected_feature_ignored(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 20)
        cls = classify_active(mesh, [test1_feature(status="neglected")])
        assert np.all(cls.status == UNCUT)

    def test_feature_inside_one_triangle(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 2)
        feat = make_feature(1, regular_polygon((0.1, 0.25), 0.03, 8),
                            domain=UNIT, status="included")
        cls = classify_active(mesh, [feat])
        assert np.count_nonzero(cls.status == CUT) == 1
        assert np.count_nonzero(cls.status == INACTIVE) == 0

    def test_area_accounting(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 20)
        feat = test1_feature()
        cls = classify_active(mesh, [feat])
        covered = mesh.areas.sum() - cls.active_area.sum()
        assert covered == pytest.approx(feat.shape.area, rel=1e-12)

    def test_refined_mesh_produces_inactive(self):
        mesh = uniform_refine(build_structured_mesh(UNIT, math.sqrt(2) / 20), 4)
        cls = classify_active(mesh, [test1_feature()])
        assert np.count_nonzero(cls.status == INACTIVE) > 0
        covered = mesh.areas.sum() - cls.active_area.sum()
        assert covered == pytest.approx(test1_feature().shape.area, rel=1e-10)


class TestPatch:
    def test_interior_vertex_six_triangles(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 4)
        # pick the central vertex
        v = int(np.argmin(np.abs(mesh.vertices - 0.5).sum(axis=1)))
        pa = patch(mesh, v)
        assert pa.kind == "interior"
        assert pa.size == 6
        assert len(pa.boundary_psi) == 0
        assert len(pa.boundary_zero) == 6

    def test_corner_vertex(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 4)
        v = int(np.argmin(np.abs(mesh.vertices).sum(axis=1)))
        pa = patch(mesh, v)
        assert pa.size in (1, 2)
        assert len(pa.boundary_psi) == 2

    def test_junction_vertex_kind(self):
        mesh = build_structured_mesh(UNIT, 0.5, dirichlet_sides=("bottom", "top"))
        corner = int(np.argmin(np.abs(mesh.vertices).sum(axis=1)))
        assert patch(mesh, corner).kind == "neumann_corner"
        side = int(np.argmin(np.abs(mesh.vertices - [0.0, 0.5]).sum(axis=1)))
        assert patch(mesh, side).kind == "neumann_exterior"

    def test_vertex_inside_feature_is_interior(self):
        mesh = build_structured_mesh(UNIT, math.sqrt(2) / 20)
        cls = classify_active(mesh, [test1_feature()])
        v = int(np.argmin(np.abs(mesh.vertices - 0.2).sum(axis=1)))
        pa = patch(mesh, v, cls)
        assert pa.kind == "interior"
        assert pa.size > 0

    def test_fully_trimmed_vertex_raises(self):
        mesh = uniform_refine(build_structured_mesh(UNIT, math.sqrt(2) / 20), 4)
        cls = classify_active(mesh, [test1_feature()])
        buried = None
        for v in range(mesh.n_vertices):
            tris = mesh.vertex_tris[v]
            if len(tris) and np.all(cls.status[tris] == INACTIVE):
                buried = v
                break
        assert buried is not None
        with pytest.raises(FullyTrimmedVertexError):
            patch(mesh, buried, cls)


class TestHatFunction:
    def test_partition_of_unity(self):
        mesh = build_structured_mesh(UNIT, 0.4)
        rng = np.random.default_rng(1)
        for t in range(mesh.n_triangles):
            lam = rng.dirichlet([1, 1, 1])
            p = lam @ mesh.tri_coords(t)
            vals = []
            grads = []
            for v in mesh.triangles[t]:
                val, grad = hat_function(mesh, int(v), p)
                vals.append(val)
                grads.append(grad)
            assert sum(vals) == pytest.approx(1.0, abs=1e-14)
            assert np.allclose(np.sum(grads, axis=0), 0.0, atol=1e-12)

    def test_vertex_value_one(self):
        mesh = build_structured_mesh(UNIT, 0.4)
        val, _ = hat_function(mesh, 0, mesh.vertices[0])
        assert val == pytest.approx(1.0)

    def test_outside_patch_raises(self):
        mesh = build_structured_mesh(UNIT, 0.4)
        with pytest.raises(ValueError):
            hat_function(mesh, 0, (0.9, 0.9))


class TestDump:
    def test_round_trip(self):
        mesh = refine(build_structured_mesh(UNIT, 0.5, dirichlet_sides=("left",)), [0, 3])
        back = Mesh.parse(mesh.dump())
        assert np.allclose(back.vertices, mesh.vertices)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert back.boundary_tag == mesh.boundary_tag
        assert np.array_equal(back.generation, mesh.generation)
