import numpy as np
import pytest

from neuda import sdf


def test_sphere_signed_distances_exact():
    f = sdf.make_sdf("sphere", {"radius": 0.35})
    pts = np.array([[0.0, 0.0, 0.0], [0.35, 0.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_allclose(f(pts), [-0.35, 0.0, 0.65], atol=1e-12)


def test_torus_ring_and_tube():
    # distance from the ring circle equals the tube radius on the surface
    f = sdf.make_sdf("torus", {"major": 0.3, "minor": 0.12})
    on_ring = np.array([[0.3, 0.0, 0.0]])
    assert f(on_ring)[0] == pytest.approx(-0.12, abs=1e-12)
    surf = np.array([[0.3 + 0.12, 0.0, 0.0], [0.3, 0.0, 0.12]])
    np.testing.assert_allclose(f(surf), 0.0, atol=1e-12)


def test_box_with_hole_inside_outside():
    f = sdf.make_sdf("box_with_hole")
    assert f(np.array([[0.0, 0.0, 0.0]]))[0] > 0      # inside the drilled hole
    far_corner = np.array([[0.9, 0.9, 0.9]])
    assert f(far_corner)[0] > 0
    p = sdf.DEFAULT_PARAMS["box_with_hole"]
    inside_wall = np.array([[p["half"] * 0.9, 0.0, 0.0]])
    assert f(inside_wall)[0] < 0


def test_gradients_are_unit_away_from_ridges():
    rng = np.random.default_rng(2)
    for kind in sdf.KIND_IDS:
        f = sdf.make_sdf(kind)
        pts = rng.uniform(-0.9, 0.9, size=(400, 3))
        vals = f(pts)
        keep = np.abs(vals) > 0.02  # skip the surface and medial ridges
        g = sdf.sdf_gradient(f, pts[keep])
        norms = np.linalg.norm(g, axis=1)
        assert np.median(np.abs(norms - 1.0)) < 1e-5


def test_trace_rays_hits_analytic_depth():
    o = np.tile(np.array([[0.0, -2.0, 0.0]]), (3, 1))
    d = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]])
    hit, t = sdf.trace_rays("sphere", {"radius": 0.35}, o, d,
                            np.zeros(3), np.full(3, 8.0))
    assert list(hit) == [True, False, False]
    assert t[0] == pytest.approx(2.0 - 0.35, abs=1e-3)


def test_unknown_primitive_rejected():
    with pytest.raises(ValueError):
        sdf.make_sdf("cube")
    with pytest.raises(ValueError):
        sdf.params_vector("sphere", {"radius": 0.3, "bogus": 1.0})
