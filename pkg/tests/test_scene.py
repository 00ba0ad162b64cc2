import json
import os

import numpy as np
import pytest

from neuda import scene as sc


@pytest.fixture(scope="module")
def sphere_scene():
    return sc.synth_scene("sphere", views=4, resolution=32, seed=1)


def test_synth_requires_two_views():
    with pytest.raises(ValueError):
        sc.synth_scene("sphere", views=1, resolution=16, seed=0)


def test_synth_rejects_unknown_primitive():
    with pytest.raises(ValueError):
        sc.synth_scene("cylinder", views=4, resolution=16, seed=0)


def test_masks_match_silhouette(sphere_scene):
    # foreground pixels are exactly the non-black pixels of the render
    for img, m in zip(sphere_scene.images, sphere_scene.masks):
        lit = img.sum(axis=2) > 0
        assert (lit == (m > 0)).mean() > 0.999


def test_central_rays_aim_at_origin(sphere_scene):
    w, h = sphere_scene.image_size
    pix = np.array([[w // 2, h // 2]])
    for view in range(sphere_scene.n_views):
        batch = sc.generate_rays(sphere_scene, view, pix)
        cam = sphere_scene.cameras[view]
        to_origin = -cam.translation / np.linalg.norm(cam.translation)
        # half-pixel offset from the exact center bounds the deviation
        assert batch.dirs[0] @ to_origin > 0.999


def test_generate_rays_unit_dirs_and_eye(sphere_scene):
    pix = np.array([[0, 0], [31, 31], [16, 8]])
    batch = sc.generate_rays(sphere_scene, 0, pix)
    np.testing.assert_allclose(np.linalg.norm(batch.dirs, axis=1), 1.0, atol=1e-12)
    eye = sphere_scene.cameras[0].translation
    np.testing.assert_allclose(batch.origins, np.tile(eye, (3, 1)), atol=1e-12)
    assert batch.colors.min() >= 0.0 and batch.colors.max() <= 1.0


def test_center_ray_color_matches_image(sphere_scene):
    # the batch color of pixel (u, v) is the image pixel / 255
    pix = np.array([[7, 21]])
    batch = sc.generate_rays(sphere_scene, 2, pix)
    np.testing.assert_allclose(batch.colors[0],
                               sphere_scene.images[2][21, 7] / 255.0, atol=1e-12)


def test_ray_box_near_far_oracle():
    bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    o = np.array([[-3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [-3.0, 2.5, 0.0]])
    d = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    near, far, hit = sc.ray_box_near_far(o, d, bbox)
    assert list(hit) == [True, False, False]
    assert near[0] == pytest.approx(2.0)
    assert far[0] == pytest.approx(4.0)


def test_scene_roundtrip_camera_exact(tmp_path, sphere_scene):
    out = tmp_path / "scn"
    sc.save_scene(sphere_scene, str(out))
    back = sc.load_scene(str(out))
    assert back.n_views == sphere_scene.n_views
    for a, b in zip(sphere_scene.cameras, back.cameras):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
        assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
    for a, b in zip(sphere_scene.images, back.images):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(sphere_scene.masks, back.masks):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(sphere_scene.bbox, back.bbox)
    assert back.analytic == sphere_scene.analytic


def test_save_is_deterministic(tmp_path, sphere_scene):
    a, b = tmp_path / "a", tmp_path / "b"
    sc.save_scene(sphere_scene, str(a))
    sc.save_scene(sphere_scene, str(b))
    for name in sorted(os.listdir(a)):
        with open(a / name, "rb") as fa, open(b / name, "rb") as fb:
            assert fa.read() == fb.read(), name


def test_load_rejects_bad_manifest(tmp_path, sphere_scene):
    out = tmp_path / "scn"
    sc.save_scene(sphere_scene, str(out))
    man = json.load(open(out / "manifest.json"))
    man["version"] = 99
    json.dump(man, open(out / "manifest.json", "w"))
    with pytest.raises(ValueError):
        sc.load_scene(str(out))


def test_synth_same_seed_same_pixels():
    a = sc.synth_scene("torus", views=3, resolution=24, seed=9)
    b = sc.synth_scene("torus", views=3, resolution=24, seed=9)
    for ia, ib in zip(a.images, b.images):
        np.testing.assert_array_equal(ia, ib)


def test_analytic_descriptor_roundtrips_to_sdf(sphere_scene):
    f = sphere_scene.analytic_sdf()
    assert f(np.zeros((1, 3)))[0] == pytest.approx(-0.35)
