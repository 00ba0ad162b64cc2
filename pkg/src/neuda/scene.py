"""Cameras, rays, synthetic scene generation, and scene directory I/O.

Synthetic scenes place the object inside the unit box [-1,1]^3, viewed by
pinhole cameras on a radius-3 sphere looking at the origin.  Images are
rendered by sphere tracing the analytic SDF with Lambertian shading (0.2
ambient plus one fixed directional light) over a black background; masks
come from ray hit/miss.

Camera convention: ``rotation`` maps camera coordinates to world, and
``translation`` is the camera center in world.  The camera looks down its
-z axis, +x right, +y up; a pixel (u, v) = (column, row) casts its ray
through the pixel center (u+0.5, v+0.5).

Scene directory layout: ``manifest.json`` carrying version, image size,
bounding box, per-view file names, row-major rotation + translation and
intrinsics, plus an optional analytic-SDF descriptor; next to it 8-bit RGB
view PNGs and 8-bit gray mask PNGs (0/255).  The manifest also records the
near/far policy (rays are clipped by box intersection).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import sdf as sdf_mod

MANIFEST_VERSION = 1
NEAR_MIN = 1e-3

ALBEDO = {
    "sphere": (0.90, 0.85, 0.78),
    "torus": (0.78, 0.86, 0.92),
    "box_with_hole": (0.84, 0.91, 0.80),
}
LIGHT_DIR = np.array([0.4, 0.25, 0.85]) / np.linalg.norm([0.4, 0.25, 0.85])
AMBIENT = 0.2


@dataclass
class Camera:
    rotation: np.ndarray      # (3,3) world-from-camera
    translation: np.ndarray   # (3,) camera center in world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must have determinant +1")

    def pixel_directions(self, pixels):
        """Unit world-space directions through pixel centers; pixels are (N, 2) (u, v)."""
        pixels = np.asarray(pixels)
        u = pixels[:, 0] + 0.5
        v = pixels[:, 1] + 0.5
        d_cam = np.stack([(u - self.cx) / self.fx,
                          -(v - self.cy) / self.fy,
                          -np.ones_like(u, dtype=np.float64)], axis=-1)
        d_world = d_cam @ self.rotation.T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


@dataclass
class RayBatch:
    origins: np.ndarray    # (N, 3)
    dirs: np.ndarray       # (N, 3) unit
    colors: np.ndarray     # (N, 3) in [0, 1]
    masks: np.ndarray      # (N,) in {0, 1}, or None
    near: np.ndarray       # (N,)
    far: np.ndarray        # (N,)
    valid: np.ndarray      # (N,) bool; False where the ray misses the box

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class Scene:
    cameras: list
    images: list            # (H, W, 3) uint8 per view
    masks: list             # (H, W) uint8 in {0,1} per view, or None
    bbox: np.ndarray        # (2, 3) min/max corners
    analytic: dict = None   # {"kind": ..., "params": {...}} or None

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        if not (self.bbox[1] > self.bbox[0]).all():
            raise ValueError("bounding box must have positive extent on all axes")
        sizes = {img.shape[:2] for img in self.images}
        if len(sizes) > 1:
            raise ValueError(f"images disagree on size: {sorted(sizes)}")

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def image_size(self):
        h, w = self.images[0].shape[:2]
        return w, h

    @property
    def has_masks(self):
        return self.masks is not None

    def analytic_sdf(self):
        if self.analytic is None:
            return None
        return sdf_mod.make_sdf(self.analytic["kind"], self.analytic.get("params"))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    return np.stack([right, cam_up, -forward], axis=-1)


def ray_box_near_far(origins, dirs, bbox):
    """Slab intersection; returns (near, far, hit) with near clamped >= NEAR_MIN."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    safe = np.where(np.abs(dirs) < 1e-30, 1e-30, dirs)
    t1 = (bbox[0] - origins) / safe
    t2 = (bbox[1] - origins) / safe
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    near = np.maximum(tmin, NEAR_MIN)
    hit = tmax > near
    return near, tmax, hit


def generate_rays(scene, view, pixels):
    """Rays through the given (u, v) pixel centers of one view.

    Rays that miss the scene bounding box are flagged invalid; they render
    the background color and contribute only to mask/color losses.
    """
    cam = scene.cameras[view]
    pixels = np.asarray(pixels, dtype=np.int64)
    if (pixels < 0).any() or (pixels[:, 0] >= cam.width).any() or \
            (pixels[:, 1] >= cam.height).any():
        raise ValueError("pixel coordinates outside image bounds")
    dirs = cam.pixel_directions(pixels)
    origins = np.broadcast_to(cam.translation, dirs.shape).copy()
    near, far, hit = ray_box_near_far(origins, dirs, scene.bbox)
    near = np.where(hit, near, NEAR_MIN)
    far = np.where(hit, far, 2.0 * NEAR_MIN)
    img = scene.images[view]
    colors = img[pixels[:, 1], pixels[:, 0]].astype(np.float64) / 255.0
    masks = None
    if scene.has_masks:
        masks = scene.masks[view][pixels[:, 1], pixels[:, 0]].astype(np.float64)
    return RayBatch(origins, dirs, colors, masks, near, far, hit)


def _ring_cameras(n_views, resolution, seed, radius=3.0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA3]))
    azimuths = 2.0 * np.pi * np.arange(n_views) / n_views \
        + rng.uniform(-0.5, 0.5, n_views) * (2.0 * np.pi / n_views) * 0.3
    base_elev = np.where(np.arange(n_views) % 2 == 0, 25.0, -25.0)
    elev = np.deg2rad(base_elev + rng.uniform(-15.0, 15.0, n_views))
    fx = 1.25 * resolution
    cams = []
    for az, el in zip(azimuths, elev):
        eye = radius * np.array([np.cos(el) * np.cos(az),
                                 np.cos(el) * np.sin(az),
                                 np.sin(el)])
        cams.append(Camera(look_at(eye), eye, fx, fx,
                           resolution / 2.0, resolution / 2.0,
                           resolution, resolution))
    return cams


def synth_scene(primitive, views, resolution, seed, params=None):
    """Render an analytic primitive into a posed synthetic scene."""
    if primitive not in sdf_mod.KIND_IDS:
        raise ValueError(
            f"unknown primitive {primitive!r}; choose from {sorted(sdf_mod.KIND_IDS)}")
    if views < 2:
        raise ValueError("need at least 2 views")
    params = dict(params or {})
    bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    cams = _ring_cameras(views, resolution, seed)
    f = sdf_mod.make_sdf(primitive, params)
    albedo = np.array(ALBEDO[primitive])
    images, masks = [], []
    px = np.stack(np.meshgrid(np.arange(resolution), np.arange(resolution),
                              indexing="xy"), axis=-1).reshape(-1, 2)
    for cam in cams:
        dirs = cam.pixel_directions(px)
        origins = np.broadcast_to(cam.translation, dirs.shape)
        near, far, box_hit = ray_box_near_far(origins, dirs, bbox)
        hit = np.zeros(len(px), dtype=bool)
        tvals = np.zeros(len(px))
        if box_hit.any():
            h, t = sdf_mod.trace_rays(primitive, params, origins[box_hit],
                                      dirs[box_hit], near[box_hit], far[box_hit])
            hit[box_hit] = h
            tvals[box_hit] = t
        img = np.zeros((len(px), 3))
        if hit.any():
            p = origins[hit] + tvals[hit, None] * dirs[hit]
            n = sdf_mod.sdf_gradient(f, p)
            n /= np.linalg.norm(n, axis=-1, keepdims=True)
            lambert = AMBIENT + (1.0 - AMBIENT) * np.maximum(n @ LIGHT_DIR, 0.0)
            img[hit] = albedo * lambert[:, None]
        img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        images.append(img8.reshape(resolution, resolution, 3))
        masks.append(hit.astype(np.uint8).reshape(resolution, resolution))
    analytic = {"kind": primitive,
                "params": {k: float(v) for k, v in
                           zip(sdf_mod._PARAM_ORDER[primitive],
                               sdf_mod.params_vector(primitive, params))}}
    return Scene(cams, images, masks, bbox, analytic)


def save_scene(scene, path):
    os.makedirs(path, exist_ok=True)
    views = []
    for i, cam in enumerate(scene.cameras):
        entry = {
            "image": f"view_{i:03d}.png",
            "rotation": cam.rotation.tolist(),
            "translation": cam.translation.tolist(),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        }
        Image.fromarray(scene.images[i]).save(os.path.join(path, entry["image"]))
        if scene.has_masks:
            entry["mask"] = f"mask_{i:03d}.png"
            Image.fromarray(scene.masks[i] * 255).save(
                os.path.join(path, entry["mask"]))
        views.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "image_size": list(scene.image_size),
        "bounding_box": {"min": scene.bbox[0].tolist(),
                         "max": scene.bbox[1].tolist()},
        "near_far_policy": "bbox",
        "analytic_sdf": scene.analytic,
        "views": views,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"missing manifest: {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    w, h = manifest["image_size"]
    cams, images, masks = [], [], []
    any_mask = all("mask" in v for v in manifest["views"])
    for v in manifest["views"]:
        img_path = os.path.join(path, v["image"])
        if not os.path.exists(img_path):
            raise FileNotFoundError(f"manifest references missing image: {v['image']}")
        img = np.asarray(Image.open(img_path).convert("RGB"))
        if img.shape[:2] != (h, w):
            raise ValueError(
                f"{v['image']}: size {img.shape[1]}x{img.shape[0]} does not match "
                f"manifest {w}x{h}")
        images.append(img)
        cams.append(Camera(np.array(v["rotation"]), np.array(v["translation"]),
                           v["fx"], v["fy"], v["cx"], v["cy"], w, h))
        if any_mask:
            mask_path = os.path.join(path, v["mask"])
            if not os.path.exists(mask_path):
                raise FileNotFoundError(
                    f"manifest references missing mask: {v['mask']}")
            m = np.asarray(Image.open(mask_path).convert("L"))
            if m.shape != (h, w):
                raise ValueError(f"{v['mask']}: mask size does not match images")
            masks.append((m > 127).astype(np.uint8))
    box = manifest["bounding_box"]
    return Scene(cams, images, masks if any_mask else None,
                 np.array([box["min"], box["max"]]),
                 manifest.get("analytic_sdf"))
