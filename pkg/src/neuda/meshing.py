"""Zero-level-set extraction, mesh IO, point sampling, Chamfer distance.

Marching cubes runs on an (R+1)^3 lattice of SDF values over an axis
aligned box through the backend kernels; the raw triangle soup is welded
by rounding vertex coordinates to 1e-6 lattice units and degenerate
triangles (repeated indices or near-zero area) are dropped. A field with
no sign change yields an empty mesh with ``empty`` set instead of an
error.

Chamfer distances are computed between point samples: for each point the
nearest neighbour in the other set (KD-tree), averaged per direction;
the symmetric value is the mean of the two directed means.
"""

import numpy as np
from scipy.spatial import cKDTree

from . import kernels

WELD_DECIMALS = 6


class TriMesh:
    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)

    @property
    def empty(self):
        return self.faces.shape[0] == 0

    def areas(self):
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self):
        return float(self.areas().sum())


class ChamferReport:
    def __init__(self, a_to_b, b_to_a, n_a, n_b):
        self.a_to_b = float(a_to_b)
        self.b_to_a = float(b_to_a)
        self.symmetric = (self.a_to_b + self.b_to_a) / 2.0
        self.n_a = n_a
        self.n_b = n_b


def extract_mesh(sdf, resolution, box, chunk=262144):
    """TriMesh of the zero level set of ``sdf`` over ``box``.

    ``sdf``: (P, 3) world points -> (P,) values; ``resolution``: cells per
    axis (>= 8); ``box``: (2, 3) min/max corners.
    """
    if resolution < 8:
        raise ValueError("meshing resolution must be at least 8")
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (2, 3) or not np.all(box[1] > box[0]):
        raise ValueError("box must be (2,3) with max > min per axis")
    n = resolution + 1
    axes = [np.linspace(box[0][i], box[1][i], n) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    values = np.empty(pts.shape[0], dtype=np.float64)
    for lo in range(0, pts.shape[0], chunk):
        values[lo:lo + chunk] = sdf(pts[lo:lo + chunk])
    if not np.isfinite(values).all():
        raise ValueError("SDF produced non-finite values on the lattice")
    grid = values.reshape(n, n, n)

    soup = kernels.marching_cubes(grid)
    if soup.shape[0] == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3)))

    spacing = (box[1] - box[0]) / resolution
    world = box[0][None, None, :] + soup * spacing[None, None, :]
    return _weld(world)


def _weld(soup):
    """Index a triangle soup (T, 3, 3), dropping degenerate triangles."""
    flat = soup.reshape(-1, 3)
    keys = np.round(flat, WELD_DECIMALS)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3)
    ok = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
          & (faces[:, 0] != faces[:, 2]))
    mesh = TriMesh(uniq, faces[ok])
    if mesh.faces.shape[0]:
        mesh = TriMesh(mesh.vertices, mesh.faces[mesh.areas() > 1e-14])
    return mesh


def sample_mesh(mesh, n, seed=0):
    """(n, 3) points uniform over the surface (area-weighted triangles)."""
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
    areas = mesh.areas()
    pdf = areas / areas.sum()
    tri = rng.choice(len(pdf), size=n, p=pdf)
    a = mesh.vertices[mesh.faces[tri, 0]]
    b = mesh.vertices[mesh.faces[tri, 1]]
    c = mesh.vertices[mesh.faces[tri, 2]]
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return a + u * (b - a) + v * (c - a)


def chamfer(a, b):
    """ChamferReport between two point sets (N,3)/(M,3)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer needs nonempty point sets")
    d_ab = cKDTree(b).query(a)[0].mean()
    d_ba = cKDTree(a).query(b)[0].mean()
    return ChamferReport(d_ab, d_ba, a.shape[0], b.shape[0])


# -- file formats ------------------------------------------------------------

def save_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))
    return path


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_ply_points(path, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {pts.shape[0]}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("end_header\n")
        for p in pts:
            fh.write("%.17g %.17g %.17g\n" % tuple(p))
    return path


def load_ply_points(path):
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError("not a PLY file")
        count = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("PLY header never ended")
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line == "end_header":
                break
        if count is None:
            raise ValueError("PLY header lacks a vertex element")
        pts = np.loadtxt(fh, dtype=np.float64, max_rows=count)
    return pts.reshape(-1, 3)
