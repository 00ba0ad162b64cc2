"""Pure-numpy fallback kernels.

Each function mirrors its numba twin operation-for-operation (same update
order, same floating-point expression shapes) so the two backends agree
bitwise and can be swapped freely mid-process.
"""

import numpy as np

from ..mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

_CASE_BITS = np.array([1, 2, 4, 8, 16, 32, 64, 128], dtype=np.int64)
_OFF_F = CORNER_OFFSETS.astype(np.float64)


def scatter_add_rows(out, idx, vals):
    np.add.at(out, idx, vals)


def _sdf_values(kind, params, px, py, pz):
    if kind == 0:
        return np.sqrt(px * px + py * py + pz * pz) - params[0]
    if kind == 1:
        q0 = np.sqrt(px * px + py * py) - params[0]
        return np.sqrt(q0 * q0 + pz * pz) - params[1]
    if kind == 2:
        h = params[0]
        qx = np.abs(px) - h
        qy = np.abs(py) - h
        qz = np.abs(pz) - h
        ox = np.maximum(qx, 0.0)
        oy = np.maximum(qy, 0.0)
        oz = np.maximum(qz, 0.0)
        box = np.sqrt(ox * ox + oy * oy + oz * oz) + np.minimum(
            np.maximum(qx, np.maximum(qy, qz)), 0.0)
        cyl = np.sqrt(px * px + py * py) - params[1]
        return np.maximum(box, -cyl)
    raise ValueError(f"unknown sdf kind id {kind}")


def sphere_trace(origins, dirs, near, far, kind, params, max_steps, eps):
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    n = origins.shape[0]
    t = np.asarray(near, dtype=np.float64).copy()
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        px = origins[idx, 0] + t[idx] * dirs[idx, 0]
        py = origins[idx, 1] + t[idx] * dirs[idx, 1]
        pz = origins[idx, 2] + t[idx] * dirs[idx, 2]
        f = _sdf_values(kind, params, px, py, pz)
        converged = np.abs(f) < eps
        hit[idx[converged]] = True
        active[idx[converged]] = False
        adv = idx[~converged]
        t[adv] = t[adv] + f[~converged]
        active[adv[t[adv] > far[adv]]] = False
    return hit, t


def marching_cubes(values):
    values = np.ascontiguousarray(values, dtype=np.float64)
    nx, ny, nz = (s - 1 for s in values.shape)
    v8 = np.empty((nx, ny, nz, 8), dtype=np.float64)
    for k in range(8):
        dx, dy, dz = CORNER_OFFSETS[k]
        v8[..., k] = values[dx:dx + nx, dy:dy + ny, dz:dz + nz]
    v8 = v8.reshape(-1, 8)
    case = (v8 < 0.0).astype(np.int64) @ _CASE_BITS
    cells = np.nonzero(EDGE_TABLE[case] != 0)[0]
    if cells.size == 0:
        return np.empty((0, 3, 3), dtype=np.float64)
    base = np.stack(np.unravel_index(cells, (nx, ny, nz)), axis=-1).astype(np.float64)
    tri_ids = TRI_TABLE[case[cells]]
    rows, slots = np.nonzero(tri_ids >= 0)
    e = tri_ids[rows, slots]
    c1 = EDGE_CORNERS[e, 0]
    c2 = EDGE_CORNERS[e, 1]
    v1 = v8[cells[rows], c1]
    v2 = v8[cells[rows], c2]
    tpos = -v1 / (v2 - v1)
    p1 = base[rows] + _OFF_F[c1]
    p2 = base[rows] + _OFF_F[c2]
    pts = p1 + tpos[:, None] * (p2 - p1)
    # rows/slots come out row-major, so consecutive triples belong to one
    # table entry of one cell; (a, c, b) flips to outward orientation
    tris = pts.reshape(-1, 3, 3)
    return np.ascontiguousarray(tris[:, [0, 2, 1], :])
