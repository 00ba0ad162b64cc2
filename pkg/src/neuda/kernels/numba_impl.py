"""Numba-compiled kernels; see the numpy twin for the reference semantics."""

import numpy as np
from numba import njit

from ..mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

_NTRI = ((TRI_TABLE >= 0).sum(axis=1) // 3).astype(np.int64)
_OFF_F = CORNER_OFFSETS.astype(np.float64)


@njit(cache=True)
def _scatter_add_rows(out, idx, vals):
    for i in range(idx.shape[0]):
        j = idx[i]
        for c in range(vals.shape[1]):
            out[j, c] += vals[i, c]


def scatter_add_rows(out, idx, vals):
    _scatter_add_rows(out, np.ascontiguousarray(idx, dtype=np.int64),
                      np.ascontiguousarray(vals))


@njit(cache=True, inline="always")
def _sdf_scalar(kind, params, x, y, z):
    if kind == 0:
        return np.sqrt(x * x + y * y + z * z) - params[0]
    elif kind == 1:
        q0 = np.sqrt(x * x + y * y) - params[0]
        return np.sqrt(q0 * q0 + z * z) - params[1]
    else:
        h = params[0]
        qx = abs(x) - h
        qy = abs(y) - h
        qz = abs(z) - h
        ox = max(qx, 0.0)
        oy = max(qy, 0.0)
        oz = max(qz, 0.0)
        box = np.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
        cyl = np.sqrt(x * x + y * y) - params[1]
        return max(box, -cyl)


@njit(cache=True)
def _sphere_trace(origins, dirs, near, far, kind, params, max_steps, eps):
    n = origins.shape[0]
    hit = np.zeros(n, dtype=np.bool_)
    t = near.copy()
    for r in range(n):
        tc = t[r]
        for _ in range(max_steps):
            x = origins[r, 0] + tc * dirs[r, 0]
            y = origins[r, 1] + tc * dirs[r, 1]
            z = origins[r, 2] + tc * dirs[r, 2]
            f = _sdf_scalar(kind, params, x, y, z)
            if abs(f) < eps:
                hit[r] = True
                break
            tc = tc + f
            if tc > far[r]:
                break
        t[r] = tc
    return hit, t


def sphere_trace(origins, dirs, near, far, kind, params, max_steps, eps):
    return _sphere_trace(np.ascontiguousarray(origins, dtype=np.float64),
                         np.ascontiguousarray(dirs, dtype=np.float64),
                         np.ascontiguousarray(near, dtype=np.float64),
                         np.ascontiguousarray(far, dtype=np.float64),
                         kind, np.ascontiguousarray(params, dtype=np.float64),
                         max_steps, eps)


@njit(cache=True)
def _mc_case(values, ix, iy, iz):
    case = 0
    if values[ix, iy, iz] < 0.0:
        case |= 1
    if values[ix + 1, iy, iz] < 0.0:
        case |= 2
    if values[ix + 1, iy + 1, iz] < 0.0:
        case |= 4
    if values[ix, iy + 1, iz] < 0.0:
        case |= 8
    if values[ix, iy, iz + 1] < 0.0:
        case |= 16
    if values[ix + 1, iy, iz + 1] < 0.0:
        case |= 32
    if values[ix + 1, iy + 1, iz + 1] < 0.0:
        case |= 64
    if values[ix, iy + 1, iz + 1] < 0.0:
        case |= 128
    return case


@njit(cache=True)
def _mc_count(values, edge_table, ntri):
    nx = values.shape[0] - 1
    ny = values.shape[1] - 1
    nz = values.shape[2] - 1
    total = 0
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                total += ntri[_mc_case(values, ix, iy, iz)]
    return total


@njit(cache=True)
def _mc_fill(values, edge_table, tri_table, edge_corners, offsets, out):
    nx = values.shape[0] - 1
    ny = values.shape[1] - 1
    nz = values.shape[2] - 1
    cv = np.empty(8, dtype=np.float64)
    ex = np.empty(12, dtype=np.float64)
    ey = np.empty(12, dtype=np.float64)
    ez = np.empty(12, dtype=np.float64)
    k = 0
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                case = _mc_case(values, ix, iy, iz)
                et = edge_table[case]
                if et == 0:
                    continue
                for c in range(8):
                    cv[c] = values[ix + CORNER_OFFSETS[c, 0],
                                   iy + CORNER_OFFSETS[c, 1],
                                   iz + CORNER_OFFSETS[c, 2]]
                for e in range(12):
                    if et & (1 << e):
                        c1 = edge_corners[e, 0]
                        c2 = edge_corners[e, 1]
                        v1 = cv[c1]
                        v2 = cv[c2]
                        tpos = -v1 / (v2 - v1)
                        p1x = ix + offsets[c1, 0]
                        p1y = iy + offsets[c1, 1]
                        p1z = iz + offsets[c1, 2]
                        p2x = ix + offsets[c2, 0]
                        p2y = iy + offsets[c2, 1]
                        p2z = iz + offsets[c2, 2]
                        ex[e] = p1x + tpos * (p2x - p1x)
                        ey[e] = p1y + tpos * (p2y - p1y)
                        ez[e] = p1z + tpos * (p2z - p1z)
                for s in range(0, 16, 3):
                    a = tri_table[case, s]
                    if a < 0:
                        break
                    b = tri_table[case, s + 1]
                    c = tri_table[case, s + 2]
                    out[k, 0, 0] = ex[a]
                    out[k, 0, 1] = ey[a]
                    out[k, 0, 2] = ez[a]
                    out[k, 1, 0] = ex[c]
                    out[k, 1, 1] = ey[c]
                    out[k, 1, 2] = ez[c]
                    out[k, 2, 0] = ex[b]
                    out[k, 2, 1] = ey[b]
                    out[k, 2, 2] = ez[b]
                    k += 1
    return k


def marching_cubes(values):
    values = np.ascontiguousarray(values, dtype=np.float64)
    total = _mc_count(values, EDGE_TABLE, _NTRI)
    out = np.empty((total, 3, 3), dtype=np.float64)
    if total:
        filled = _mc_fill(values, EDGE_TABLE, TRI_TABLE, EDGE_CORNERS, _OFF_F, out)
        assert filled == total
    return out
