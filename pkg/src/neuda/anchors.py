"""Hierarchical deformable anchor grids.

Each level is a regular lattice over the centered frame [-1,1]^3 whose
vertices carry learnable 3D offsets (deformable anchors) or, in the
feature baseline, learnable per-vertex feature vectors.  A query point is
encoded per level by looking up its cell, weighting the 8 deformed anchors
by normalized cosine similarity against the query, and summing the
per-anchor embeddings; levels concatenate in ascending order.

Embedding modes: one sin/cos band at frequency 2^l per level (the
hierarchical encoding, 6 dims per level), the multi-frequency baseline
(6 dims per frequency per level), or stored features.  In the two
frequency modes the embedding is taken of the deformed anchor position,
never of the query point; the query influences the output only through
the weights, which is what makes the encoding differentiable w.r.t. the
query inside a cell.

``encode`` can also emit the per-level Jacobian d(embedding)/d(query) as
tape expressions, which downstream code chains into analytic SDF spatial
gradients without second-order machinery.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

NORM_EPS = 1e-8       # floor on |p|, |p_n| in the cosine weights
SUM_EPS = 1e-8        # cancellation fallback threshold on the weight sum


def level_resolutions(base, growth, levels, max_vertices=20_000_000):
    """Per-axis vertex counts N_l = round(base * growth^l), half away from zero."""
    if base < 2:
        raise ValueError("base resolution must be >= 2")
    if growth <= 1.0:
        raise ValueError("growth factor must exceed 1")
    if levels < 1:
        raise ValueError("need at least one level")
    out = []
    total = 0
    for l in range(levels):
        n = int(np.floor(base * growth ** l + 0.5))
        total += n ** 3
        if total > max_vertices:
            raise ValueError(
                f"level {l} (N={n}) pushes total vertex count {total} past "
                f"the budget of {max_vertices}")
        out.append(n)
    return out


def cell_lookup(x01, n):
    """Half-open cell lookup on one level.

    ``x01``: (P, 3) coordinates in [0,1]^3.  Returns (corner ids (P, 8) into
    the level's flat vertex array, count of coordinates clamped back into
    the box).  Cells are [i, i+1) with the last cell closed, so exact
    lattice-plane queries and x = 1 stay well defined.
    """
    x01 = np.asarray(x01)
    outside = int(np.sum((x01 < 0.0) | (x01 > 1.0)))
    i0 = np.clip(np.floor(x01 * (n - 1)).astype(np.int64), 0, n - 2)
    ox = i0[:, 0][:, None]
    oy = i0[:, 1][:, None]
    oz = i0[:, 2][:, None]
    dx = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    dy = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    dz = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    idx = ((ox + dx) * n + (oy + dy)) * n + (oz + dz)
    return idx, outside


@dataclass
class AnchorGridLevel:
    level: int
    n: int                    # vertices per axis
    param: str                # store name of the offset/feature array
    deform: bool              # offsets trainable (anchor mode)

    @property
    def n_vertices(self):
        return self.n ** 3

    @property
    def cell_size(self):
        return 2.0 / (self.n - 1)

    def base_positions(self, dtype=np.float64):
        axis = np.linspace(-1.0, 1.0, self.n)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(dtype)


@dataclass
class EncodeOut:
    H: "ad.Tensor"            # (P, D)
    dHdp: "ad.Tensor"         # (P, 3, D) or None
    clamped: int              # queries clamped back into the box
    fallbacks: int            # weight sums that hit the uniform fallback


class HierarchicalAnchorGrid:
    def __init__(self, levels, encoding="hpe", representation="anchor",
                 feature_dim=6, mlpe_frequencies=8, offset_clamp_factor=1.5,
                 dtype=np.float32):
        if encoding not in ("hpe", "mlpe"):
            raise ValueError(f"unknown encoding {encoding!r}")
        if representation not in ("anchor", "feature"):
            raise ValueError(f"unknown representation {representation!r}")
        self.levels = levels
        self.encoding = encoding
        self.representation = representation
        self.feature_dim = feature_dim
        self.mlpe_frequencies = mlpe_frequencies
        self.offset_clamp_factor = offset_clamp_factor
        self.dtype = np.dtype(dtype)
        self._base_cache = {}

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def level_dim(self):
        if self.representation == "feature":
            return self.feature_dim
        if self.encoding == "hpe":
            return 6
        return 6 * self.mlpe_frequencies

    @property
    def embed_dim(self):
        return self.level_dim * self.n_levels

    def base_positions(self, lv):
        key = lv.level
        if key not in self._base_cache:
            self._base_cache[key] = lv.base_positions(self.dtype)
        return self._base_cache[key]

    # -- embeddings of anchor positions --------------------------------

    def _embed_level(self, anchors, level):
        """Frequency embedding of per-vertex positions, (V, 3) -> (V, level_dim)."""
        if self.encoding == "hpe":
            ang = anchors * float(2 ** level * np.pi)
            return ad.concat([ad.sin(ang), ad.cos(ang)], axis=1)
        parts = []
        for k in range(self.mlpe_frequencies):
            ang = anchors * float(2 ** k * np.pi)
            parts.append(ad.sin(ang))
            parts.append(ad.cos(ang))
        return ad.concat(parts, axis=1)

    # -- main encode ----------------------------------------------------

    def encode(self, p, store, need_jac=False):
        """Concatenated per-level embeddings of query points.

        ``p``: (P, 3) ndarray (treated as constant) or Tensor in the
        centered frame; the cell choice always comes from the raw values
        (gradients are defined within the current cell).  Returns an
        :class:`EncodeOut`; ``dHdp`` rows pair with ``p``'s last axis.
        """
        p_t = p if isinstance(p, ad.Tensor) else None
        p_data = p.data if p_t is not None else np.asarray(p, dtype=self.dtype)
        if p_t is None:
            p_t = ad.Tensor(p_data, tag="query")
        x01 = (p_data + 1.0) * 0.5
        # clamp under the sqrt: sqrt(0) has an infinite adjoint and the grid
        # center anchor sits exactly at the origin for odd resolutions
        pq = ad.sqrt(ad.clamp((p_t * p_t).sum(axis=1, keepdims=True),
                              lo=NORM_EPS * NORM_EPS))
        phis, jacs = [], []
        clamped = fallbacks = 0
        for lv in self.levels:
            idx, out_count = cell_lookup(x01, lv.n)
            clamped += out_count
            base = ad.constant(self.base_positions(lv), dtype=self.dtype, tag="base")
            theta = store[lv.param]
            if self.representation == "anchor":
                anchors_all = base + theta
                g_all = self._embed_level(anchors_all, lv.level)
            else:
                anchors_all = base
                g_all = theta
            flat = idx.reshape(-1)
            a = ad.gather(anchors_all, flat).reshape(-1, 8, 3)
            g = ad.gather(g_all, flat).reshape(-1, 8, g_all.shape[1])
            pn = ad.sqrt(ad.clamp((a * a).sum(axis=2), lo=NORM_EPS * NORM_EPS))
            dot = (p_t.reshape(-1, 1, 3) * a).sum(axis=2)
            what = dot / (pq * pn)
            s = what.sum(axis=1, keepdims=True)
            fb = np.abs(s.data) < SUM_EPS
            fallbacks += int(fb.sum())
            s_safe = ad.where_mask(fb, ad.constant(np.ones_like(s.data),
                                                   dtype=self.dtype), s)
            w = ad.where_mask(fb, ad.constant(np.full((1, 1), 0.125),
                                              dtype=self.dtype), what / s_safe)
            phis.append((w.reshape(-1, 8, 1) * g).sum(axis=1))
            if need_jac:
                inv = 1.0 / (pq.reshape(-1, 1) * pn)
                p3 = ad.constant(p_data.reshape(-1, 1, 3), dtype=self.dtype)
                dwhat = a * inv.reshape(-1, 8, 1) \
                    - (dot * inv / (pq * pq).reshape(-1, 1)).reshape(-1, 8, 1) * p3
                ds = dwhat.sum(axis=1, keepdims=True)
                dw = (dwhat - w.reshape(-1, 8, 1) * ds) / s_safe.reshape(-1, 1, 1)
                dw = ad.where_mask(fb[:, :, None],
                                   ad.constant(np.zeros((1, 1, 1)),
                                               dtype=self.dtype), dw)
                jacs.append(dw.transpose((0, 2, 1)) @ g)
        H = ad.concat(phis, axis=1)
        dHdp = ad.concat(jacs, axis=2) if need_jac else None
        return EncodeOut(H, dHdp, clamped, fallbacks)

    # -- offset maintenance ---------------------------------------------

    def clamp_offsets(self, store):
        """Project anchor offsets back to 1.5x cell radius (config factor)."""
        if self.representation != "anchor":
            return
        for lv in self.levels:
            radius = self.offset_clamp_factor * lv.cell_size
            arr = store[lv.param].data
            norms = np.linalg.norm(arr, axis=1)
            over = norms > radius
            if over.any():
                arr[over] *= (radius / norms[over])[:, None]


def init_grid(store, resolutions, encoding="hpe", representation="anchor",
              feature_dim=6, mlpe_frequencies=8, offset_clamp_factor=1.5,
              deform=True, dtype=np.float32, seed=0):
    """Register grid parameters and return the grid.

    Anchor mode starts with all offsets exactly zero (anchors at lattice
    vertices); feature mode draws features uniform(-1e-4, 1e-4), seeded.
    With deformation disabled, offset entries are registered frozen so
    they stay exactly zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11C]))
    levels = []
    for l, n in enumerate(resolutions):
        name = f"grid/l{l}/" + ("offsets" if representation == "anchor"
                                else "features")
        if representation == "anchor":
            store.add(name, np.zeros((n ** 3, 3), dtype=dtype), trainable=deform)
        else:
            feats = rng.uniform(-1e-4, 1e-4, size=(n ** 3, feature_dim)).astype(dtype)
            store.add(name, feats, trainable=deform)
        levels.append(AnchorGridLevel(l, n, name, deform))
    return HierarchicalAnchorGrid(levels, encoding, representation, feature_dim,
                                  mlpe_frequencies, offset_clamp_factor, dtype)


@dataclass
class DisplacementReport:
    near_mean: float          # None when the partition is empty
    far_mean: float
    near_count: int
    far_count: int


def anchor_displacement_stats(grid, store, sdf_fn):
    """Mean |offset| over finest-level vertices near vs far from the surface.

    Near means |f(p_v)| below one cell size at the finest level; far means
    above two cell sizes; the band between is left out of both partitions.
    """
    lv = grid.levels[-1]
    base = lv.base_positions(np.float64)
    f = np.asarray(sdf_fn(base), dtype=np.float64)
    disp = np.linalg.norm(store[lv.param].data.astype(np.float64), axis=1)
    near = np.abs(f) < lv.cell_size
    far = np.abs(f) > 2.0 * lv.cell_size
    return DisplacementReport(
        float(disp[near].mean()) if near.any() else None,
        float(disp[far].mean()) if far.any() else None,
        int(near.sum()), int(far.sum()))
