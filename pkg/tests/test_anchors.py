import numpy as np
import pytest

import neuda.autodiff as ad
from neuda import anchors as an


def make_grid(resolutions=(4, 6), encoding="hpe", representation="anchor",
              dtype=np.float64, seed=0, **kw):
    store = ad.ParamStore()
    grid = an.init_grid(store, resolutions, encoding=encoding,
                        representation=representation, dtype=dtype,
                        seed=seed, **kw)
    return store, grid


def cosine_weights(p, corners, eps=an.NORM_EPS):
    """Independent oracle for the signed normalized cosine weights."""
    pq = max(np.linalg.norm(p), eps)
    pn = np.maximum(np.linalg.norm(corners, axis=1), eps)
    what = corners @ p / (pq * pn)
    s = what.sum()
    if abs(s) < an.SUM_EPS:
        return np.full(8, 0.125)
    return what / s


def corner_indices(p, n):
    x01 = (p + 1.0) * 0.5
    cell = np.clip((x01 * (n - 1)).astype(int), 0, n - 2)
    offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    ijk = cell[None, :] + offs
    return ijk[:, 0] * n * n + ijk[:, 1] * n + ijk[:, 2]


def hpe_embed(positions, level):
    ang = positions * (2 ** level * np.pi)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# -- resolutions -------------------------------------------------------------

def test_level_resolutions_geometric_growth():
    assert an.level_resolutions(8, 1.38, 4) == [8, 11, 15, 21]


def test_level_resolutions_respects_vertex_budget():
    with pytest.raises(ValueError):
        an.level_resolutions(64, 2.0, 6, max_vertices=1_000_000)


def test_level_resolutions_validation():
    with pytest.raises(ValueError):
        an.level_resolutions(1, 1.5, 2)
    with pytest.raises(ValueError):
        an.level_resolutions(8, 1.0, 2)


# -- dimensions --------------------------------------------------------------

def test_embedding_dims_by_mode():
    _, g = make_grid((4,) * 8)
    assert g.level_dim == 6 and g.embed_dim == 48
    _, g = make_grid((4, 6), encoding="mlpe", mlpe_frequencies=8)
    assert g.level_dim == 48 and g.embed_dim == 96
    _, g = make_grid((4, 6), representation="feature", feature_dim=6)
    assert g.embed_dim == 12


def test_encode_output_shapes():
    store, g = make_grid((4, 6))
    p = np.random.default_rng(0).uniform(-1, 1, size=(17, 3))
    out = g.encode(p, store, need_jac=True)
    assert out.H.data.shape == (17, 12)
    assert out.dHdp.data.shape == (17, 3, 12)


# -- weight normalization ----------------------------------------------------

def test_constant_features_reproduce_constant():
    # if every vertex carries the same feature vector, any weight set that
    # sums to one must return exactly that vector
    store, g = make_grid((5, 7), representation="feature", feature_dim=4)
    for lv in g.levels:
        c = np.arange(1.0, 5.0) * (lv.level + 1)
        store[lv.param].data[:] = c
    p = np.random.default_rng(1).uniform(-1, 1, size=(4000, 3))
    out = g.encode(p, store)
    ref = np.concatenate([np.arange(1.0, 5.0) * (l + 1) for l in range(2)])
    np.testing.assert_allclose(out.H.data, np.tile(ref, (4000, 1)), atol=1e-9)


def test_weights_match_independent_oracle():
    store, g = make_grid((6,))
    rng = np.random.default_rng(7)
    store["grid/l0/offsets"].data[:] = rng.uniform(-0.05, 0.05, size=(216, 3))
    pts = rng.uniform(-0.99, 0.99, size=(50, 3))
    out = g.encode(pts, store)
    anchors_all = g.levels[0].base_positions(np.float64) \
        + store["grid/l0/offsets"].data
    for i, p in enumerate(pts):
        idx = corner_indices(p, 6)
        w = cosine_weights(p, anchors_all[idx])
        ref = w @ hpe_embed(anchors_all[idx], 0)
        np.testing.assert_allclose(out.H.data[i], ref, atol=1e-10)


def test_origin_query_hits_uniform_fallback():
    store, g = make_grid((4,))
    out = g.encode(np.zeros((1, 3)), store)
    assert out.fallbacks == 1
    idx = corner_indices(np.zeros(3), 4)
    ref = hpe_embed(g.levels[0].base_positions(np.float64)[idx], 0).mean(axis=0)
    np.testing.assert_allclose(out.H.data[0], ref, atol=1e-12)


def test_outside_queries_are_counted_and_clamped():
    store, g = make_grid((4,))
    inside = g.encode(np.array([[0.999999, 0.3, -0.2]]), store)
    outside = g.encode(np.array([[1.7, 0.3, -0.2]]), store)
    assert inside.clamped == 0
    assert outside.clamped == 1


# -- zero-offset equivalence -------------------------------------------------

def test_zero_offset_encode_equals_direct_interpolation():
    store, g = make_grid((4, 6))
    pts = np.random.default_rng(3).uniform(-0.98, 0.98, size=(200, 3))
    out = g.encode(pts, store)
    cols = []
    for lnum, lv in enumerate(g.levels):
        base = lv.base_positions(np.float64)
        emb = hpe_embed(base, lnum)
        rows = []
        for p in pts:
            idx = corner_indices(p, lv.n)
            rows.append(cosine_weights(p, base[idx]) @ emb[idx])
        cols.append(np.array(rows))
    np.testing.assert_allclose(out.H.data, np.concatenate(cols, axis=1),
                               atol=1e-12)


# -- gradients ---------------------------------------------------------------

def test_offset_gradients_match_fd():
    store, g = make_grid((4,))
    rng = np.random.default_rng(12)
    store["grid/l0/offsets"].data[:] = rng.uniform(-0.08, 0.08, size=(64, 3))
    pts = rng.uniform(-0.9, 0.9, size=(6, 3))
    coef = rng.standard_normal((6, 6))

    def loss(st):
        return (g.encode(pts, st).H * coef).sum()

    assert ad.fd_check(loss, store, step=1e-6, tolerance=1e-5).passed


def test_query_jacobian_matches_fd_within_cell():
    store, g = make_grid((4, 6))
    rng = np.random.default_rng(4)
    for lv in g.levels:
        store[lv.param].data[:] = rng.uniform(-0.05, 0.05,
                                              size=store[lv.param].data.shape)
    # keep FD probes strictly inside one cell of the finest grid
    pts = rng.uniform(-0.7, 0.7, size=(5, 3))
    out = g.encode(pts, store, need_jac=True)
    h = 1e-6
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = h
        hi = g.encode(pts + dp, store).H.data
        lo = g.encode(pts - dp, store).H.data
        fd = (hi - lo) / (2 * h)
        np.testing.assert_allclose(out.dHdp.data[:, axis, :], fd,
                                   atol=5e-6, rtol=1e-4)


def test_feature_mode_offsets_absent_and_features_trainable():
    store, g = make_grid((4,), representation="feature")
    assert "grid/l0/offsets" not in store
    assert "grid/l0/features" in store
    assert "grid/l0/features" in store.trainable_names()
    store2, _ = make_grid((4,), deform=False)
    assert "grid/l0/offsets" not in store2.trainable_names()


def test_clamp_offsets_projects_to_radius():
    store, g = make_grid((4,))
    store["grid/l0/offsets"].data[:] = 10.0
    g.clamp_offsets(store)
    cell = g.levels[0].cell_size
    norms = np.linalg.norm(store["grid/l0/offsets"].data, axis=1)
    assert norms.max() <= 1.5 * cell + 1e-12
    assert norms.min() > 0  # direction preserved, magnitude projected


def test_clamp_offsets_noop_for_features():
    store, g = make_grid((4,), representation="feature")
    before = store["grid/l0/features"].data.copy()
    g.clamp_offsets(store)
    np.testing.assert_array_equal(store["grid/l0/features"].data, before)
