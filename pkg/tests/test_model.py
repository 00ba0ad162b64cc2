import numpy as np
import pytest

import neuda.autodiff as ad
from neuda.model import ModelConfig, NeudaModel

BOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def micro_model(**over):
    kw = dict(levels=2, base_res=4, growth=1.5, width=16, hidden_layers=2,
              dtype="float64", seed=4)
    kw.update(over)
    return NeudaModel(ModelConfig(**kw), BOX)


# -- configuration ------------------------------------------------------------

def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError, match="unknown ModelConfig"):
        ModelConfig(depth=5)
    with pytest.raises(ValueError, match="encoding"):
        ModelConfig(encoding="fourier")
    with pytest.raises(ValueError, match="representation"):
        ModelConfig(representation="voxel")
    with pytest.raises(ValueError, match="dtype"):
        ModelConfig(dtype="float16")
    with pytest.raises(ValueError, match="inv_s_init"):
        ModelConfig(inv_s_init=0.0)


def test_config_dict_round_trip():
    cfg = ModelConfig(levels=3, width=32, encoding="mlpe", deform=False)
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()


def test_model_rejects_bad_bbox():
    with pytest.raises(ValueError, match="bbox"):
        NeudaModel(ModelConfig(), [[0, 0, 0], [0, 1, 1]])


# -- coordinates and sharpness --------------------------------------------------

def test_normalize_denormalize_inverse():
    model = NeudaModel(ModelConfig(levels=2, base_res=4),
                       [[-0.5, 0.0, 1.0], [1.5, 3.0, 2.0]])
    p = np.random.default_rng(0).uniform(-0.5, 1.5, size=(40, 3))
    np.testing.assert_allclose(model.denormalize(model.normalize(p)), p,
                               atol=1e-12)
    # the longest axis maps to exactly [-1, 1]
    corners = model.normalize(np.array([[-0.5, 0.0, 1.0], [1.5, 3.0, 2.0]]))
    assert corners.min() == pytest.approx(-1.0)
    assert corners.max() == pytest.approx(1.0)


def test_inv_s_matches_configured_init():
    model = micro_model()
    assert model.inv_s() == pytest.approx(0.3, rel=1e-6)
    assert float(model.s_tensor().data) == pytest.approx(1.0 / 0.3, rel=1e-6)


# -- field evaluation -----------------------------------------------------------

def test_sdf_values_chunking_is_invisible():
    # BLAS kernels round differently by batch shape, so equality is to
    # accumulation noise, not bitwise
    model = micro_model()
    p = np.random.default_rng(1).uniform(-0.9, 0.9, size=(113, 3))
    np.testing.assert_allclose(model.sdf_values(p, chunk=7),
                               model.sdf_values(p, chunk=100000), atol=1e-12)


def test_sdf_values_agree_with_tape_forward():
    model = micro_model()
    p = np.random.default_rng(2).uniform(-0.8, 0.8, size=(31, 3))
    vals = model.sdf_values(p)
    f, _, _, _, _ = model.sdf_with_grad(model.normalize(p), need_jac=False)
    np.testing.assert_allclose(vals, f.data.astype(np.float64), atol=1e-14)


def test_spatial_gradient_matches_fd():
    model = micro_model()
    p = np.random.default_rng(3).uniform(-0.7, 0.7, size=(9, 3))
    _, grad, _, _, _ = model.sdf_with_grad(p, need_jac=True)
    step = 1e-6
    with ad.no_grad():
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = step
            fp, _, _, _, _ = model.sdf_with_grad(p + e, need_jac=False)
            fm, _, _, _, _ = model.sdf_with_grad(p - e, need_jac=False)
            fd = (fp.data - fm.data) / (2 * step)
            np.testing.assert_allclose(grad.data[:, ax], fd,
                                       atol=5e-6, rtol=1e-4)


def test_frozen_grid_keeps_offsets_out_of_training():
    model = micro_model(deform=False)
    names = model.store.trainable_names()
    assert not any("offsets" in n for n in names)
    assert any(n.startswith("net/sdf/") for n in names)


# -- geometric pretrain ----------------------------------------------------------

def test_geometric_init_builds_a_sphere():
    model = micro_model()
    final = model.geometric_init(radius=0.5, steps=400)
    assert final < 0.1
    # zero crossing near the target radius along several directions; the
    # coarse micro grid is honest to about a tenth of the box, so the
    # tolerance reflects representable accuracy, not the optimizer
    dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0],
                     [-1.0, 0, 0], [0.577, 0.577, 0.577]])
    ts = np.linspace(0.05, 0.95, 181)
    errs = []
    for d in dirs:
        f = model.sdf_values(ts[:, None] * d[None, :])
        assert f[0] < 0 < f[-1]
        sign = np.signbit(f)
        crossings = np.nonzero(sign[:-1] != sign[1:])[0]
        assert crossings.size >= 1
        t0s = [ts[k] + (ts[k + 1] - ts[k]) * f[k] / (f[k] - f[k + 1])
               for k in crossings]
        errs.append(min(abs(t0 - 0.5) for t0 in t0s))
    assert max(errs) < 0.2
    assert np.mean(errs) < 0.12
    # pretrain must not disturb sharpness or anchor offsets
    assert model.inv_s() == pytest.approx(0.3, rel=1e-6)
    for l in range(2):
        off = model.store[f"grid/l{l}/offsets"].data
        np.testing.assert_array_equal(off, np.zeros_like(off))
