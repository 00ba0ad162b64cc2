import csv

import numpy as np
import pytest

from neuda import ablation as ab
from neuda import scene as sc
from neuda.anchors import level_resolutions
from neuda.model import ModelConfig
from neuda.trainer import TrainConfig


def test_default_cells_cover_the_grid():
    names = [c.name for c in ab.DEFAULT_CELLS]
    assert names == ["single_feature", "multi_feature", "fixed_anchor",
                     "deformable_anchor", "deformable_anchor_mlpe"]
    fixed = ab.DEFAULT_CELLS[2]
    assert fixed.mode == "anchor" and not fixed.opt_grid
    assert ab.DEFAULT_CELLS[4].encoding == "mlpe"


def test_cell_model_config_maps_axes():
    base = ModelConfig(levels=3, base_res=4, growth=1.5, width=16,
                       hidden_layers=2)
    mc = ab.cell_model_config(ab.DEFAULT_CELLS[3], base)  # deformable_anchor
    assert mc.representation == "anchor" and mc.deform and mc.levels == 3

    frozen = ab.cell_model_config(ab.DEFAULT_CELLS[2], base)
    assert not frozen.deform

    feat = ab.cell_model_config(ab.DEFAULT_CELLS[1], base)
    assert feat.representation == "feature" and feat.deform

    mlpe = ab.cell_model_config(ab.DEFAULT_CELLS[4], base)
    assert mlpe.encoding == "mlpe"


def test_single_level_cell_uses_finest_resolution():
    base = ModelConfig(levels=3, base_res=4, growth=1.5, width=16,
                       hidden_layers=2)
    single = ab.cell_model_config(ab.DEFAULT_CELLS[0], base)
    finest = level_resolutions(4, 1.5, 3)[-1]
    assert single.levels == 1 and single.base_res == finest
    # width and the untouched axes carry over from the base
    assert single.width == base.width


def test_reference_points_need_analytic_field():
    scn = sc.synth_scene("sphere", views=2, resolution=12, seed=0)
    pts = ab.reference_points(scn, resolution=32, n_samples=500, seed=1)
    assert pts.shape == (500, 3)
    r = np.linalg.norm(pts, axis=1)
    assert abs(r.mean() - 0.35) < 0.02

    bare = sc.Scene(cameras=scn.cameras, images=scn.images, masks=scn.masks,
                    bbox=scn.bbox, analytic=None)
    with pytest.raises(ValueError, match="analytic"):
        ab.reference_points(bare, 32, 100, 1)


def test_run_ablation_records_failures_and_continues(tmp_path):
    scn = sc.synth_scene("sphere", views=2, resolution=12, seed=0)
    tiny = ModelConfig(levels=2, base_res=4, growth=1.5, width=8,
                       hidden_layers=1)
    tc = TrainConfig(iterations=2, rays_per_batch=8, n_coarse=6,
                     n_importance=2, up_rounds=1, pretrain_steps=4,
                     checkpoint_every=0, log_every=1, seed=1)

    class ExplodingScene:
        """Duck-typed scene whose ray draws fail, to exercise per-cell capture."""
        def __init__(self, inner):
            self._inner = inner
        def __getattr__(self, k):
            return getattr(self._inner, k)
        @property
        def images(self):
            raise RuntimeError("boom")

    result = ab.run_ablation({"sphere": scn}, tiny, tc,
                             cells=(ab.Cell("works", "multi", "anchor", True),),
                             mesh_resolution=16, reference_resolution=24,
                             samples=400, out_dir=None, workers=1)
    # 4 pretrain steps leave a near-constant field: the cell may legitimately
    # fail with an empty mesh, but it must be *recorded*, not raised
    assert len(result["rows"]) == 1
    row = result["rows"][0]
    assert row["scene"] == "sphere" and row["cell"] == "works"
    assert row["status"] in ("ok", "failed")
    if row["status"] == "failed":
        assert row["error"] != "" and row["chamfer"] == ""
        assert result["means"] == {}
    else:
        assert isinstance(row["chamfer"], float)
        assert result["means"]["works"] == pytest.approx(row["chamfer"])

    exploding = ExplodingScene(scn)
    res2 = ab.run_ablation({"sphere": exploding}, tiny, tc,
                           cells=(ab.Cell("works", "multi", "anchor", True),
                                  ab.Cell("other", "multi", "feature", True)),
                           mesh_resolution=16, reference_resolution=24,
                           samples=400, workers=1)
    assert [r["status"] for r in res2["rows"]] == ["failed", "failed"]
    assert all("boom" in r["error"] for r in res2["rows"])
    assert res2["means"] == {}


def test_write_table_round_trips_chamfer(tmp_path):
    rows = [{"scene": "sphere", "cell": "works", "levels": "multi",
             "mode": "anchor", "opt_grid": 1, "encoding": "hpe",
             "chamfer": 0.012345678901234567, "status": "ok",
             "seconds": 1.23, "error": ""},
            {"scene": "sphere", "cell": "broken", "levels": "multi",
             "mode": "feature", "opt_grid": 0, "encoding": "hpe",
             "chamfer": "", "status": "failed", "seconds": 0.5,
             "error": "ValueError: empty mesh"}]
    path = str(tmp_path / "table.csv")
    ab.write_table(path, {"rows": rows, "means": {}})
    with open(path, newline="") as fh:
        back = list(csv.DictReader(fh))
    assert list(back[0]) == ab.CSV_HEADER
    assert float(back[0]["chamfer"]) == rows[0]["chamfer"]
    assert back[1]["chamfer"] == "" and back[1]["status"] == "failed"
    assert "empty mesh" in back[1]["error"]
