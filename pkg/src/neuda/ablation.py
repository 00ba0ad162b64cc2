"""Grid-representation ablation harness.

Trains one model per (scene, cell) with a shared seed, extracts a mesh from
each, and scores it by symmetric Chamfer distance against a reference mesh
sampled from the scene's analytic field. Cells vary three axes:

  levels   "single" (one grid at the finest resolution of the multi config)
           or "multi" (the full hierarchy)
  mode     "feature" (learned vertex features) or "anchor" (deformed anchors)
  opt_grid whether the grid parameters train; off freezes anchor offsets at
           zero / feature vectors at their init

plus an encoding axis (hierarchical vs per-level multi-frequency) carried by
the extra *_mlpe cell. A failed cell is recorded in the table and the rest
of the grid proceeds.
"""

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .anchors import level_resolutions
from .meshing import chamfer, extract_mesh, sample_mesh, save_obj
from .model import ModelConfig
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class Cell:
    name: str
    levels: str          # "single" | "multi"
    mode: str            # "feature" | "anchor"
    opt_grid: bool
    encoding: str = "hpe"


DEFAULT_CELLS = (
    Cell("single_feature", "single", "feature", True),
    Cell("multi_feature", "multi", "feature", True),
    Cell("fixed_anchor", "multi", "anchor", False),
    Cell("deformable_anchor", "multi", "anchor", True),
    Cell("deformable_anchor_mlpe", "multi", "anchor", True, "mlpe"),
)

CSV_HEADER = ["scene", "cell", "levels", "mode", "opt_grid", "encoding",
              "chamfer", "status", "seconds", "error"]


def cell_model_config(cell, base):
    """Materialize a cell into a model config derived from the base config."""
    kw = base.to_dict()
    kw["representation"] = cell.mode
    kw["encoding"] = cell.encoding
    kw["deform"] = cell.opt_grid
    if cell.levels == "single":
        res = level_resolutions(base.base_res, base.growth, base.levels,
                                base.max_grid_vertices)
        kw["levels"] = 1
        kw["base_res"] = res[-1]
    return ModelConfig(**kw)


def reference_points(scn, resolution, n_samples, seed):
    f = scn.analytic_sdf()
    if f is None:
        raise ValueError("scene carries no analytic field to evaluate against")
    ref = extract_mesh(f, resolution, scn.bbox)
    if ref.empty:
        raise ValueError("analytic field produced an empty reference mesh")
    return sample_mesh(ref, n_samples, seed=seed)


def run_ablation(scenes, base_model=None, train_config=None, cells=DEFAULT_CELLS,
                 mesh_resolution=96, reference_resolution=128, samples=20000,
                 out_dir=None, workers=1, verbose=False):
    """Train every (scene, cell) pair and tabulate Chamfer distances.

    scenes is a dict name -> Scene; all must carry analytic ground truth.
    Returns {"rows": [...], "means": {cell name: mean CD over scenes}}.
    Rows for failed cells carry status="failed" and the error text; their
    chamfer field is empty and they are excluded from the means.
    """
    base_model = base_model or ModelConfig()
    train_config = train_config or TrainConfig()

    refs = {name: reference_points(scn, reference_resolution, samples,
                                   seed=train_config.seed)
            for name, scn in scenes.items()}

    rows = []
    for cell in cells:
        for name, scn in scenes.items():
            row = {"scene": name, "cell": cell.name, "levels": cell.levels,
                   "mode": cell.mode, "opt_grid": int(cell.opt_grid),
                   "encoding": cell.encoding, "chamfer": "", "status": "ok",
                   "seconds": 0.0, "error": ""}
            t0 = time.perf_counter()
            try:
                mc = cell_model_config(cell, base_model)
                cell_dir = None
                if out_dir is not None:
                    cell_dir = os.path.join(out_dir, f"{name}_{cell.name}")
                result = train(scn, model_config=mc, train_config=train_config,
                               out_dir=cell_dir, workers=workers, verbose=verbose)
                mesh = extract_mesh(result.model.sdf_values, mesh_resolution,
                                    scn.bbox)
                if mesh.empty:
                    raise ValueError("trained field produced an empty mesh")
                pts = sample_mesh(mesh, samples, seed=train_config.seed)
                row["chamfer"] = chamfer(pts, refs[name]).symmetric
                if cell_dir is not None:
                    save_obj(os.path.join(cell_dir, "mesh.obj"), mesh)
            except Exception as exc:  # record the cell, keep the grid going
                row["status"] = "failed"
                row["error"] = f"{type(exc).__name__}: {exc}"
            row["seconds"] = round(time.perf_counter() - t0, 2)
            rows.append(row)
            if verbose:
                cd = row["chamfer"]
                tail = f"CD {cd:.5f}" if cd != "" else row["error"]
                print(f"[ablate] {name}/{cell.name}: {row['status']} "
                      f"({row['seconds']}s) {tail}")

    means = {}
    for cell in cells:
        vals = [r["chamfer"] for r in rows
                if r["cell"] == cell.name and r["status"] == "ok"]
        if vals:
            means[cell.name] = float(np.mean(vals))
    return {"rows": rows, "means": means}


def write_table(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        for row in result["rows"]:
            out = dict(row)
            if out["chamfer"] != "":
                out["chamfer"] = repr(float(out["chamfer"]))
            w.writerow(out)
