"""Run configuration: JSON file -> validated nested config with defaults.

Shape (all keys optional, defaults shown by ``RunConfig().to_dict()``):

    {
      "scene": "path/to/scene_dir",
      "out": "runs/exp1",
      "seed": 0,
      "workers": 1,
      "model": { ... ModelConfig keys ... },
      "train": { ... TrainConfig keys ..., "lambda_eik": 0.1,
                 "lambda_norm": 3e-5, "lambda_mask": 0.1 },
      "mesh": {"resolution": 128},
      "ablate": {"views": 10, "resolution": 64, "mesh_resolution": 96,
                 "scenes": ["sphere", "torus", "box_with_hole"],
                 "reference_resolution": 128, "samples": 20000}
    }

Unknown keys anywhere are rejected with the offending name. The seed
precedence is: CLI flag > config file > NEUDA_SEED env var > 0.
"""

import json
import os

from .model import ModelConfig
from .trainer import LossWeights, TrainConfig

ABLATE_DEFAULTS = {
    "views": 10,
    "resolution": 64,
    "mesh_resolution": 96,
    "reference_resolution": 128,
    "samples": 20000,
    "scenes": ["sphere", "torus", "box_with_hole"],
}

_LAMBDA_KEYS = {"lambda_eik": "eik", "lambda_norm": "norm", "lambda_mask": "mask"}


class RunConfig:
    def __init__(self, data=None):
        data = dict(data or {})
        unknown = set(data) - {"scene", "out", "seed", "workers", "model",
                               "train", "mesh", "ablate"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        self.scene = data.get("scene")
        self.out = data.get("out")
        self.seed = data.get("seed")
        self.workers = data.get("workers")

        self.model_kw = dict(data.get("model") or {})
        bad = set(self.model_kw) - set(ModelConfig.FIELDS)
        if bad:
            raise ValueError(f"unknown model config keys: {sorted(bad)}")

        train_kw = dict(data.get("train") or {})
        lambdas = {}
        for k, attr in _LAMBDA_KEYS.items():
            if k in train_kw:
                lambdas[attr] = train_kw.pop(k)
        bad = set(train_kw) - set(TrainConfig.FIELDS)
        if bad:
            raise ValueError(f"unknown train config keys: {sorted(bad)}")
        self.train_kw = train_kw
        self.lambda_kw = lambdas

        mesh_kw = dict(data.get("mesh") or {})
        bad = set(mesh_kw) - {"resolution"}
        if bad:
            raise ValueError(f"unknown mesh config keys: {sorted(bad)}")
        self.mesh_resolution = int(mesh_kw.get("resolution", 128))

        ablate_kw = dict(data.get("ablate") or {})
        bad = set(ablate_kw) - set(ABLATE_DEFAULTS)
        if bad:
            raise ValueError(f"unknown ablate config keys: {sorted(bad)}")
        self.ablate = {**ABLATE_DEFAULTS, **ablate_kw}

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(json.load(fh))

    def resolve_seed(self, flag_seed=None):
        if flag_seed is not None:
            return int(flag_seed)
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get("NEUDA_SEED")
        if env is not None:
            return int(env)
        return 0

    def model_config(self, seed, **overrides):
        kw = dict(self.model_kw)
        kw.update(overrides)
        kw.setdefault("seed", seed)
        return ModelConfig(**kw)

    def train_config(self, seed, **overrides):
        kw = dict(self.train_kw)
        kw.update(overrides)
        kw.setdefault("seed", seed)
        if self.lambda_kw:
            kw.setdefault("weights", LossWeights(**self.lambda_kw))
        return TrainConfig(**kw)

    def to_dict(self):
        return {"scene": self.scene, "out": self.out, "seed": self.seed,
                "workers": self.workers, "model": dict(self.model_kw),
                "train": {**self.train_kw,
                          **{k: getattr(LossWeights(**self.lambda_kw), a)
                             for k, a in _LAMBDA_KEYS.items()}},
                "mesh": {"resolution": self.mesh_resolution},
                "ablate": dict(self.ablate)}
