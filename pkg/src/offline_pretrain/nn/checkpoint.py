"""JSON checkpoints: ``{"config": ..., "params": {leaf: nested list}, "optimizer": ...}``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .mlp import MLPConfig, ParamTree, check_params
from .optim import OptimizerState


def save_checkpoint(path, cfg: MLPConfig, params: ParamTree,
                    optimizer: Optional[OptimizerState] = None) -> Path:
    doc = {"config": cfg.to_dict(), "params": {k: v.tolist() for k, v in params.items()}}
    if optimizer is not None:
        doc["optimizer"] = optimizer.to_dict()
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path) -> tuple[MLPConfig, ParamTree, Optional[OptimizerState]]:
    doc = json.loads(Path(path).read_text())
    cfg = MLPConfig.from_dict(doc["config"])
    params = ParamTree({k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()})
    check_params(params, cfg)
    opt = OptimizerState.from_dict(doc["optimizer"]) if "optimizer" in doc else None
    return cfg, params, opt
