"""Calibrated desk-scale task configs used by the acceptance suite and scripts/.

Sizes are scaled down so each fixture trains on one CPU core within its
time budget; the thresholds they are checked against live in the tests.
"""
from __future__ import annotations

import copy

from .pipeline import TaskConfig, config_from_dict

DYNAMICS = {
    "task": "dynamics",
    "seed": 0,
    "inr": {"d_z": 32, "width": 32, "depth": 2, "omega0": 10.0},
    "encoder": {"alpha": 1e-2, "K": 8},
    "inr_train": {"lr": 2e-3, "epochs": 200, "batch_size": 64, "point_keep": 0.4, "score_all_points": True,
                  "scheduler_decay": 0.5, "patience": 15},
    "processor": {"node_width": 128, "node_depth": 3, "substeps": 2, "out_scale": 0.1},
    "processor_train": {"lr": 1e-3, "epochs": 400, "batch_size": 16, "scheduler_decay": 0.5,
                        "patience": 40, "min_lr": 1e-5},
    "data": {"pde": "heat2d", "n_train": 64, "n_test": 16, "grid_res": 16, "pct": 20.0,
             "dt": 0.05, "nu": 0.05, "k_max": 1},
}

GEOMETRY = {
    "task": "geometry",
    "seed": 0,
    "norm_mode": "separate-featurewise",
    "inr": {"d_z": 16, "width": 32, "depth": 2, "omega0": 5.0},
    "encoder": {"alpha": 1e-2, "K": 3},
    "inr_train": {"lr": 1e-3, "epochs": 150, "batch_size": 32},
    "processor": {"hidden": 64, "blocks": 2},
    "processor_train": {"lr": 1e-3, "epochs": 1000, "batch_size": 32, "scheduler_decay": 0.5,
                        "patience": 40, "min_lr": 1e-5},
    "data": {"n_train": 128, "n_test": 16, "prior": {"res": 16, "n_ctrl": 5, "amplitude": 0.15,
                                                    "gamma": 4.0, "n_boundary": 4096}},
}

FIXTURES = {"dynamics": DYNAMICS, "geometry": GEOMETRY}


def fixture_config(name: str, **overrides) -> TaskConfig:
    raw = copy.deepcopy(FIXTURES[name])
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)
