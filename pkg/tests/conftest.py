import json
from pathlib import Path

import pytest


@pytest.fixture
def tiny_config(tmp_path):
    """A fast, complete twin configuration for pipeline tests."""
    cfg = {
        "workdir": str(tmp_path / "run"),
        "seed": 7,
        "grid": {"nx": 8, "ny": 8, "nz": 1, "dx": 120.0, "dy": 120.0, "dz": [10.0]},
        "prior": {
            "kind": "channel+gaussian",
            "channel": {"width": 2, "amplitude": 1.0, "period": 10.0,
                        "ln_channel": 6.0, "ln_background": 3.4, "n_channels": 1},
            "variogram": {"lambda_x": 300.0, "lambda_y": 200.0, "sill": 0.1, "mean": 0.0},
            "n_models": 24,
        },
        "regressions": {"mode": "custom", "layers": [[0.03, 0.08, 0.9, -0.5]],
                        "phi_bounds": [0.01, 0.34]},
        "fluids": {},
        "wells": [
            {"name": "INJ", "i": 1, "j": 1, "layers": [0], "control": "injector", "rate": 250.0},
            {"name": "PRO", "i": 6, "j": 6, "layers": [0], "control": "producer", "rate": 250.0},
        ],
        "schedule": {
            "report_times": [120, 240, 360, 480, 600, 720, 840, 960],
            "survey_times": [480, 960],
            "history_end": 960,
        },
        "numerics": {"cfl": 0.8, "ds_max": 0.08},
        "aquifer": None,
        "pem": {"params": {}, "fluids": {}},
        "dct": {"rule": "keep", "keep": 10},
        "noise": {},
        "mda": {"n_assimilations": 2, "alphas": [2.0, 2.0]},
        "esmda": {"energy": 0.999, "n_ensemble": 6},
        "dictionary": {"n_atoms": 16, "t0": 6, "sweeps": 3},
    }
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
