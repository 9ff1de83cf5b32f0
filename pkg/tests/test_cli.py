import json
from pathlib import Path

import numpy as np
import pytest

from sparsehm.cli import main
from sparsehm.config import ConfigError, load_config


def run_cli(*args):
    return main(list(args))


def test_config_errors_are_enumerated(tmp_path):
    bad = {
        "workdir": str(tmp_path / "w"),
        "seed": 1,
        "grid": {"nx": 4, "ny": 4, "nz": 1, "dx": -1.0, "dy": 100.0, "dz": [10.0]},
        "prior": {"kind": "nope", "n_models": 1},
        "wells": [],
        "schedule": {"report_times": [100, 50]},
        "mda": {"alphas": [2.0, 3.0]},
        "esmda": {"n_ensemble": 1},
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    with pytest.raises(ConfigError) as err:
        load_config(path)
    text = str(err.value)
    for fragment in ("grid", "prior", "well", "schedule", "mda", "n_ensemble"):
        assert fragment in text
    assert run_cli("generate-prior", "--config", str(path)) == 2


def test_config_requires_balanced_rates(tmp_path, tiny_config):
    cfg = json.loads(Path(tiny_config).read_text())
    cfg["wells"][0]["rate"] = 100.0
    path = tmp_path / "unbalanced.json"
    path.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="balance"):
        load_config(path)


def test_assimilate_before_truth_is_dependency_error(tiny_config, capsys):
    assert run_cli("generate-prior", "--config", str(tiny_config)) == 0
    code = run_cli("assimilate", "--method", "esmda", "--config", str(tiny_config))
    assert code == 3
    assert "run-truth" in capsys.readouterr().err


def test_assimilate_requires_method(tiny_config):
    assert run_cli("assimilate", "--config", str(tiny_config)) == 2


def test_full_pipeline_and_reentry(tiny_config):
    cfg = load_config(tiny_config)
    assert run_cli("run-all", "--config", str(tiny_config)) == 0

    workdir = cfg.workdir
    expected = [
        "prior/library.bin",
        "prior/manifest.json",
        "dict/dictionary.bin",
        "truth/observations.csv",
        "assim_esmda/rmse_trace.csv",
        "assim_shm-ked/rmse_trace.csv",
        "report/member_rmse.csv",
        "report/field_metrics.csv",
        "plots/rmse_members.png",
    ]
    for rel in expected:
        assert (workdir / rel).exists(), rel

    # second run with unchanged config + seed skips every stage and leaves
    # manifests byte-identical
    manifests = {
        rel: (workdir / rel / "manifest.json").read_bytes()
        for rel in ("prior", "dict", "truth", "assim_esmda", "assim_shm-ked", "report", "plots")
    }
    mtimes = {rel: (workdir / rel / "manifest.json").stat().st_mtime_ns for rel in manifests}
    assert run_cli("run-all", "--config", str(tiny_config)) == 0
    for rel, blob in manifests.items():
        assert (workdir / rel / "manifest.json").read_bytes() == blob
        assert (workdir / rel / "manifest.json").stat().st_mtime_ns == mtimes[rel]


def test_forced_rerun_is_byte_identical(tiny_config):
    cfg = load_config(tiny_config)
    assert run_cli("run-all", "--config", str(tiny_config)) == 0
    workdir = cfg.workdir
    tracked = [
        "prior/manifest.json",
        "truth/manifest.json",
        "truth/observations.csv",
        "assim_esmda/rmse_trace.csv",
        "assim_shm-ked/rmse_trace.csv",
        "report/member_rmse.csv",
        "report/field_metrics.csv",
        "report/manifest.json",
        "plots/rmse_members.png",
        "plots/manifest.json",
    ]
    before = {rel: (workdir / rel).read_bytes() for rel in tracked}
    assert run_cli("run-all", "--config", str(tiny_config), "--force") == 0
    for rel, blob in before.items():
        assert (workdir / rel).read_bytes() == blob, rel


def test_seed_override_changes_artifacts(tiny_config):
    cfg = load_config(tiny_config)
    assert run_cli("generate-prior", "--config", str(tiny_config)) == 0
    first = (cfg.workdir / "prior" / "manifest.json").read_text()
    assert run_cli("generate-prior", "--config", str(tiny_config), "--seed", "8") == 0
    second = (cfg.workdir / "prior" / "manifest.json").read_text()
    assert json.loads(first)["outputs"] != json.loads(second)["outputs"]


def test_report_tables_have_expected_layout(tiny_config):
    cfg = load_config(tiny_config)
    assert run_cli("run-all", "--config", str(tiny_config)) == 0
    member = (cfg.workdir / "report" / "member_rmse.csv").read_text().splitlines()
    assert member[0] == "realisation,initial,esmda,shm_ked"
    assert len(member) == 1 + cfg.n_ensemble
    fields = (cfg.workdir / "report" / "field_metrics.csv").read_text().splitlines()
    assert fields[0] == "model,ssim,rmse,combined_norm"
    assert [line.split(",")[0] for line in fields[1:]] == ["initial", "esmda", "shm_ked"]
    wells = (cfg.workdir / "report" / "wells_wct_shm_ked.csv").read_text().splitlines()
    assert wells[0].startswith("well,time_days,truth,m000")
