"""Subcommand CLI wiring the full twin experiment.

Stages write their artifacts plus a manifest (inputs hash, seed, package
version, output hashes).  A stage whose inputs hash is unchanged is
skipped unless --force is given, so the pipeline is re-entrant and
content-addressed.

Exit codes: 0 ok, 2 config error, 3 missing stage dependency,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .esmda import (
    MemberForward,
    ObservationSet,
    run_baseline_esmda,
    run_shm_ked,
    select_dct_indices,
    synthesize_observations,
)
from .flowsim import SimulationError, simulate
from .geostat import draw_field, generate_prior_library, model_from_lnKx
from .gridmodel import (
    Ensemble,
    devectorize,
    load_matrix,
    load_model_csv,
    save_matrix,
    save_model_csv,
    vertical_average,
)
from .metrics import combined_norm, rmse, ssim, write_field_metrics_csv, write_member_rmse_csv
from .pem import impedance_map
from .seeding import mix64
from .sparsedict import ksvd_train, load_dictionary, save_dictionary

_TAG_PRIOR = 0x7072696F  # 'prio'
_TAG_TRUTH = 0x74727574  # 'trut'
_TAG_DICT = 0x64696374  # 'dict'
_TAG_ASSIM = 0x61737369  # 'assi'
_TAG_TRUTH_OBS = 0x746F6273  # 'tobs'

ARM_LABELS = {"esmda": "ES-MDA", "shm-ked": "SHM-KED"}


class DependencyError(RuntimeError):
    def __init__(self, missing_stage: str):
        self.missing_stage = missing_stage
        super().__init__(f"missing artifacts of stage '{missing_stage}'; run it first")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_strings(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode())
        h.update(b"\x00")
    return h.hexdigest()


def _write_manifest(stage_dir: Path, stage: str, inputs_hash: str, seed: int, files) -> None:
    manifest = {
        "stage": stage,
        "inputs_hash": inputs_hash,
        "seed": seed,
        "version": __version__,
        "outputs": {name: _sha256_file(stage_dir / name) for name in sorted(files)},
    }
    (stage_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_manifest(stage_dir: Path, stage: str) -> dict:
    path = stage_dir / "manifest.json"
    if not path.exists():
        raise DependencyError(stage)
    return json.loads(path.read_text())


def _stage_current(stage_dir: Path, inputs_hash: str) -> bool:
    path = stage_dir / "manifest.json"
    if not path.exists():
        return False
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("inputs_hash") != inputs_hash:
        return False
    return all((stage_dir / name).exists() for name in manifest.get("outputs", {}))


def _save_matrix_csv(path, matrix) -> None:
    np.savetxt(path, np.atleast_2d(matrix), fmt="%.17g", delimiter=",")


def _load_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_generate_prior(cfg: RunConfig, force: bool) -> Path:
    stage_dir = cfg.workdir / "prior"
    inputs = _hash_strings(cfg.subset_json("grid", "prior"), f"seed={cfg.seed}")
    if not force and _stage_current(stage_dir, inputs):
        return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)

    library = generate_prior_library(cfg.grid, cfg.prior_spec, cfg.n_models, mix64(cfg.seed, _TAG_PRIOR))
    vectors = np.array(
        [field.ravel()[cfg.grid.active_flat] for field in library.lnKx_fields]
    )
    save_matrix(stage_dir / "library.bin", vectors)
    library.save_manifest_csv(stage_dir / "library_manifest.csv")
    _write_manifest(stage_dir, "generate-prior", inputs, cfg.seed,
                    ["library.bin", "library_manifest.csv"])
    return stage_dir


def stage_learn_dict(cfg: RunConfig, force: bool) -> Path:
    prior_manifest = _read_manifest(cfg.workdir / "prior", "generate-prior")
    stage_dir = cfg.workdir / "dict"
    inputs = _hash_strings(
        prior_manifest["outputs"]["library.bin"],
        cfg.subset_json("dictionary", "esmda"),
        f"seed={cfg.seed}",
    )
    if not force and _stage_current(stage_dir, inputs):
        return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)

    library = load_matrix(cfg.workdir / "prior" / "library.bin")
    dictionary = ksvd_train(
        library.T, cfg.n_atoms, cfg.t0, cfg.ksvd_sweeps, mix64(cfg.seed, _TAG_DICT)
    )
    save_dictionary(
        stage_dir / "dictionary",
        dictionary,
        meta={
            "t0": cfg.t0,
            "sweeps": cfg.ksvd_sweeps,
            "seed": cfg.seed,
            "training_hash": prior_manifest["outputs"]["library.bin"],
        },
    )
    _write_manifest(stage_dir, "learn-dict", inputs, cfg.seed,
                    ["dictionary.bin", "dictionary.json"])
    return stage_dir


def _truth_sections(cfg: RunConfig) -> str:
    return cfg.subset_json(
        "grid", "prior", "truth", "regressions", "fluids", "wells",
        "schedule", "numerics", "aquifer", "pem", "dct", "noise",
    )


def stage_run_truth(cfg: RunConfig, force: bool) -> Path:
    stage_dir = cfg.workdir / "truth"
    inputs = _hash_strings(_truth_sections(cfg), f"seed={cfg.seed}")
    if not force and _stage_current(stage_dir, inputs):
        return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)

    lnKx, _kind = draw_field(cfg.grid, cfg.truth_spec, mix64(cfg.seed, _TAG_TRUTH))
    model = model_from_lnKx(lnKx, cfg.regressions, cfg.phi_bounds)
    sim = simulate(model, cfg.grid, cfg.fluids, cfg.wells, cfg.schedule, cfg.numerics, cfg.aquifer)

    maps = {
        t: impedance_map(model, np.nan_to_num(s3), np.nan_to_num(p3), cfg.pem_params,
                         cfg.pem_fluids, cfg.grid, cfg.overburden_bar)
        for t, (p3, s3) in sim.snapshots.items()
    }
    if cfg.schedule.survey_times:
        if cfg.dct_rule["rule"] == "keep":
            dct_indices = select_dct_indices(maps, cfg.schedule, keep=int(cfg.dct_rule["keep"]))
        else:
            dct_indices = select_dct_indices(maps, cfg.schedule, energy=float(cfg.dct_rule["energy"]))
        mode = "production+impedance"
    else:
        dct_indices = np.zeros((0, 2), dtype=int)
        mode = "production-only"
    obs = synthesize_observations(
        sim, maps, cfg.schedule, cfg.noise, mix64(cfg.seed, _TAG_TRUTH_OBS), mode, dct_indices
    )

    files = ["truth_model.csv", "production.csv", "dct_indices.csv", "observations.csv"]
    save_model_csv(stage_dir / "truth_model.csv", model, cfg.grid)
    with open(stage_dir / "production.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["time_days", "well", "bhp_bar", "wct"])
        for it, t in enumerate(sim.times):
            for wi, name in enumerate(sim.well_names):
                w.writerow([format(t, ".17g"), name,
                            format(sim.bhp[wi, it], ".17g"), format(sim.wct[wi, it], ".17g")])
    with open(stage_dir / "dct_indices.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col"])
        for r, c in dct_indices:
            w.writerow([int(r), int(c)])
    with open(stage_dir / "observations.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "time_days", "label", "value", "sigma"])
        for i in range(obs.n_data):
            w.writerow([obs.kinds[i], format(obs.times[i], ".17g"), obs.labels[i],
                        format(obs.values[i], ".17g"), format(obs.sigma[i], ".17g")])
    for t in cfg.schedule.survey_times:
        name = f"impedance_t{t:g}.csv"
        _save_matrix_csv(stage_dir / name, maps[t])
        files.append(name)
    _write_manifest(stage_dir, "run-truth", inputs, cfg.seed, files)
    return stage_dir


def _load_observations(stage_dir: Path) -> ObservationSet:
    kinds, times, labels, values, sigma = [], [], [], [], []
    with open(stage_dir / "observations.csv", newline="") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            kinds.append(row[0])
            times.append(float(row[1]))
            labels.append(row[2])
            values.append(float(row[3]))
            sigma.append(float(row[4]))
    return ObservationSet(
        values=np.array(values),
        sigma=np.array(sigma),
        kinds=np.array(kinds, dtype=object),
        times=np.array(times),
        labels=np.array(labels, dtype=object),
    )


def _load_dct_indices(stage_dir: Path) -> np.ndarray:
    rows = []
    with open(stage_dir / "dct_indices.csv", newline="") as f:
        r = csv.reader(f)
        next(r)
        rows = [(int(a), int(b)) for a, b in r]
    return np.array(rows, dtype=int).reshape(-1, 2)


def _member_forward(cfg: RunConfig) -> MemberForward:
    return MemberForward(
        grid=cfg.grid,
        fluids=cfg.fluids,
        wells=cfg.wells,
        schedule=cfg.schedule,
        numerics=cfg.numerics,
        aquifer=cfg.aquifer,
        regressions=cfg.regressions,
        phi_bounds=cfg.phi_bounds,
        pem_params=cfg.pem_params,
        pem_fluids=cfg.pem_fluids,
        overburden_bar=cfg.overburden_bar,
    )


def _save_series_csv(path, times, well_names, bhp, wct) -> None:
    """Per-member series: member, well, time, bhp, wct."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["member", "well", "time_days", "bhp_bar", "wct"])
        for m in range(bhp.shape[0]):
            for wi, name in enumerate(well_names):
                for it, t in enumerate(times):
                    w.writerow([m, name, format(t, ".17g"),
                                format(bhp[m, wi, it], ".17g"), format(wct[m, wi, it], ".17g")])


def stage_assimilate(cfg: RunConfig, method: str, force: bool, threads: int) -> Path:
    truth_manifest = _read_manifest(cfg.workdir / "truth", "run-truth")
    prior_manifest = _read_manifest(cfg.workdir / "prior", "generate-prior")
    parts = [
        truth_manifest["outputs"]["observations.csv"],
        prior_manifest["outputs"]["library.bin"],
        cfg.subset_json("mda", "esmda", "dictionary"),
        f"seed={cfg.seed}",
        f"method={method}",
    ]
    if method == "shm-ked":
        dict_manifest = _read_manifest(cfg.workdir / "dict", "learn-dict")
        parts.append(dict_manifest["outputs"]["dictionary.bin"])
    stage_dir = cfg.workdir / f"assim_{method}"
    inputs = _hash_strings(*parts)
    if not force and _stage_current(stage_dir, inputs):
        return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)

    library = load_matrix(cfg.workdir / "prior" / "library.bin")
    initial = Ensemble(library[: cfg.n_ensemble], kind="raw-lnK")
    observations = _load_observations(cfg.workdir / "truth")
    forward = _member_forward(cfg)
    assim_seed = mix64(cfg.seed, _TAG_ASSIM)

    if method == "esmda":
        result = run_baseline_esmda(
            initial, observations, forward, cfg.mda, assim_seed, cfg.energy, threads
        )
    else:
        dictionary = load_dictionary(cfg.workdir / "dict" / "dictionary")
        dct_indices = _load_dct_indices(cfg.workdir / "truth")
        result = run_shm_ked(
            initial, observations, forward, cfg.mda, dictionary, cfg.t0, dct_indices,
            assim_seed, cfg.energy, threads,
            resparsify_each=cfg.resparsify_each, resparsify_final=cfg.resparsify_final,
        )

    files = []
    _save_matrix_csv(stage_dir / "rmse_trace.csv", result.rmse_trace)
    files.append("rmse_trace.csv")
    act = cfg.grid.active_flat
    save_matrix(stage_dir / "initial_fields.bin",
                np.array([f.ravel()[act] for f in np.nan_to_num(result.initial_lnKx_fields)]))
    save_matrix(stage_dir / "final_fields.bin",
                np.array([f.ravel()[act] for f in np.nan_to_num(result.final_lnKx_fields)]))
    save_matrix(stage_dir / "states_final.bin", result.states[-1].members)
    files += ["initial_fields.bin", "final_fields.bin", "states_final.bin"]

    times = np.array(cfg.schedule.report_times)
    for label, stage_idx in (("initial", 0), ("final", len(result.well_series) - 1)):
        bhp, wct = result.well_series[stage_idx]
        name = f"series_{label}.csv"
        _save_series_csv(stage_dir / name, times, [w.name for w in cfg.wells], bhp, wct)
        files.append(name)
    for t, stack in result.final_impedance.items():
        name = f"impedance_mean_t{t:g}.csv"
        _save_matrix_csv(stage_dir / name, stack.mean(axis=0))
        files.append(name)
    _write_manifest(stage_dir, f"assimilate-{method}", inputs, cfg.seed, files)
    return stage_dir


def stage_report(cfg: RunConfig, force: bool) -> Path:
    truth_manifest = _read_manifest(cfg.workdir / "truth", "run-truth")
    arm_manifests = {
        m: _read_manifest(cfg.workdir / f"assim_{m}", f"assimilate --method {m}")
        for m in ("esmda", "shm-ked")
    }
    stage_dir = cfg.workdir / "report"
    inputs = _hash_strings(
        truth_manifest["inputs_hash"],
        *(json.dumps(arm_manifests[m]["outputs"], sort_keys=True) for m in sorted(arm_manifests)),
    )
    if not force and _stage_current(stage_dir, inputs):
        return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)

    grid = cfg.grid
    truth_model = load_model_csv(cfg.workdir / "truth" / "truth_model.csv", grid)
    truth_map = vertical_average(np.nan_to_num(truth_model.lnKx), grid)
    truth_range = float(np.nanmax(truth_map) - np.nanmin(truth_map))

    rmse_traces = {
        m: _load_matrix_csv(cfg.workdir / f"assim_{m}" / "rmse_trace.csv")
        for m in ("esmda", "shm-ked")
    }
    write_member_rmse_csv(
        stage_dir / "member_rmse.csv",
        {
            "initial": rmse_traces["esmda"][0],
            "esmda": rmse_traces["esmda"][-1],
            "shm_ked": rmse_traces["shm-ked"][-1],
        },
    )

    def mean_map(arm: str, which: str) -> np.ndarray:
        fields = load_matrix(cfg.workdir / f"assim_{arm}" / f"{which}_fields.bin")
        mean_field = devectorize(fields.mean(axis=0), grid, fill=0.0)
        return vertical_average(mean_field, grid)

    rows = {
        "initial": (
            ssim(truth_map, mean_map("esmda", "initial"), dynamic_range=truth_range),
            float(rmse_traces["esmda"][0].mean()),
        ),
        "esmda": (
            ssim(truth_map, mean_map("esmda", "final"), dynamic_range=truth_range),
            float(rmse_traces["esmda"][-1].mean()),
        ),
        "shm_ked": (
            ssim(truth_map, mean_map("shm-ked", "final"), dynamic_range=truth_range),
            float(rmse_traces["shm-ked"][-1].mean()),
        ),
    }
    write_field_metrics_csv(
        stage_dir / "field_metrics.csv",
        {label: (s, r, combined_norm(s, r)) for label, (s, r) in rows.items()},
    )
    files = ["member_rmse.csv", "field_metrics.csv"]

    # per-well ensemble series with the truth overlaid (fan-chart content)
    truth_prod = _load_production_csv(cfg.workdir / "truth" / "production.csv")
    for label, arm, which in (
        ("initial", "esmda", "initial"),
        ("esmda", "esmda", "final"),
        ("shm_ked", "shm-ked", "final"),
    ):
        series = _load_series_csv(cfg.workdir / f"assim_{arm}" / f"series_{which}.csv")
        for quantity in ("bhp", "wct"):
            name = f"wells_{quantity}_{label}.csv"
            _write_wells_csv(stage_dir / name, truth_prod, series, quantity)
            files.append(name)

    _write_manifest(stage_dir, "report", inputs, cfg.seed, files)
    return stage_dir


def _load_production_csv(path):
    """truth production -> {(well, time): (bhp, wct)} plus ordered axes."""
    rows = {}
    wells, times = [], []
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for t, well, bhp, wct in r:
            t = float(t)
            rows[(well, t)] = (float(bhp), float(wct))
            if well not in wells:
                wells.append(well)
            if t not in times:
                times.append(t)
    return {"rows": rows, "wells": wells, "times": times}


def _load_series_csv(path):
    """ensemble series -> {(member, well, time): (bhp, wct)} plus member count."""
    rows = {}
    n_members = 0
    with open(path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for m, well, t, bhp, wct in r:
            m = int(m)
            rows[(m, well, float(t))] = (float(bhp), float(wct))
            n_members = max(n_members, m + 1)
    return {"rows": rows, "n_members": n_members}


def _write_wells_csv(path, truth_prod, series, quantity) -> None:
    col = 0 if quantity == "bhp" else 1
    n = series["n_members"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["well", "time_days", "truth"] + [f"m{m:03d}" for m in range(n)])
        for well in truth_prod["wells"]:
            for t in truth_prod["times"]:
                row = [well, format(t, ".17g"), format(truth_prod["rows"][(well, t)][col], ".17g")]
                row += [format(series["rows"][(m, well, t)][col], ".17g") for m in range(n)]
                w.writerow(row)


def stage_plot(cfg: RunConfig, force: bool) -> Path:
    report_manifest = _read_manifest(cfg.workdir / "report", "report")
    stage_dir = cfg.workdir / "plots"
    inputs = _hash_strings(json.dumps(report_manifest["outputs"], sort_keys=True))
    if not force and _stage_current(stage_dir, inputs):
        return stage_dir

    from .plots import plot_emit

    files = plot_emit(cfg, stage_dir)
    _write_manifest(stage_dir, "plot", inputs, cfg.seed, files)
    return stage_dir


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="sparsehm",
        description="Sparse-coded ensemble history matching twin experiment.",
    )
    parser.add_argument("command", choices=[
        "generate-prior", "learn-dict", "run-truth", "assimilate", "report", "plot", "run-all",
    ])
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--force", action="store_true", help="re-run even if inputs are unchanged")
    parser.add_argument("--threads", type=int, default=1, help="parallel member simulations")
    parser.add_argument("--method", choices=["esmda", "shm-ked"], default=None,
                        help="assimilation arm (required for 'assimilate')")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv if argv is not None else sys.argv[1:])
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed, raw={**cfg.raw, "seed": args.seed})
        if args.command == "assimilate" and args.method is None:
            raise ConfigError(["'assimilate' needs --method esmda or --method shm-ked"])

        if args.command == "generate-prior":
            out = stage_generate_prior(cfg, args.force)
        elif args.command == "learn-dict":
            out = stage_learn_dict(cfg, args.force)
        elif args.command == "run-truth":
            out = stage_run_truth(cfg, args.force)
        elif args.command == "assimilate":
            out = stage_assimilate(cfg, args.method, args.force, args.threads)
        elif args.command == "report":
            out = stage_report(cfg, args.force)
        elif args.command == "plot":
            out = stage_plot(cfg, args.force)
        else:  # run-all
            stage_generate_prior(cfg, args.force)
            stage_learn_dict(cfg, args.force)
            stage_run_truth(cfg, args.force)
            stage_assimilate(cfg, "esmda", args.force, args.threads)
            stage_assimilate(cfg, "shm-ked", args.force, args.threads)
            stage_report(cfg, args.force)
            out = stage_plot(cfg, args.force)
        print(f"[sparsehm] {args.command} done -> {out}")
        return 0
    except ConfigError as e:
        print(f"[sparsehm] config error:\n{e}", file=sys.stderr)
        return 2
    except DependencyError as e:
        print(f"[sparsehm] dependency error: {e}", file=sys.stderr)
        return 3
    except (SimulationError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"[sparsehm] numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
