"""Run configuration: one JSON file describes the whole twin experiment.

Parsing is strict and collects every validation problem before failing,
so a bad config reports all its errors at once.  The parsed RunConfig
carries fully constructed domain objects; the raw JSON subsets feed the
stage manifests for content-addressed re-entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .esmda import MdaSchedule, NoiseSpec, validate_schedule
from .flowsim import AquiferSpec, FluidProps, Numerics, Schedule, Well
from .geostat import ChannelSpec, LayerRegression, PUNQ_LAYER_REGRESSIONS, VariogramSpec
from .gridmodel import Grid, build_grid
from .pem import FluidModuli, RockPhysicsParams

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """All config validation problems, collected."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class RunConfig:
    workdir: Path
    seed: int
    grid: Grid
    prior_spec: object
    n_models: int
    truth_spec: object
    regressions: tuple
    phi_bounds: tuple
    fluids: FluidProps
    wells: tuple
    schedule: Schedule
    numerics: Numerics
    aquifer: AquiferSpec | None
    pem_params: RockPhysicsParams
    pem_fluids: FluidModuli
    overburden_bar: float | None
    dct_rule: dict
    noise: NoiseSpec
    mda: MdaSchedule
    energy: float
    n_ensemble: int
    n_atoms: int
    t0: int
    ksvd_sweeps: int
    resparsify_each: bool
    resparsify_final: bool
    raw: dict

    def subset_json(self, *keys: str) -> str:
        """Canonical JSON of selected raw config blocks (for manifests)."""
        return json.dumps({k: self.raw.get(k) for k in sorted(keys)}, sort_keys=True)


def _build_spec(block, errors, where):
    kind = block.get("kind", "gaussian")
    try:
        if kind == "gaussian":
            return VariogramSpec(**block["variogram"])
        if kind == "channel":
            return ChannelSpec(**block["channel"])
        if kind == "channel+gaussian":
            return (ChannelSpec(**block["channel"]), VariogramSpec(**block["variogram"]))
    except (KeyError, TypeError, ValueError) as e:
        errors.append(f"{where}: {e}")
        return None
    errors.append(f"{where}: unknown generator kind {kind!r}")
    return None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError([f"cannot read config {path}: {e}"])

    errors: list[str] = []

    def section(name, default=None):
        if name in raw:
            return raw[name]
        if default is not None:
            return default
        errors.append(f"missing config section {name!r}")
        return {}

    workdir = Path(raw.get("workdir", "runs/twin"))
    if not path.is_absolute() and not workdir.is_absolute():
        workdir = path.parent / workdir

    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        errors.append("seed must be an integer")
        seed = 0

    g = section("grid")
    grid = None
    try:
        active = None
        if "inactive_cells" in g:
            active = np.ones((g["nz"], g["ny"], g["nx"]), dtype=bool)
            for (i, j, k) in g["inactive_cells"]:
                active[k, j, i] = False
        grid = build_grid(g["nx"], g["ny"], g["nz"], g["dx"], g["dy"], g["dz"], active)
    except (KeyError, TypeError, ValueError) as e:
        errors.append(f"grid: {e}")

    prior = section("prior")
    prior_spec = _build_spec(prior, errors, "prior")
    truth_spec = prior_spec
    if "truth" in raw:
        truth_spec = _build_spec(raw["truth"], errors, "truth")
    n_models = int(prior.get("n_models", 0) or 0)
    if n_models < 2:
        errors.append("prior.n_models must be >= 2")

    reg_block = section("regressions", {"mode": "punq"})
    phi_bounds = tuple(reg_block.get("phi_bounds", (0.01, 0.35)))
    regressions: tuple = ()
    if grid is not None:
        if reg_block.get("mode", "punq") == "punq":
            if grid.nz <= len(PUNQ_LAYER_REGRESSIONS):
                regressions = PUNQ_LAYER_REGRESSIONS[: grid.nz]
            else:
                errors.append(
                    f"punq regressions cover 5 layers, grid has {grid.nz}; provide custom layers"
                )
        else:
            layers = reg_block.get("layers", [])
            if len(layers) != grid.nz:
                errors.append(f"regressions.layers must have {grid.nz} entries")
            else:
                regressions = tuple(LayerRegression(*coeffs) for coeffs in layers)

    try:
        fluids = FluidProps(**section("fluids", {}))
    except (TypeError, ValueError) as e:
        errors.append(f"fluids: {e}")
        fluids = FluidProps()

    wells = []
    for w in section("wells", []):
        try:
            layers = w.get("layers", [0])
            cells = tuple((int(w["i"]), int(w["j"]), int(k)) for k in layers)
            well = Well(
                name=w["name"],
                cells=cells,
                control=w["control"],
                rate=float(w["rate"]),
                radius=float(w.get("radius", 0.1)),
                skin=float(w.get("skin", 0.0)),
            )
            if grid is not None:
                for (i, j, k) in cells:
                    if not (0 <= i < grid.nx and 0 <= j < grid.ny and 0 <= k < grid.nz):
                        raise ValueError(f"perforation {(i, j, k)} outside the grid")
                    if not grid.active[k, j, i]:
                        raise ValueError(f"perforation {(i, j, k)} is inactive")
            wells.append(well)
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"well {w.get('name', '?')}: {e}")
    if not wells:
        errors.append("at least one well is required")

    sched_block = section("schedule")
    schedule = None
    try:
        schedule = Schedule(
            report_times=tuple(sched_block["report_times"]),
            survey_times=tuple(sched_block.get("survey_times", ())),
            history_end=sched_block.get("history_end"),
        )
    except (KeyError, TypeError, ValueError) as e:
        errors.append(f"schedule: {e}")

    try:
        numerics = Numerics(**section("numerics", {}))
    except TypeError as e:
        errors.append(f"numerics: {e}")
        numerics = Numerics()

    aquifer = None
    if raw.get("aquifer"):
        try:
            aquifer = AquiferSpec(
                faces=tuple(raw["aquifer"]["faces"]),
                pressure_bar=float(raw["aquifer"]["pressure_bar"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            errors.append(f"aquifer: {e}")
    else:
        total_inj = sum(w.rate for w in wells if w.control == "injector")
        total_prod = sum(w.rate for w in wells if w.control == "producer")
        if wells and not math.isclose(total_inj, total_prod, rel_tol=1e-12, abs_tol=1e-9):
            errors.append(
                "without an aquifer, injection and production rates must balance "
                f"(injection {total_inj}, production {total_prod} m^3/day)"
            )

    pem_block = section("pem", {})
    try:
        pem_params = RockPhysicsParams(**pem_block.get("params", {}))
    except (TypeError, ValueError) as e:
        errors.append(f"pem.params: {e}")
        pem_params = RockPhysicsParams()
    try:
        pem_fluids = FluidModuli(**pem_block.get("fluids", {}))
    except (TypeError, ValueError) as e:
        errors.append(f"pem.fluids: {e}")
        pem_fluids = FluidModuli()
    overburden_bar = pem_block.get("overburden_bar")
    if phi_bounds[1] > pem_params.phi_c:
        errors.append(
            f"regressions.phi_bounds upper {phi_bounds[1]} exceeds critical porosity {pem_params.phi_c}"
        )

    dct_rule = section("dct", {"rule": "energy", "energy": 0.98})
    if dct_rule.get("rule") == "keep":
        if int(dct_rule.get("keep", 0)) < 1:
            errors.append("dct.keep must be >= 1")
    elif dct_rule.get("rule") == "energy":
        if not 0.0 < float(dct_rule.get("energy", 0)) <= 1.0:
            errors.append("dct.energy must be in (0, 1]")
    else:
        errors.append(f"dct.rule must be 'keep' or 'energy', got {dct_rule.get('rule')!r}")

    try:
        noise = NoiseSpec(**section("noise", {}))
    except TypeError as e:
        errors.append(f"noise: {e}")
        noise = NoiseSpec()

    mda_block = section("mda", {"n_assimilations": 8})
    if mda_block.get("alphas"):
        mda = MdaSchedule(alphas=tuple(mda_block["alphas"]))
    else:
        mda = MdaSchedule.constant(int(mda_block.get("n_assimilations", 8)))
    try:
        validate_schedule(mda)
    except ValueError as e:
        errors.append(f"mda: {e}")

    es_block = section("esmda", {})
    energy = float(es_block.get("energy", 0.999))
    if not 0.0 < energy <= 1.0:
        errors.append("esmda.energy must be in (0, 1]")
    n_ensemble = int(es_block.get("n_ensemble", 0) or 0)
    if n_ensemble < 2:
        errors.append("esmda.n_ensemble must be >= 2")
    if n_models and n_ensemble and n_models < n_ensemble:
        errors.append("prior.n_models must be >= esmda.n_ensemble")

    dict_block = section("dictionary", {})
    n_active = grid.n_active if grid is not None else 0
    n_atoms = int(dict_block.get("n_atoms") or 4 * n_ensemble)
    t0 = int(dict_block.get("t0") or max(1, math.ceil(0.02 * n_active)))
    ksvd_sweeps = int(dict_block.get("sweeps", 10))
    if n_atoms < 1 or t0 < 1 or ksvd_sweeps < 1:
        errors.append("dictionary n_atoms, t0 and sweeps must be >= 1")

    if errors:
        raise ConfigError(errors)

    return RunConfig(
        workdir=workdir,
        seed=seed,
        grid=grid,
        prior_spec=prior_spec,
        n_models=n_models,
        truth_spec=truth_spec,
        regressions=regressions,
        phi_bounds=phi_bounds,
        fluids=fluids,
        wells=tuple(wells),
        schedule=schedule,
        numerics=numerics,
        aquifer=aquifer,
        pem_params=pem_params,
        pem_fluids=pem_fluids,
        overburden_bar=overburden_bar,
        dct_rule=dct_rule,
        noise=noise,
        mda=mda,
        energy=energy,
        n_ensemble=n_ensemble,
        n_atoms=n_atoms,
        t0=t0,
        ksvd_sweeps=ksvd_sweeps,
        resparsify_each=bool(dict_block.get("resparsify_each", False)),
        resparsify_final=bool(dict_block.get("resparsify_final", True)),
        raw=raw,
    )
