"""End-to-end generation: outlier screen, copula fit, batch extension, scaling.

All randomness flows from one master seed through named streams keyed by
phase and unit id, so outputs are byte-identical across reruns and
independent of unit-level execution order.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import __version__
from .batching import Predictor, extend_with_batch, fit_predictor, partition_batches, sample_joint_batch
from .copula import DEFAULT_SD_MODE, SD_MODES, CopulaModel, copula_sample_unit, fit_copula, sample_all_units
from .errors import DataError, DownscaleError
from .outliers import DEFAULT_CONTAMINATION, OutlierReport, flag_outliers, score_units
from .rng import RngFactory
from .scaling import assign_categories, integerize_budget, shift_continuous
from .schema import FeatureSchema, coordinates
from .tables import CoarseTable, IndividualTable

log = logging.getLogger(__name__)


@dataclass
class GenerationResult:
    table: IndividualTable
    outlier_report: OutlierReport
    manifest: dict
    model: CopulaModel
    predictors: list[Predictor]


def _phase(name):
    """Re-raise package errors with the failing phase prepended."""

    class _ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, DownscaleError):
                raise type(exc)(f"{name}: {exc}") from exc
            log.info("%s finished in %.3fs", name, time.perf_counter() - self.t0)
            return False

    return _ctx()


def generate(
    coarse: CoarseTable,
    schemas: list[FeatureSchema],
    seed: int = 0,
    sd_mode: str = DEFAULT_SD_MODE,
    outlier_removal: bool = True,
    contamination: float = DEFAULT_CONTAMINATION,
    phase3_mode: str = "distribution",
    max_train_rows: int | None = 800,
    jobs: int = 1,
    model: CopulaModel | None = None,
    predictors: list[Predictor] | None = None,
) -> GenerationResult:
    """Run the four-phase pipeline and return the finalized individual table.

    A previously fitted ``model`` (plus ``predictors``) can be supplied to
    skip re-estimation; sampling and scaling still run under ``seed``.
    """
    if sd_mode not in SD_MODES:
        raise DataError(f"generate: unknown sd_mode {sd_mode!r}")
    rngf = RngFactory(seed)
    core, batches = partition_batches(schemas)
    prefit = model is not None

    with _phase("phase1/outliers"):
        report = score_units(coarse, schemas)
        if outlier_removal:
            report = flag_outliers(report, contamination)

    with _phase("phase2/copula"):
        if model is None:
            model = fit_copula(coarse, core, report.flagged, sd_mode, identity_fallback=True)
        else:
            _check_model(model, coarse, core)
        if jobs <= 1:
            blocks = sample_all_units(model, core, coarse.unit_ids, lambda uid: rngf.stream("core", uid))
        else:
            sampler = lambda unit_id: copula_sample_unit(model, core, unit_id, rngf.stream("core", unit_id))
            blocks = _unit_map(sampler, coarse.unit_ids, jobs)
        table = IndividualTable(blocks)

    with _phase("phase3/batches"):
        if predictors is None:
            predictors = []
            for j, batch in enumerate(batches, start=1):
                k_table, _ = sample_joint_batch(
                    coarse, core + batch, report.flagged, rngf, f"batch{j}", sd_mode, identity_fallback=True
                )
                for target in batch:
                    predictors.append(
                        fit_predictor(
                            k_table, core, target, rngf.stream("predictor", target.name),
                            max_rows=max_train_rows,
                        )
                    )
        by_target = {p.target: p for p in predictors}
        for batch in batches:
            extend_with_batch(table, core, batch, by_target, phase3_mode)

    with _phase("phase4/scaling"):
        def finalize(unit_id: str):
            block = table.block(unit_id)
            unit = coarse.unit(unit_id)
            # one stream per unit, consumed feature by feature in schema order
            rng = rngf.stream("assign", unit_id)
            for sc in schemas:
                if sc.is_categorical:
                    budget = integerize_budget(unit.population, unit.values[sc.name])
                    block.columns[sc.name] = assign_categories(block.columns[sc.name], budget, rng)
                else:
                    block.columns[sc.name] = shift_continuous(
                        block.columns[sc.name], float(unit.values[sc.name])
                    )
            return block

        _unit_map(finalize, coarse.unit_ids, jobs)

    manifest = {
        "tool": "downscale",
        "version": __version__,
        "seed": int(seed),
        "sd_mode": sd_mode,
        "outlier_removal": bool(outlier_removal),
        "contamination": float(contamination),
        "phase3": phase3_mode,
        "max_train_rows": max_train_rows,
        "model_source": "supplied" if prefit else "fitted",
        "units": len(coarse.units),
        "individuals": table.total_rows(),
        "features": [sc.name for sc in schemas],
        "flagged_units": sorted(report.flagged),
    }
    return GenerationResult(table, report, manifest, model, predictors)


def _unit_map(fn, unit_ids: list[str], jobs: int) -> list:
    if jobs <= 1:
        return [fn(u) for u in unit_ids]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, unit_ids))


def _check_model(model: CopulaModel, coarse: CoarseTable, core: list[FeatureSchema]) -> None:
    expected = coordinates(core)
    if model.coordinates != expected:
        raise DataError("generate: supplied model coordinates do not match the core schema")
    missing = [u.unit_id for u in coarse.units if u.unit_id not in model.marginals]
    if missing:
        raise DataError(f"generate: supplied model lacks marginals for units {missing[:5]}")
    for unit in coarse.units:
        if model.populations.get(unit.unit_id) != unit.population:
            raise DataError(f"generate: supplied model population mismatch for {unit.unit_id!r}")
