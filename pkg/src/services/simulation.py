"""
Operating characteristics of the pooling methods on simulated trials.

Each (scenario, replication) pair is an independent task whose seed is
derived from the master seed, the scenario id and the replication index.
Completed tasks are appended to ``replications.csv`` as they finish, so an
interrupted study resumes where it stopped and gives the same results as an
uninterrupted one.
"""

import json
import logging
import math
import warnings
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from ..core.config import settings
from ..core.errors import DosepoolError, SchemaError
from ..core.seeding import derive_seed, make_rng
from ..models.priors import ModelPriors
from ..models.schemas import ObservationKind, ObservationRow, Observations, TrialData
from ..models.specs import SamplerConfig, priors_from_settings, sampler_from_settings
from ..models.study import Method, ReplicationMetrics, Scenario, ScenarioResult, SamplerOverrides
from .emax import emax_response
from .mle import curve_ci, fit_mle
from .sampler import sample
from .summaries import curve_summary

logger = logging.getLogger(__name__)

LEDGER_FILE = "replications.csv"
RESULTS_FILE = "results.csv"
COVERAGE_FILE = "coverage_by_dose.csv"
STUDY_FILE = "study.json"

LEDGER_COLUMNS = [
    "scenario_id", "scenario", "replication", "seed", "method",
    "success", "error", "mae", "coverage", "length", "divergences",
]
RESULT_COLUMNS = [
    "scenario_id", "scenario", "method", "replications", "failures", "mae", "coverage", "mean_length",
]
REPLICATION_FAILURES = (DosepoolError, ValueError, ArithmeticError, np.linalg.LinAlgError)


def generate_trial(scenario: Scenario, seed: int) -> TrialData:
    """Patient-level trial drawn from the scenario's true curves"""
    design = scenario.design()
    truth = scenario.true_params
    rng = make_rng(seed, 0)
    rows = []
    for arm in design.arms:
        schedule = design.schedule(arm.schedule_id)
        mean = float(emax_response(truth[schedule.label], arm.dose))
        values = rng.normal(mean, scenario.sigma, arm.n_planned)
        rows.extend(ObservationRow(schedule_id=arm.schedule_id, dose=arm.dose, value=float(v)) for v in values)
    return TrialData(
        design=design,
        observations=Observations(kind=ObservationKind.PATIENT_LEVEL, rows=rows),
        name=f"scenario-{scenario.id}",
    )


def evaluate_replication(estimate, lower, upper, truth) -> ReplicationMetrics:
    """MAE of the point estimate plus per-dose coverage and interval length"""
    estimate, lower, upper, truth = (np.asarray(a, dtype=float) for a in (estimate, lower, upper, truth))
    if not estimate.shape == lower.shape == upper.shape == truth.shape:
        raise ValueError("Estimate, limits and truth must have the same shape")
    return ReplicationMetrics(
        mae=float(np.mean(np.abs(truth - estimate))),
        covered=[bool(c) for c in (lower <= truth) & (truth <= upper)],
        lengths=[float(x) for x in upper - lower],
    )


def _fit_method(
    scenario: Scenario,
    method: Method,
    data: TrialData,
    priors: ModelPriors,
    config: SamplerConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """(estimate, lower, upper, divergences) on the evaluation grid"""
    grid = np.asarray(scenario.eval_grid, dtype=float)
    spec = scenario.model_spec(method, priors)
    if spec is None:
        fit = fit_mle(data, bounds=scenario.ed50_bounds)
        curve = curve_ci(fit, grid)
        return curve["median"].to_numpy(), curve["lower"].to_numpy(), curve["upper"].to_numpy(), 0
    draws = sample(spec, data, config)
    curve = curve_summary(draws, scenario.reference, grid)
    return curve["median"].to_numpy(), curve["lower"].to_numpy(), curve["upper"].to_numpy(), draws.divergence_count


def run_replication(
    scenario: Scenario,
    replication: int,
    seed: int,
    config: SamplerConfig,
    priors: Optional[ModelPriors] = None,
) -> list[dict[str, Any]]:
    """Ledger records of every method for one simulated trial.

    Everything random is derived from ``seed``: the data from stream 0 and
    the sampler of the k-th method from stream k + 1.
    """
    priors = priors or priors_from_settings(settings)
    data = generate_trial(scenario, seed)
    truth = scenario.true_curve()
    records = []
    for k, method in enumerate(scenario.methods):
        record: dict[str, Any] = {
            "scenario_id": scenario.id,
            "scenario": scenario.name,
            "replication": replication,
            "seed": str(seed),
            "method": method.value,
            "success": False,
            "error": None,
            "mae": math.nan,
            "coverage": math.nan,
            "length": math.nan,
            "divergences": 0,
        }
        method_config = config.model_copy(update={"seed": derive_seed(seed, k + 1), "parallel_chains": False})
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                estimate, lower, upper, divergences = _fit_method(scenario, method, data, priors, method_config)
            metrics = evaluate_replication(estimate, lower, upper, truth)
        except REPLICATION_FAILURES as e:
            logger.error(f"Scenario {scenario.id} replication {replication} {method.value} failed: {e}")
            record["error"] = str(e)
        else:
            record.update(
                success=True,
                mae=metrics.mae,
                coverage=metrics.coverage,
                length=metrics.mean_length,
                divergences=divergences,
            )
            record.update({f"covered_{i}": int(c) for i, c in enumerate(metrics.covered)})
        records.append(record)
    return records


def _replication_worker(args: tuple[Scenario, int, int, SamplerConfig, ModelPriors]) -> list[dict[str, Any]]:
    scenario, replication, seed, config, priors = args
    return run_replication(scenario, replication, seed, config, priors)


def aggregate_ledger(ledger: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per (scenario, method) means over successful replications, and coverage per evaluation dose"""
    results = []
    coverage_rows = []
    covered_columns = sorted(
        (c for c in ledger.columns if c.startswith("covered_")), key=lambda c: int(c.split("_")[1])
    )
    for (scenario_id, method), group in ledger.groupby(["scenario_id", "method"], sort=False):
        ok = group[group["success"].astype(bool)]
        by_dose = [float(ok[c].mean()) for c in covered_columns] if len(ok) else []
        result = ScenarioResult(
            scenario_id=int(scenario_id),
            scenario=str(group["scenario"].iloc[0]),
            method=method,
            replications=len(ok),
            failures=len(group) - len(ok),
            mae=float(ok["mae"].mean()) if len(ok) else None,
            coverage=float(ok["coverage"].mean()) if len(ok) else None,
            mean_length=float(ok["length"].mean()) if len(ok) else None,
            coverage_by_dose=by_dose,
        )
        results.append(result.model_dump(mode="json", exclude={"coverage_by_dose"}))
        coverage_rows.extend(
            {"scenario_id": result.scenario_id, "scenario": result.scenario, "method": result.method.value,
             "dose_index": i, "coverage": value}
            for i, value in enumerate(by_dose)
        )
    results_frame = pd.DataFrame(results, columns=RESULT_COLUMNS)
    coverage_frame = pd.DataFrame(coverage_rows, columns=["scenario_id", "scenario", "method", "dose_index", "coverage"])
    return results_frame, coverage_frame


def read_ledger(path: Path) -> pd.DataFrame:
    ledger = pd.read_csv(path, dtype={"seed": str, "error": str, "scenario": str})
    ledger["success"] = ledger["success"].astype(bool)
    return ledger


class StudyRunner:
    """Runs scenarios replication by replication into an output directory.

    ``workers`` only changes how tasks are scheduled; the ledger and the
    aggregated results are identical for any worker count.
    """

    def __init__(
        self,
        scenarios: Sequence[Scenario],
        out_dir: Path,
        master_seed: int,
        sampler: SamplerOverrides = SamplerOverrides(),
        priors: Optional[ModelPriors] = None,
        workers: int = 1,
    ):
        if not scenarios:
            raise ValueError("No scenarios to run")
        grids = {tuple(s.eval_grid) for s in scenarios}
        if len(grids) > 1:
            raise SchemaError("All scenarios of a study must share one evaluation grid")
        if workers < 1:
            raise ValueError(f"workers must be positive, got {workers}")
        self.scenarios = list(scenarios)
        self.out_dir = Path(out_dir)
        self.master_seed = master_seed
        self.config = sampler_from_settings(settings, seed=master_seed, **sampler.model_dump())
        self.priors = priors or priors_from_settings(settings)
        self.workers = workers
        self.grid = list(self.scenarios[0].eval_grid)

    @property
    def ledger_path(self) -> Path:
        return self.out_dir / LEDGER_FILE

    def replication_seed(self, scenario: Scenario, replication: int) -> int:
        return derive_seed(self.master_seed, scenario.id, replication)

    def _metadata(self) -> dict[str, Any]:
        return {
            "master_seed": str(self.master_seed),
            "scenarios": [s.model_dump(mode="json") for s in self.scenarios],
            "sampler": self.config.model_dump(mode="json", exclude={"seed", "parallel_chains"}),
            "eval_grid": self.grid,
        }

    def _prepare(self, resume: bool) -> set[tuple[int, int]]:
        """Write or check the study metadata; return the (scenario, replication) pairs already done"""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        meta_path = self.out_dir / STUDY_FILE
        metadata = self._metadata()
        if resume and meta_path.exists():
            saved = json.loads(meta_path.read_text(encoding="utf-8"))
            if saved != json.loads(json.dumps(metadata)):
                raise SchemaError(f"{meta_path} describes a different study; refusing to resume")
        else:
            meta_path.write_text(json.dumps(metadata, indent=2), encoding="utf-8")
            if self.ledger_path.exists():
                self.ledger_path.unlink()

        if not (resume and self.ledger_path.exists()):
            return set()
        ledger = read_ledger(self.ledger_path)
        expected = {s.id: len(s.methods) for s in self.scenarios}
        counts = ledger.groupby(["scenario_id", "replication"]).size()
        done = {(int(sid), int(rep)) for (sid, rep), n in counts.items() if n == expected.get(int(sid))}
        logger.info(f"Resuming: {len(done)} replication(s) already in {self.ledger_path}")
        return done

    def _append(self, records: list[dict[str, Any]]) -> None:
        columns = LEDGER_COLUMNS + [f"covered_{i}" for i in range(len(self.grid))]
        frame = pd.DataFrame(records).reindex(columns=columns)
        write_header = not self.ledger_path.exists()
        frame.to_csv(self.ledger_path, mode="a", header=write_header, index=False)

    def tasks(self, done: set[tuple[int, int]]) -> list[tuple[Scenario, int, int, SamplerConfig, ModelPriors]]:
        return [
            (scenario, replication, self.replication_seed(scenario, replication), self.config, self.priors)
            for scenario in self.scenarios
            for replication in range(scenario.replications)
            if (scenario.id, replication) not in done
        ]

    def run(self, resume: bool = False) -> pd.DataFrame:
        done = self._prepare(resume)
        tasks = self.tasks(done)
        logger.info(
            f"Running {len(tasks)} replication(s) over {len(self.scenarios)} scenario(s) "
            f"with {self.workers} worker(s), master seed {self.master_seed}"
        )

        if self.workers > 1 and len(tasks) > 1:
            with Pool(processes=self.workers) as pool:
                for records in pool.imap(_replication_worker, tasks):
                    self._append(records)
                    logger.info(f"Scenario {records[0]['scenario_id']} replication {records[0]['replication']} done")
        else:
            for task in tasks:
                records = _replication_worker(task)
                self._append(records)
                logger.info(f"Scenario {records[0]['scenario_id']} replication {records[0]['replication']} done")

        return self.finalize()

    def finalize(self) -> pd.DataFrame:
        """Sort the ledger into task order and write the aggregated tables"""
        if not self.ledger_path.exists():
            raise SchemaError(f"No ledger at {self.ledger_path}")
        ledger = read_ledger(self.ledger_path)
        ids = {s.id for s in self.scenarios}
        ledger = ledger[ledger["scenario_id"].isin(ids)]
        order = {m.value: i for i, m in enumerate(Method)}
        ledger = (
            ledger.assign(_order=ledger["method"].map(order))
            .sort_values(["scenario_id", "replication", "_order"], kind="stable")
            .drop(columns="_order")
            .drop_duplicates(subset=["scenario_id", "replication", "method"], keep="first")
            .reset_index(drop=True)
        )
        ledger.to_csv(self.ledger_path, index=False)

        results, coverage = aggregate_ledger(ledger)
        coverage["dose"] = coverage["dose_index"].map(dict(enumerate(self.grid)))
        results.to_csv(self.out_dir / RESULTS_FILE, index=False)
        coverage.to_csv(self.out_dir / COVERAGE_FILE, index=False)

        failures = int((~ledger["success"]).sum())
        if failures:
            logger.warning(f"{failures} method fit(s) failed; see {self.ledger_path}")
        logger.info(f"Study results written to {self.out_dir}")
        return results


def run_study(
    scenarios: Sequence[Scenario],
    out_dir: Path,
    master_seed: int,
    workers: int = 1,
    resume: bool = False,
    sampler: SamplerOverrides = SamplerOverrides(),
    priors: Optional[ModelPriors] = None,
) -> pd.DataFrame:
    runner = StudyRunner(scenarios, out_dir, master_seed, sampler=sampler, priors=priors, workers=workers)
    return runner.run(resume=resume)
