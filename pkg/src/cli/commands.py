"""
Command handlers. Each takes the parsed ``argparse.Namespace`` and returns an
exit code; errors propagate to ``src.main`` which maps them to exit codes.
"""

import argparse
import json
import logging
import tomllib
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from ..core.config import settings
from ..core.errors import SchemaError
from ..core.seeding import resolve_seed
from ..models.priors import ModelPriors, parse_prior
from ..models.schemas import TrialData
from ..models.specs import ModelSpec, ParameterMode, SamplerConfig, priors_from_settings, sampler_from_settings
from ..models.study import SamplerOverrides, StudyFile
from ..services.datasets import load_builtin
from ..services.extraction import TrialExtractionService
from ..services.loo import ModelComparisonService, menu_spec
from ..services.mle import fit_mle
from ..services.sampler import sample, write_draws_csv
from ..services.simulation import STUDY_FILE, StudyRunner
from ..services.summaries import summarize_params
from .reports import render_table, wip_table, write_fit_reports, write_mle_reports

logger = logging.getLogger(__name__)

MODEL_MODES = {
    "cp": (ParameterMode.SHARED, ParameterMode.SHARED),
    "pp-fe": (ParameterMode.FIXED_EFFECTS, ParameterMode.SHARED),
    "pp-re": (ParameterMode.RANDOM_EFFECTS, ParameterMode.SHARED),
}


def load_config_file(path: Optional[Path]) -> tuple[dict[str, Any], dict[str, Any]]:
    """(prior overrides by role, sampler overrides) from a TOML config file"""
    if path is None:
        return {}, {}
    try:
        with Path(path).open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as e:
        raise SchemaError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise SchemaError(f"Invalid TOML in {path}: {e}") from e

    unknown = set(data) - {"prior", "sampler"}
    if unknown:
        raise SchemaError(f"Unknown config sections: {sorted(unknown)}")
    priors = data.get("prior", {})
    sampler = data.get("sampler", {})
    if not isinstance(priors, dict) or not isinstance(sampler, dict):
        raise SchemaError("Config sections [prior.<role>] and [sampler] must be tables")
    return priors, sampler


def build_priors(args: argparse.Namespace, overrides: dict[str, Any]) -> ModelPriors:
    overrides = dict(overrides)
    if getattr(args, "tau_prior", None):
        overrides["tau_ed50"] = parse_prior(args.tau_prior).model_dump()
    if getattr(args, "tau_emax_prior", None):
        overrides["tau_emax"] = parse_prior(args.tau_emax_prior).model_dump()
    try:
        return priors_from_settings(settings, overrides)
    except ValidationError as e:
        raise SchemaError(f"Invalid prior configuration: {e}") from e


def build_sampler(args: argparse.Namespace, seed: int, overrides: dict[str, Any]) -> SamplerConfig:
    values = {**overrides}
    for key, flag in (("chains", "chains"), ("iterations", "iter"), ("warmup", "warmup")):
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    try:
        return sampler_from_settings(settings, seed=seed, **values)
    except (ValidationError, TypeError) as e:
        raise SchemaError(f"Invalid sampler settings: {e}") from e


def load_data(args: argparse.Namespace) -> TrialData:
    reference = args.ref_schedule or settings.reference_schedule
    if args.builtin:
        try:
            data = load_builtin(args.builtin, reference_label=reference)
        except KeyError as e:
            raise SchemaError(str(e.args[0])) from e
    else:
        service = TrialExtractionService(reference_label=reference)
        data = service.load_trial(Path(args.data), arm_level=True if args.arm_level else None)

    if args.ref_schedule:
        wanted = ' '.join(args.ref_schedule.strip().split()).lower()
        if data.design.reference.label != wanted:
            labels = [s.label for s in data.design.schedules]
            raise SchemaError(f"Reference schedule '{args.ref_schedule}' not in data (schedules: {labels})")
    return data


def _announce_seed(seed: int, given: Optional[int]) -> None:
    if given is None:
        print(f"Using random seed {seed}")


def model_spec_from_args(args: argparse.Namespace, data: TrialData, priors: ModelPriors) -> ModelSpec:
    ed50_mode, emax_mode = MODEL_MODES[args.model]
    return ModelSpec(
        ed50_mode=args.ed50 or ed50_mode,
        emax_mode=args.emax or emax_mode,
        reference_schedule_id=data.design.reference_schedule_id,
        priors=priors,
        label=args.model,
    )


def cmd_fit(args: argparse.Namespace) -> int:
    prior_overrides, sampler_overrides = load_config_file(args.config)
    data = load_data(args)
    seed = resolve_seed(args.seed)
    _announce_seed(seed, args.seed)

    priors = build_priors(args, prior_overrides)
    config = build_sampler(args, seed, sampler_overrides)
    spec = model_spec_from_args(args, data, priors)
    out_dir = Path(args.out)

    fit = sample(spec, data, config)
    write_fit_reports(fit, out_dir)
    if args.save_draws:
        write_draws_csv(fit, out_dir / "draws.csv")
    if args.mle:
        mle = fit_mle(data)
        write_mle_reports(mle, data.design.reference.label, data.max_dose, out_dir, settings.curve_points)

    print(render_table(summarize_params(fit)))
    if fit.diagnostics is not None and not fit.diagnostics.converged:
        print(
            f"WARNING: chains have not converged (max R-hat {fit.diagnostics.max_rhat:.3f} > "
            f"{fit.diagnostics.rhat_threshold}); see {out_dir / 'diagnostics.json'}"
        )
    if fit.divergence_count:
        print(f"WARNING: {fit.divergence_count} divergent transitions after warmup")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    prior_overrides, sampler_overrides = load_config_file(args.config)
    data = load_data(args)
    seed = resolve_seed(args.seed)
    _announce_seed(seed, args.seed)

    priors = build_priors(args, prior_overrides)
    config = build_sampler(args, seed, sampler_overrides)
    try:
        numbers = [int(x) for x in args.models.split(",") if x.strip()]
        specs = [menu_spec(n, priors, data.design.reference_schedule_id) for n in numbers]
    except (ValueError, KeyError) as e:
        raise SchemaError(f"--models expects numbers 1-5 separated by commas, got '{args.models}'") from e
    if not specs:
        raise SchemaError("No models requested")

    table = ModelComparisonService(config, priors).compare(data, specs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "comparison.csv", index=False)
    print(render_table(table))

    if table["loo_ic"].isna().all():
        logger.error("Every model failed to fit")
        return 3
    return 0


def load_study(path: Path) -> StudyFile:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle) if path.suffix.lower() == ".toml" else json.load(handle)
    except FileNotFoundError as e:
        raise SchemaError(f"Scenario file not found: {path}") from e
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"Cannot parse scenario file {path}: {e}") from e
    try:
        return StudyFile.model_validate(raw)
    except ValidationError as e:
        raise SchemaError(f"Invalid scenario file {path}: {e}") from e


def cmd_simulate(args: argparse.Namespace) -> int:
    study = load_study(args.scenarios)
    resume = args.resume is not None
    out_dir = Path(args.resume if resume else args.out)

    seed = args.seed
    meta_path = out_dir / STUDY_FILE
    if resume and seed is None and meta_path.exists():
        seed = int(json.loads(meta_path.read_text(encoding="utf-8"))["master_seed"])
    given = seed
    seed = resolve_seed(seed)
    _announce_seed(seed, given)

    try:
        overrides = study.sampler.merged(SamplerOverrides(chains=args.chains, iterations=args.iter, warmup=args.warmup))
    except ValidationError as e:
        raise SchemaError(f"Invalid sampler settings: {e}") from e
    runner = StudyRunner(
        study.scenarios(replications=args.reps),
        out_dir,
        seed,
        sampler=overrides,
        workers=args.workers,
    )
    results = runner.run(resume=resume)
    print(render_table(results, digits=3))
    return 0


def cmd_wip_table(args: argparse.Namespace) -> int:
    print(render_table(wip_table()))
    return 0
