import json
import logging
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from ..core.validation import InputFileValidator
from ..models.results import MleFit, PosteriorDraws
from ..services.mle import curve_ci
from ..services.priors import wip_emax_range, wip_range
from ..services.summaries import (
    curve_grid,
    curve_summary,
    marginal_density,
    prior_density,
    summarize_params,
)

logger = logging.getLogger(__name__)

WIP_TAUS = [0.125, 0.25, 0.5, 1.0, 2.0]
WIP_LABELS = ["small", "moderate", "substantial", "large", "very large"]
DENSITY_COLUMNS = ["value", "density", "prior"]


def parameter_file_stem(name: str) -> str:
    """``ed50[weekly]`` -> ``ed50_weekly``"""
    return InputFileValidator.sanitize_label(name.replace('[', '_').replace(']', ''))


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def diagnostics_payload(fit: PosteriorDraws) -> dict[str, Any]:
    diag = fit.diagnostics
    config = fit.config
    payload: dict[str, Any] = {
        "model": fit.spec.label,
        "ed50_mode": fit.spec.ed50_mode.value,
        "emax_mode": fit.spec.emax_mode.value,
        "reference_schedule": fit.reference.label,
        "ed50_bounds": list(fit.ed50_bounds),
        "seed": config.seed,
        "chains": fit.n_chains,
        "iterations": config.iterations,
        "warmup": config.warmup,
        "draws_per_chain": fit.n_draws,
        "total_draws": fit.total_draws,
        "divergences": fit.divergence_count,
        "step_sizes": [s.step_size for s in fit.chain_stats],
        "mean_accept_stat": [s.mean_accept_stat for s in fit.chain_stats],
        "max_depth_hits": [s.max_depth_hits for s in fit.chain_stats],
    }
    if diag is None:
        payload.update(converged=None, max_rhat=None, min_ess_bulk=None, rhat={}, ess_bulk={})
    else:
        payload.update(
            converged=diag.converged,
            rhat_threshold=diag.rhat_threshold,
            max_rhat=_finite_or_none(diag.max_rhat),
            min_ess_bulk=_finite_or_none(diag.min_ess),
            rhat={k: _finite_or_none(v) for k, v in diag.rhat.items()},
            ess_bulk={k: _finite_or_none(v) for k, v in diag.ess_bulk.items()},
        )
    return payload


def write_fit_reports(fit: PosteriorDraws, out_dir: Path) -> list[Path]:
    """params.csv, curve_<schedule>.csv, density_<parameter>.csv and diagnostics.json"""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "params.csv"
    summarize_params(fit).to_csv(path, index=False)
    written.append(path)

    for schedule in fit.schedules:
        grid = curve_grid(fit, schedule.label)
        path = out_dir / f"curve_{InputFileValidator.sanitize_label(schedule.label)}.csv"
        curve_summary(fit, schedule.label, grid).to_csv(path, index=False)
        written.append(path)

    for name in fit.natural_names:
        density = marginal_density(fit, name)
        prior = prior_density(fit, name, density["value"].to_numpy())
        density["prior"] = prior if prior is not None else np.nan
        path = out_dir / f"density_{parameter_file_stem(name)}.csv"
        density[DENSITY_COLUMNS].to_csv(path, index=False)
        written.append(path)

    path = out_dir / "diagnostics.json"
    path.write_text(json.dumps(diagnostics_payload(fit), indent=2), encoding="utf-8")
    written.append(path)

    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def write_mle_reports(fit: MleFit, reference_label: str, max_dose: float, out_dir: Path, points: int) -> list[Path]:
    """mle_params.csv and mle_curve.csv on the reference schedule's dose scale"""
    out_dir.mkdir(parents=True, exist_ok=True)
    se = fit.standard_errors
    params = pd.DataFrame({
        "parameter": ["e0", "emax", f"ed50[{reference_label}]", "sigma"],
        "estimate": [fit.params.e0, fit.params.emax, fit.params.ed50, fit.sigma_hat],
        "se": [se[0], se[1], se[2], np.nan],
    })
    params_path = out_dir / "mle_params.csv"
    params.to_csv(params_path, index=False)

    curve_path = out_dir / "mle_curve.csv"
    curve_ci(fit, np.linspace(0.0, max_dose, points)).to_csv(curve_path, index=False)
    return [params_path, curve_path]


def wip_table() -> pd.DataFrame:
    return pd.DataFrame({
        "tau": WIP_TAUS,
        "heterogeneity": WIP_LABELS,
        "ed50_range": [round(wip_range(t), 2) for t in WIP_TAUS],
        "emax_range": [round(wip_emax_range(t), 2) for t in WIP_TAUS],
    })


def render_table(frame: pd.DataFrame, digits: int = 2) -> str:
    if frame.empty:
        return "(no rows)"
    return frame.to_string(index=False, float_format=lambda x: f"{x:.{digits}f}", na_rep="-")
