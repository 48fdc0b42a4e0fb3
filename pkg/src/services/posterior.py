"""
Joint log-posterior and analytic gradient for the pooling menu.

Unconstrained coordinates, by block:

    e0              E0
    emax            shared Emax, or one per schedule (fixed effects)
    mu_emax         random effects: Emax(i) = mu_emax + emax_raw[i] * exp(log_tau_emax)
    ed50            bounded ED50* (shared, or one per schedule)
    mu_ed50         random effects: log ED50*(i) = log(ED50*_mu) + ed50_raw[i] * exp(log_tau_ed50)
    log_sigma       patient-level data only

ED50* lives on the reference schedule's dose scale. Bounded values are
``lower + (upper - lower) * expit(z)``; ED50(i) on schedule i's own scale is
``ED50*(i) * interval_i / interval_ref``.
"""

import logging
import math
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit, logit

from ..core.errors import NonFiniteError, SpecificationError
from ..models.priors import FunctionalUniformApproxPrior, ModelPriors, PriorSpec
from ..models.schemas import ObservationKind, TrialData
from ..models.specs import ModelSpec, ParameterMode
from .priors import SUPPORT_SLACK, log_density_and_derivative, log_density_on_log_scale

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class ParameterLayout:
    """Names and positions of the unconstrained coordinates"""

    def __init__(self):
        self.names: list[str] = []
        self.blocks: dict[str, slice] = {}

    def add(self, block: str, names: list[str]) -> None:
        start = len(self.names)
        self.names.extend(names)
        self.blocks[block] = slice(start, len(self.names))

    @property
    def dim(self) -> int:
        return len(self.names)

    def __getitem__(self, block: str) -> slice:
        return self.blocks[block]

    def __contains__(self, block: str) -> bool:
        return block in self.blocks

    def index(self, block: str) -> int:
        """Position of a single-coordinate block"""
        return self.blocks[block].start


def _resolve_priors(priors: ModelPriors, max_dose: float) -> ModelPriors:
    ed50 = priors.ed50
    if isinstance(ed50, FunctionalUniformApproxPrior) and ed50.max_dose is None:
        ed50 = ed50.model_copy(update={"max_dose": max_dose})
    return priors.model_copy(update={"ed50": ed50})


class Posterior:
    """Log-density of one model on one trial.

    Pure after construction; instances can be shared between chains and
    pickled to worker processes.
    """

    def __init__(self, spec: ModelSpec, data: TrialData, jacobian: bool = True):
        if spec.reference_schedule_id is not None and spec.reference_schedule_id != data.design.reference_schedule_id:
            data = data.with_reference(spec.reference_schedule_id)

        self.spec = spec
        self.data = data
        self.jacobian = jacobian

        design = data.design
        self.schedules = sorted(design.schedules, key=lambda s: s.id)
        self.labels = [s.label for s in self.schedules]
        self.n_schedules = len(self.schedules)
        self.reference = design.reference
        self.max_dose = design.max_dose
        self._log_ratios = np.log(
            np.array([s.interval_hours / self.reference.interval_hours for s in self.schedules])
        )

        self.lower, self.upper = spec.resolve_bounds(self.max_dose)
        self._log_width = math.log(self.upper - self.lower)
        self._log_lower = math.log(self.lower) if self.lower > 0 else -math.inf
        self.priors = _resolve_priors(spec.priors, self.max_dose)

        ed50_prior = self.priors.ed50
        if isinstance(ed50_prior, FunctionalUniformApproxPrior):
            limit = ed50_prior.upper_ratio * ed50_prior.max_dose
            if self.upper > limit * (1 + SUPPORT_SLACK):
                raise SpecificationError(
                    f"ED50 upper bound {self.upper:.6g} exceeds the functional uniform support {limit:.6g}"
                )

        self._load_observations()
        self.layout = self._build_layout()
        logger.debug(
            f"Posterior for '{spec.label or 'model'}' on '{data.name}': dim={self.dim}, "
            f"bounds=({self.lower:.6g}, {self.upper:.6g}), reference={self.reference.label}"
        )

    # ------------------------------------------------------------------ setup

    def _load_observations(self) -> None:
        rows = self.data.observations.rows
        self.kind = self.data.kind
        self.obs_schedule = np.array([r.schedule_id for r in rows], dtype=int)
        self.obs_dose = np.array([r.dose for r in rows], dtype=float)
        self.obs_value = np.array([r.value for r in rows], dtype=float)
        self.n_obs = len(rows)
        self._obs_log_dose = _log_dose(self.obs_dose)

        if self.kind == ObservationKind.ARM_LEVEL:
            self.obs_se = np.array([r.se for r in rows], dtype=float)
            self._cell_schedule = self.obs_schedule
            self._cell_log_dose = self._obs_log_dose
            self._cell_mean = self.obs_value
            self._cell_se = self.obs_se
            self._arm_constant = float(np.sum(np.log(self.obs_se))) + 0.5 * LOG_2PI * self.n_obs
            return

        # patient-level rows collapse to (n, mean, within-cell sum of squares)
        frame = pd.DataFrame({
            "schedule_id": self.obs_schedule,
            "dose": self.obs_dose,
            "value": self.obs_value,
        })
        grouped = frame.groupby(["schedule_id", "dose"], sort=True)["value"]
        frame["squared"] = (frame["value"] - grouped.transform("mean")) ** 2
        cells = frame.groupby(["schedule_id", "dose"], sort=True).agg(
            n=("value", "size"),
            mean=("value", "mean"),
            ss=("squared", "sum"),
        ).reset_index()
        self._cell_schedule = cells["schedule_id"].to_numpy(dtype=int)
        self._cell_log_dose = _log_dose(cells["dose"].to_numpy(dtype=float))
        self._cell_n = cells["n"].to_numpy(dtype=float)
        self._cell_mean = cells["mean"].to_numpy(dtype=float)
        self._cell_ss = cells["ss"].to_numpy(dtype=float)

    def _build_layout(self) -> ParameterLayout:
        layout = ParameterLayout()
        per_schedule = lambda name: [f"{name}[{label}]" for label in self.labels]  # noqa: E731

        layout.add("e0", ["e0"])

        if self.spec.emax_mode == ParameterMode.SHARED:
            layout.add("emax", ["emax"])
        elif self.spec.emax_mode == ParameterMode.FIXED_EFFECTS:
            layout.add("emax", per_schedule("emax"))
        else:
            layout.add("mu_emax", ["mu_emax"])
            layout.add("emax_raw", per_schedule("emax_raw"))
            layout.add("log_tau_emax", ["log_tau_emax"])

        if self.spec.ed50_mode == ParameterMode.SHARED:
            layout.add("ed50", ["ed50_z"])
        elif self.spec.ed50_mode == ParameterMode.FIXED_EFFECTS:
            layout.add("ed50", per_schedule("ed50_z"))
        else:
            layout.add("mu_ed50", ["mu_ed50_z"])
            layout.add("ed50_raw", per_schedule("ed50_raw"))
            layout.add("log_tau_ed50", ["log_tau_ed50"])

        if self.kind == ObservationKind.PATIENT_LEVEL:
            layout.add("log_sigma", ["log_sigma"])
        return layout

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def parameter_names(self) -> list[str]:
        return list(self.layout.names)

    @property
    def natural_names(self) -> list[str]:
        names = ["e0"]
        if self.spec.emax_mode == ParameterMode.SHARED:
            names.append("emax")
        else:
            names.extend(f"emax[{label}]" for label in self.labels)
            if self.spec.emax_mode == ParameterMode.RANDOM_EFFECTS:
                names.extend(["mu_emax", "tau_emax"])
        names.extend(f"ed50[{label}]" for label in self.labels)
        if self.spec.ed50_mode == ParameterMode.RANDOM_EFFECTS:
            names.extend(["mu_ed50", "tau_ed50"])
        if self.kind == ObservationKind.PATIENT_LEVEL:
            names.append("sigma")
        return names

    # ------------------------------------------------------------ transforms

    def _bounded(self, z):
        """Log ED50* for coordinate z, d(log ED50*)/dz, log-Jacobian and its derivative."""
        log_p = log_expit(z)
        log_q = log_expit(-z)
        if self.lower > 0:
            log_value = np.logaddexp(self._log_lower, self._log_width + log_p)
        else:
            log_value = self._log_width + log_p
        log_jacobian = self._log_width + log_p + log_q
        dlog_value = np.exp(log_jacobian - log_value)
        return log_value, dlog_value, log_jacobian, 1.0 - 2.0 * np.exp(log_p)

    def _unbounded(self, value: float, name: str) -> float:
        if not self.lower < value < self.upper:
            raise SpecificationError(
                f"{name}={value:.6g} is outside the ED50 bounds ({self.lower:.6g}, {self.upper:.6g})"
            )
        return float(logit((value - self.lower) / (self.upper - self.lower)))

    def _unpack(self, V: np.ndarray) -> dict[str, np.ndarray]:
        """Natural-scale quantities for a (draws, dim) matrix of coordinates."""
        L = self.layout
        S = self.n_schedules
        out: dict[str, np.ndarray] = {"e0": V[:, L.index("e0")]}

        if self.spec.emax_mode == ParameterMode.SHARED:
            out["emax"] = np.repeat(V[:, [L.index("emax")]], S, axis=1)
        elif self.spec.emax_mode == ParameterMode.FIXED_EFFECTS:
            out["emax"] = V[:, L["emax"]]
        else:
            mu = V[:, L.index("mu_emax")]
            tau = np.exp(V[:, L.index("log_tau_emax")])
            out["emax"] = mu[:, None] + V[:, L["emax_raw"]] * tau[:, None]
            out["mu_emax"] = mu
            out["tau_emax"] = tau

        if self.spec.ed50_mode == ParameterMode.SHARED:
            log_star = self._bounded(V[:, L.index("ed50")])[0]
            out["log_ed50_star"] = np.repeat(log_star[:, None], S, axis=1)
        elif self.spec.ed50_mode == ParameterMode.FIXED_EFFECTS:
            out["log_ed50_star"] = self._bounded(V[:, L["ed50"]])[0]
        else:
            mu_log = self._bounded(V[:, L.index("mu_ed50")])[0]
            tau = np.exp(V[:, L.index("log_tau_ed50")])
            out["log_ed50_star"] = mu_log[:, None] + V[:, L["ed50_raw"]] * tau[:, None]
            out["mu_ed50"] = np.exp(mu_log)
            out["tau_ed50"] = tau

        out["log_ed50"] = out["log_ed50_star"] + self._log_ratios[None, :]
        if "log_sigma" in L:
            out["sigma"] = np.exp(V[:, L.index("log_sigma")])
        return out

    def _as_matrix(self, V) -> tuple[np.ndarray, bool]:
        V = np.asarray(V, dtype=float)
        single = V.ndim == 1
        V = np.atleast_2d(V)
        if V.shape[1] != self.dim:
            raise ValueError(f"Expected {self.dim} coordinates {self.layout.names}, got {V.shape[1]}")
        return V, single

    def constrain(self, v) -> dict[str, float]:
        """Named natural-scale parameters at one coordinate vector"""
        frame = self.natural_frame(v)
        return {name: float(frame[name].iloc[0]) for name in frame.columns}

    def natural_frame(self, V) -> pd.DataFrame:
        """One row per coordinate vector, columns ``natural_names``."""
        V, _ = self._as_matrix(V)
        with np.errstate(over="ignore"):
            nat = self._unpack(V)
        columns: dict[str, np.ndarray] = {"e0": nat["e0"]}
        if self.spec.emax_mode == ParameterMode.SHARED:
            columns["emax"] = nat["emax"][:, 0]
        else:
            for i, label in enumerate(self.labels):
                columns[f"emax[{label}]"] = nat["emax"][:, i]
            if self.spec.emax_mode == ParameterMode.RANDOM_EFFECTS:
                columns["mu_emax"] = nat["mu_emax"]
                columns["tau_emax"] = nat["tau_emax"]
        ed50 = np.exp(nat["log_ed50"])
        for i, label in enumerate(self.labels):
            columns[f"ed50[{label}]"] = ed50[:, i]
        if self.spec.ed50_mode == ParameterMode.RANDOM_EFFECTS:
            columns["mu_ed50"] = nat["mu_ed50"]
            columns["tau_ed50"] = nat["tau_ed50"]
        if "sigma" in nat:
            columns["sigma"] = nat["sigma"]
        return pd.DataFrame(columns, columns=self.natural_names)

    def unconstrain(self, natural: Mapping[str, float]) -> np.ndarray:
        """Inverse of ``constrain``.

        ``mu_ed50`` is the reference-scale location exp(mu) of the random
        effects; ``ed50[label]`` values are on each schedule's own scale.
        Shared ED50 is read from the reference schedule's entry.
        """
        L = self.layout
        v = np.zeros(self.dim)
        v[L.index("e0")] = natural["e0"]

        if self.spec.emax_mode == ParameterMode.SHARED:
            v[L.index("emax")] = natural["emax"]
        elif self.spec.emax_mode == ParameterMode.FIXED_EFFECTS:
            v[L["emax"]] = [natural[f"emax[{label}]"] for label in self.labels]
        else:
            mu, tau = natural["mu_emax"], _positive(natural, "tau_emax")
            v[L.index("mu_emax")] = mu
            v[L.index("log_tau_emax")] = math.log(tau)
            v[L["emax_raw"]] = [(natural[f"emax[{label}]"] - mu) / tau for label in self.labels]

        if self.spec.ed50_mode == ParameterMode.SHARED:
            v[L.index("ed50")] = self._unbounded(natural[f"ed50[{self.reference.label}]"], "ed50")
            return self._unconstrain_sigma(natural, v)

        star = [natural[f"ed50[{label}]"] / math.exp(r) for label, r in zip(self.labels, self._log_ratios)]
        if self.spec.ed50_mode == ParameterMode.FIXED_EFFECTS:
            v[L["ed50"]] = [self._unbounded(value, f"ed50[{label}]") for value, label in zip(star, self.labels)]
        else:
            mu_star, tau = _positive(natural, "mu_ed50"), _positive(natural, "tau_ed50")
            v[L.index("mu_ed50")] = self._unbounded(mu_star, "mu_ed50")
            v[L.index("log_tau_ed50")] = math.log(tau)
            v[L["ed50_raw"]] = [(math.log(value) - math.log(mu_star)) / tau for value in star]

        return self._unconstrain_sigma(natural, v)

    def _unconstrain_sigma(self, natural: Mapping[str, float], v: np.ndarray) -> np.ndarray:
        if "log_sigma" in self.layout:
            v[self.layout.index("log_sigma")] = math.log(_positive(natural, "sigma"))
        return v

    # --------------------------------------------------------------- density

    def _scale_term(self, spec: PriorSpec, omega: float) -> tuple[float, float]:
        """Prior on a positive scale sampled as exp(omega)."""
        kernel, derivative = log_density_on_log_scale(spec, omega)
        if self.jacobian:
            return kernel + omega, derivative + 1.0
        return kernel, derivative

    def _ed50_term(self, z: float) -> tuple[float, float, float, float]:
        """Prior (+ Jacobian) of a bounded ED50* coordinate: (lp, dlp/dz, log ED50*, dlog ED50*/dz)."""
        log_value, dlog_value, log_jacobian, djacobian = self._bounded(z)
        kernel, dkernel = log_density_on_log_scale(self.priors.ed50, float(log_value))
        lp = kernel
        grad = dkernel * float(dlog_value)
        if self.jacobian:
            lp += float(log_jacobian)
            grad += float(djacobian)
        return lp, grad, float(log_value), float(dlog_value)

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"Expected {self.dim} coordinates {self.layout.names}, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"Non-finite coordinates: {v}")
        return v

    def log_density_and_gradient(self, v) -> tuple[float, np.ndarray]:
        v = self._check(v)
        grad = np.zeros(self.dim)
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                lp = self._accumulate(v, grad)
        except OverflowError as e:
            raise NonFiniteError(f"Overflow evaluating log-posterior: {e}") from e
        if not math.isfinite(lp) or not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Log-posterior is not finite at {v} (lp={lp})")
        return lp, grad

    def log_density(self, v) -> float:
        return self.log_density_and_gradient(v)[0]

    def gradient(self, v) -> np.ndarray:
        return self.log_density_and_gradient(v)[1]

    def __call__(self, v) -> tuple[float, np.ndarray]:
        return self.log_density_and_gradient(v)

    def _accumulate(self, v: np.ndarray, grad: np.ndarray) -> float:
        L = self.layout
        S = self.n_schedules
        priors = self.priors
        ed50_mode, emax_mode = self.spec.ed50_mode, self.spec.emax_mode

        i_e0 = L.index("e0")
        e0 = v[i_e0]
        lp, grad[i_e0] = log_density_and_derivative(priors.e0, e0)

        # Emax
        if emax_mode == ParameterMode.SHARED:
            i = L.index("emax")
            emax_s = np.full(S, v[i])
            kernel, grad[i] = log_density_and_derivative(priors.emax, v[i])
            lp += kernel
        elif emax_mode == ParameterMode.FIXED_EFFECTS:
            emax_s = v[L["emax"]].copy()
            for offset, value in enumerate(emax_s):
                kernel, grad[L["emax"].start + offset] = log_density_and_derivative(priors.emax, value)
                lp += kernel
        else:
            i_mu, i_tau = L.index("mu_emax"), L.index("log_tau_emax")
            u_emax = v[L["emax_raw"]]
            tau_emax = math.exp(v[i_tau])
            emax_s = v[i_mu] + u_emax * tau_emax
            kernel, grad[i_mu] = log_density_and_derivative(priors.emax, v[i_mu])
            lp += kernel - 0.5 * float(u_emax @ u_emax)
            grad[L["emax_raw"]] = -u_emax
            kernel, grad[i_tau] = self._scale_term(priors.tau_emax, v[i_tau])
            lp += kernel

        # ED50* on the log scale
        if ed50_mode == ParameterMode.SHARED:
            i = L.index("ed50")
            kernel, grad[i], log_star, dlog_shared = self._ed50_term(v[i])
            lp += kernel
            log_star_s = np.full(S, log_star)
        elif ed50_mode == ParameterMode.FIXED_EFFECTS:
            log_star_s = np.empty(S)
            dlog_s = np.empty(S)
            for offset in range(S):
                j = L["ed50"].start + offset
                kernel, grad[j], log_star_s[offset], dlog_s[offset] = self._ed50_term(v[j])
                lp += kernel
        else:
            i_mu, i_tau = L.index("mu_ed50"), L.index("log_tau_ed50")
            kernel, grad[i_mu], mu_log, dlog_mu = self._ed50_term(v[i_mu])
            lp += kernel
            u_ed50 = v[L["ed50_raw"]]
            tau_ed50 = math.exp(v[i_tau])
            log_star_s = mu_log + u_ed50 * tau_ed50
            lp -= 0.5 * float(u_ed50 @ u_ed50)
            grad[L["ed50_raw"]] = -u_ed50
            kernel, grad[i_tau] = self._scale_term(priors.tau_ed50, v[i_tau])
            lp += kernel

        # likelihood over cells
        c = self._cell_schedule
        log_ed50_c = (log_star_s + self._log_ratios)[c]
        h = expit(self._cell_log_dose - log_ed50_c)
        emax_c = emax_s[c]
        mean = e0 + emax_c * h

        if self.kind == ObservationKind.ARM_LEVEL:
            r = (self._cell_mean - mean) / self._cell_se
            lp += -0.5 * float(r @ r) - self._arm_constant
            g_mean = r / self._cell_se
        else:
            i_sigma = L.index("log_sigma")
            omega = v[i_sigma]
            inv_var = math.exp(-2.0 * omega)
            deviation = self._cell_mean - mean
            ss = self._cell_ss + self._cell_n * deviation ** 2
            n_total = float(self._cell_n.sum())
            lp += -0.5 * inv_var * float(ss.sum()) - n_total * (omega + 0.5 * LOG_2PI)
            g_mean = self._cell_n * deviation * inv_var
            kernel, dkernel = self._scale_term(priors.sigma, omega)
            lp += kernel
            grad[i_sigma] = dkernel + inv_var * float(ss.sum()) - n_total

        grad[i_e0] += float(g_mean.sum())
        g_emax = np.bincount(c, weights=g_mean * h, minlength=S)
        g_log_star = np.bincount(c, weights=-g_mean * emax_c * h * (1.0 - h), minlength=S)

        if emax_mode == ParameterMode.SHARED:
            grad[L.index("emax")] += float(g_emax.sum())
        elif emax_mode == ParameterMode.FIXED_EFFECTS:
            grad[L["emax"]] += g_emax
        else:
            grad[L.index("mu_emax")] += float(g_emax.sum())
            grad[L["emax_raw"]] += g_emax * tau_emax
            grad[L.index("log_tau_emax")] += float(g_emax @ u_emax) * tau_emax

        if ed50_mode == ParameterMode.SHARED:
            grad[L.index("ed50")] += float(g_log_star.sum()) * dlog_shared
        elif ed50_mode == ParameterMode.FIXED_EFFECTS:
            grad[L["ed50"]] += g_log_star * dlog_s
        else:
            grad[L.index("mu_ed50")] += float(g_log_star.sum()) * dlog_mu
            grad[L["ed50_raw"]] += g_log_star * tau_ed50
            grad[L.index("log_tau_ed50")] += float(g_log_star @ u_ed50) * tau_ed50

        return float(lp)

    # ------------------------------------------------------------ likelihood

    def pointwise_log_likelihood(self, V) -> np.ndarray:
        """Per-observation log-likelihood; (observations,) for one vector, (draws, observations) for a matrix."""
        V, single = self._as_matrix(V)
        with np.errstate(over="ignore", divide="ignore"):
            nat = self._unpack(V)
            s = self.obs_schedule
            h = expit(self._obs_log_dose[None, :] - nat["log_ed50"][:, s])
            mean = nat["e0"][:, None] + nat["emax"][:, s] * h
            if self.kind == ObservationKind.ARM_LEVEL:
                z = (self.obs_value[None, :] - mean) / self.obs_se[None, :]
                out = -0.5 * z ** 2 - np.log(self.obs_se)[None, :] - 0.5 * LOG_2PI
            else:
                sigma = nat["sigma"][:, None]
                z = (self.obs_value[None, :] - mean) / sigma
                out = -0.5 * z ** 2 - np.log(sigma) - 0.5 * LOG_2PI
        return out[0] if single else out

    def log_likelihood(self, v) -> float:
        """Data term of the log-posterior (cell-collapsed)."""
        V, _ = self._as_matrix(v)
        nat = self._unpack(V[:1])
        c = self._cell_schedule
        h = expit(self._cell_log_dose - nat["log_ed50"][0, c])
        mean = nat["e0"][0] + nat["emax"][0, c] * h
        if self.kind == ObservationKind.ARM_LEVEL:
            r = (self._cell_mean - mean) / self._cell_se
            return -0.5 * float(r @ r) - self._arm_constant
        sigma = float(nat["sigma"][0])
        ss = self._cell_ss + self._cell_n * (self._cell_mean - mean) ** 2
        n_total = float(self._cell_n.sum())
        return -0.5 * float(ss.sum()) / sigma ** 2 - n_total * (math.log(sigma) + 0.5 * LOG_2PI)


def _log_dose(dose: np.ndarray) -> np.ndarray:
    out = np.full(dose.shape, -np.inf)
    np.log(dose, out=out, where=dose > 0)
    return out


def _positive(natural: Mapping[str, float], name: str) -> float:
    value = float(natural[name])
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def log_posterior(spec: ModelSpec, data: TrialData, v, posterior: Optional[Posterior] = None) -> float:
    return (posterior or Posterior(spec, data)).log_density(v)


def grad_log_posterior(spec: ModelSpec, data: TrialData, v, posterior: Optional[Posterior] = None) -> np.ndarray:
    return (posterior or Posterior(spec, data)).gradient(v)
