"""
No-U-Turn Hamiltonian Monte Carlo.

Trajectories double until the generalised U-turn criterion fails (checked
over the merged tree and across the two subtrees of every merge), with
multinomial selection of the next state. Warmup tunes the step size by dual
averaging and a diagonal inverse metric over doubling windows.

Targets are callables ``theta -> (log_density, gradient)``. Evaluations that
raise one of ``REJECTED_EVALUATIONS`` are treated as divergent.
"""

import logging
import math
import warnings
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..core.errors import (
    AdaptationFailure,
    ConvergenceWarning,
    InitializationFailure,
    InsufficientDrawsError,
    NonFiniteError,
    OutOfSupportError,
    SingularInformationError,
)
from ..core.seeding import make_rng
from ..models.results import ChainStats, PosteriorDraws
from ..models.schemas import TrialData
from ..models.specs import ModelSpec, SamplerConfig
from .diagnostics import diagnostics
from .posterior import Posterior

logger = logging.getLogger(__name__)

Target = Callable[[np.ndarray], tuple[float, np.ndarray]]

REJECTED_EVALUATIONS = (
    NonFiniteError,
    OutOfSupportError,
    SingularInformationError,
    OverflowError,
    FloatingPointError,
)

MAX_INIT_ATTEMPTS = 100
INIT_RADIUS = 2.0
MIN_STEP_SIZE = 1e-12
MAX_STEP_SIZE = 1e7

# windowed metric adaptation
INIT_BUFFER = 75
TERM_BUFFER = 50
BASE_WINDOW = 25


class PhasePoint:
    __slots__ = ("theta", "p", "grad", "logp")

    def __init__(self, theta: np.ndarray, p: np.ndarray, grad: np.ndarray, logp: float):
        self.theta = theta
        self.p = p
        self.grad = grad
        self.logp = logp


def hamiltonian(logp: float, p: np.ndarray, inv_metric: np.ndarray) -> float:
    return -logp + 0.5 * float(p @ (inv_metric * p))


def leapfrog(target: Target, point: PhasePoint, step_size: float, inv_metric: np.ndarray) -> PhasePoint:
    p = point.p + 0.5 * step_size * point.grad
    theta = point.theta + step_size * inv_metric * p
    logp, grad = target(theta)
    p = p + 0.5 * step_size * grad
    return PhasePoint(theta, p, grad, logp)


def _no_u_turn(p_sharp_minus: np.ndarray, p_sharp_plus: np.ndarray, rho: np.ndarray) -> bool:
    return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0


class DualAveraging:
    """Step-size adaptation towards a target mean acceptance statistic"""

    def __init__(self, target_accept: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(1.0)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.counter = 0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target_accept - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


class WelfordVariance:
    def __init__(self, dim: int):
        self.dim = dim
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        n = self.n
        variance = self.m2 / (n - 1)
        return (n / (n + 5.0)) * variance + 1e-3 * (5.0 / (n + 5.0))


def adaptation_windows(warmup: int) -> tuple[int, int, list[int]]:
    """(first metric iteration, last metric iteration + 1, window ends).

    Window ends are warmup iteration counts after which the metric is
    re-estimated. Warmups shorter than 20 iterations adapt the step size only.
    """
    if warmup < 20:
        return warmup, warmup, []
    init, term, base = INIT_BUFFER, TERM_BUFFER, BASE_WINDOW
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    stop = warmup - term
    ends = []
    start, size = init, base
    while True:
        end = start + size
        if end + 2 * size > stop:
            ends.append(stop)
            break
        ends.append(end)
        start, size = end, 2 * size
    return init, stop, ends


class _Subtree:
    __slots__ = ("end", "propose", "p_beg", "p_end", "p_sharp_beg", "p_sharp_end", "rho", "log_sum_weight", "valid")

    def __init__(self, end, propose, p_beg, p_end, p_sharp_beg, p_sharp_end, rho, log_sum_weight, valid):
        self.end = end
        self.propose = propose
        self.p_beg = p_beg
        self.p_end = p_end
        self.p_sharp_beg = p_sharp_beg
        self.p_sharp_end = p_sharp_end
        self.rho = rho
        self.log_sum_weight = log_sum_weight
        self.valid = valid


class ChainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    chain: int
    draws: np.ndarray
    divergent: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0

    def stats(self, max_tree_depth: int) -> ChainStats:
        return ChainStats(
            chain=self.chain,
            step_size=self.step_size,
            inverse_metric=self.inv_metric.tolist(),
            mean_accept_stat=float(self.accept_stat.mean()) if self.accept_stat.size else math.nan,
            divergences=int(self.divergent.sum()),
            max_depth_hits=int(np.sum(self.tree_depth >= max_tree_depth)),
        )


class NutsSampler:
    """One chain of NUTS on ``target``; all randomness comes from ``rng``."""

    def __init__(self, target: Target, dim: int, config: SamplerConfig, rng: np.random.Generator):
        self.target = target
        self.dim = dim
        self.config = config
        self.rng = rng
        self.inv_metric = np.ones(dim)
        self.step_size = 1.0
        self._n_leapfrog = 0
        self._sum_metro_prob = 0.0
        self._divergent = False

    # ----------------------------------------------------------- dynamics

    def _draw_momentum(self) -> np.ndarray:
        return self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def _step(self, point: PhasePoint, sign: int) -> tuple[Optional[PhasePoint], float]:
        try:
            new = leapfrog(self.target, point, sign * self.step_size, self.inv_metric)
        except REJECTED_EVALUATIONS:
            return None, math.inf
        h = hamiltonian(new.logp, new.p, self.inv_metric)
        if not math.isfinite(h):
            return None, math.inf
        return new, h

    def _build_tree(self, depth: int, point: PhasePoint, sign: int, h0: float) -> _Subtree:
        if depth == 0:
            new, h = self._step(point, sign)
            self._n_leapfrog += 1
            if new is None or h - h0 > self.config.divergence_threshold:
                self._divergent = True
                return _Subtree(point, point, None, None, None, None, None, -math.inf, False)
            log_weight = h0 - h
            self._sum_metro_prob += 1.0 if log_weight > 0 else math.exp(log_weight)
            p_sharp = self.inv_metric * new.p
            return _Subtree(new, new, new.p, new.p, p_sharp, p_sharp, new.p.copy(), log_weight, True)

        init = self._build_tree(depth - 1, point, sign, h0)
        if not init.valid:
            return init
        final = self._build_tree(depth - 1, init.end, sign, h0)
        if not final.valid:
            return final

        log_sum_weight = np.logaddexp(init.log_sum_weight, final.log_sum_weight)
        if self.rng.uniform() < math.exp(final.log_sum_weight - log_sum_weight):
            propose = final.propose
        else:
            propose = init.propose

        rho = init.rho + final.rho
        persist = (
            _no_u_turn(init.p_sharp_beg, final.p_sharp_end, rho)
            and _no_u_turn(init.p_sharp_beg, final.p_sharp_beg, init.rho + final.p_beg)
            and _no_u_turn(init.p_sharp_end, final.p_sharp_end, final.rho + init.p_end)
        )
        return _Subtree(
            final.end, propose, init.p_beg, final.p_end,
            init.p_sharp_beg, final.p_sharp_end, rho, float(log_sum_weight), persist,
        )

    def transition(self, current: PhasePoint) -> tuple[PhasePoint, float, int, bool]:
        """One NUTS transition: (next point, acceptance statistic, depth, divergent)."""
        p0 = self._draw_momentum()
        start = PhasePoint(current.theta, p0, current.grad, current.logp)
        h0 = hamiltonian(start.logp, p0, self.inv_metric)

        self._n_leapfrog = 0
        self._sum_metro_prob = 0.0
        self._divergent = False

        z_bck = z_fwd = start
        sample = start
        log_sum_weight = 0.0
        rho = p0.copy()
        depth = 0

        while depth < self.config.max_tree_depth:
            forward = self.rng.uniform() > 0.5
            sub = self._build_tree(depth, z_fwd if forward else z_bck, 1 if forward else -1, h0)
            if not sub.valid:
                break
            depth += 1

            if sub.log_sum_weight > log_sum_weight:
                sample = sub.propose
            elif self.rng.uniform() < math.exp(sub.log_sum_weight - log_sum_weight):
                sample = sub.propose
            log_sum_weight = float(np.logaddexp(log_sum_weight, sub.log_sum_weight))

            # left/right ends of the two merged pieces
            if forward:
                outer_left, inner_left, rho_left = z_bck.p, z_fwd.p, rho
                inner_right, outer_right, rho_right = sub.p_beg, sub.p_end, sub.rho
                z_fwd = sub.end
            else:
                outer_left, inner_left, rho_left = sub.p_end, sub.p_beg, sub.rho
                inner_right, outer_right, rho_right = z_bck.p, z_fwd.p, rho
                z_bck = sub.end

            rho = rho_left + rho_right
            sharp = self.inv_metric
            persist = (
                _no_u_turn(sharp * outer_left, sharp * outer_right, rho)
                and _no_u_turn(sharp * outer_left, sharp * inner_right, rho_left + inner_right)
                and _no_u_turn(sharp * inner_left, sharp * outer_right, rho_right + inner_left)
            )
            if not persist:
                break

        accept_stat = self._sum_metro_prob / self._n_leapfrog if self._n_leapfrog else 0.0
        return sample, accept_stat, depth, self._divergent

    # -------------------------------------------------------------- warmup

    def find_reasonable_step_size(self, point: PhasePoint) -> float:
        """Double or halve the step size until one leapfrog step crosses 80% acceptance."""
        log_target = math.log(0.8)

        def delta_h() -> float:
            p = self._draw_momentum()
            h0 = hamiltonian(point.logp, p, self.inv_metric)
            _, h = self._step(PhasePoint(point.theta, p, point.grad, point.logp), 1)
            return h0 - h

        direction = 1 if delta_h() > log_target else -1
        while True:
            accepted = delta_h() > log_target
            if (direction == 1 and not accepted) or (direction == -1 and accepted):
                break
            self.step_size = self.step_size * 2.0 if direction == 1 else self.step_size / 2.0
            if self.step_size > MAX_STEP_SIZE:
                raise AdaptationFailure(f"Step size diverged above {MAX_STEP_SIZE}; the target may be improper")
            if self.step_size < MIN_STEP_SIZE:
                raise AdaptationFailure(f"Step size fell below {MIN_STEP_SIZE}")
        return self.step_size

    def initialize(self) -> PhasePoint:
        for attempt in range(1, MAX_INIT_ATTEMPTS + 1):
            theta = self.rng.uniform(-INIT_RADIUS, INIT_RADIUS, size=self.dim)
            try:
                logp, grad = self.target(theta)
            except REJECTED_EVALUATIONS as e:
                logger.debug(f"Initial point {attempt} rejected: {e}")
                continue
            if math.isfinite(logp) and np.all(np.isfinite(grad)):
                return PhasePoint(theta, np.zeros(self.dim), np.asarray(grad, dtype=float), float(logp))
        raise InitializationFailure(f"No finite starting point after {MAX_INIT_ATTEMPTS} attempts")

    # ----------------------------------------------------------------- run

    def run(self, chain: int = 0) -> ChainResult:
        config = self.config
        warmup, n_keep = config.warmup, config.draws_per_chain
        point = self.initialize()
        self.find_reasonable_step_size(point)

        adapter = DualAveraging(config.target_accept)
        adapter.restart(self.step_size)
        metric_start, metric_stop, window_ends = adaptation_windows(warmup)
        estimator = WelfordVariance(self.dim)

        draws = np.empty((n_keep, self.dim))
        divergent = np.zeros(n_keep, dtype=bool)
        accept = np.empty(n_keep)
        depths = np.empty(n_keep, dtype=int)
        warmup_divergences = 0

        for iteration in range(config.iterations):
            point, accept_stat, depth, is_divergent = self.transition(point)

            if iteration < warmup:
                warmup_divergences += int(is_divergent)
                self.step_size = adapter.update(accept_stat)
                if metric_start <= iteration < metric_stop:
                    estimator.update(point.theta)
                if window_ends and iteration + 1 == window_ends[0]:
                    window_ends.pop(0)
                    self.inv_metric = estimator.regularized_variance()
                    estimator.reset()
                    self.find_reasonable_step_size(point)
                    adapter.restart(self.step_size)
                    logger.debug(f"Chain {chain}: metric updated at iteration {iteration + 1}")
                if iteration + 1 == warmup:
                    self.step_size = adapter.final_step_size
                if self.step_size < MIN_STEP_SIZE:
                    raise AdaptationFailure(
                        f"Chain {chain}: step size {self.step_size:.3g} underflowed during warmup"
                    )
                continue

            k = iteration - warmup
            draws[k] = point.theta
            divergent[k] = is_divergent
            accept[k] = accept_stat
            depths[k] = depth

        logger.info(
            f"Chain {chain} finished: step size {self.step_size:.4g}, "
            f"mean accept {accept.mean() if n_keep else math.nan:.3f}, "
            f"{int(divergent.sum())} divergences"
        )
        return ChainResult(
            chain=chain,
            draws=draws,
            divergent=divergent,
            accept_stat=accept,
            tree_depth=depths,
            step_size=self.step_size,
            inv_metric=self.inv_metric.copy(),
            warmup_divergences=warmup_divergences,
        )


def _run_chain(args: tuple[Target, int, SamplerConfig, int]) -> ChainResult:
    target, dim, config, chain = args
    return NutsSampler(target, dim, config, make_rng(config.seed, chain)).run(chain)


def run_chains(target: Target, dim: int, config: SamplerConfig) -> list[ChainResult]:
    """Run ``config.chains`` chains; results are ordered by chain index.

    Chain c draws from the stream ``(config.seed, c)``, so results do not
    depend on whether chains run in worker processes.
    """
    tasks = [(target, dim, config, chain) for chain in range(config.chains)]
    if config.parallel_chains and config.chains > 1:
        with Pool(processes=config.chains) as pool:
            return pool.map(_run_chain, tasks)
    return [_run_chain(task) for task in tasks]


def sample(spec: ModelSpec, data: TrialData, config: SamplerConfig) -> PosteriorDraws:
    posterior = Posterior(spec, data)
    logger.info(
        f"Sampling '{spec.label or 'model'}' on '{posterior.data.name}': {config.chains} chains x "
        f"{config.iterations} iterations ({config.warmup} warmup), seed {config.seed}"
    )
    results = run_chains(posterior, posterior.dim, config)

    draws = np.stack([r.draws for r in results])
    flat = draws.reshape(-1, posterior.dim)
    natural = posterior.natural_frame(flat)
    natural.insert(0, "draw", np.tile(np.arange(config.draws_per_chain), config.chains))
    natural.insert(0, "chain", np.repeat(np.arange(config.chains), config.draws_per_chain))

    fit = PosteriorDraws(
        spec=spec,
        config=config,
        parameter_names=posterior.parameter_names,
        draws=draws,
        natural=natural,
        log_lik=posterior.pointwise_log_likelihood(flat),
        divergent=np.stack([r.divergent for r in results]),
        schedules=posterior.schedules,
        reference_schedule_id=posterior.reference.id,
        max_dose=posterior.max_dose,
        ed50_bounds=(posterior.lower, posterior.upper),
        chain_stats=[r.stats(config.max_tree_depth) for r in results],
    )

    try:
        fit.diagnostics = diagnostics(fit)
    except InsufficientDrawsError as e:
        logger.info(f"Skipping convergence diagnostics: {e}")

    if fit.divergence_count:
        share = fit.divergence_count / fit.total_draws
        logger.warning(f"{fit.divergence_count} divergent transitions ({share:.2%} of draws)")
        warnings.warn(f"{fit.divergence_count} divergent transitions", ConvergenceWarning, stacklevel=2)
    return fit


def write_draws_csv(fit: PosteriorDraws, path: Path) -> Path:
    """One row per draw: chain, draw, natural-scale parameters, divergent flag"""
    frame = fit.natural.copy()
    frame["divergent"] = fit.divergent.reshape(-1)
    frame.to_csv(path, index=False)
    return path
