"""Box-bounded Bayesian optimisation with a GP surrogate and expected improvement.

Inputs are scaled to the unit cube and objective values are standardised
before each GP fit. Kernel hyperparameters come from a median heuristic
(no marginal-likelihood optimisation), which keeps a fit cheap enough to run
once per acquisition step for thousands of windows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import pdist
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

MAX_NOISE = 1e-2
# posterior sd below this counts as zero variance for EI
SIGMA_ZERO = 1e-10
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class BoConfig:
    bounds: np.ndarray
    n_init: int = 8
    n_iter: int = 25
    seed: int = 0
    noise_floor: float = 1e-6
    kernel_lengthscale: float | str = "auto"
    kernel_variance: float | str = "auto"
    n_candidates: int = 1024
    n_refine: int = 4
    penalty: float = 1e6
    # share of acquisition candidates drawn around the incumbent
    local_fraction: float = 0.25
    # "log" fits the GP to log(y + log_offset); meant for non-negative losses
    y_transform: str = "none"
    log_offset: float = 1e-3

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ConfigError("bounds must be a sequence of (lo, hi) rows")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ConfigError("every bound needs lo < hi")
        if self.n_init < 2:
            raise ConfigError("n_init must be >= 2")
        if self.n_iter < 0:
            raise ConfigError("n_iter must be >= 0")
        if not 0 <= self.local_fraction <= 1:
            raise ConfigError("local_fraction must be in [0, 1]")
        if self.y_transform not in ("none", "log"):
            raise ConfigError("y_transform must be 'none' or 'log'")
        if self.log_offset <= 0:
            raise ConfigError("log_offset must be positive")
        if self.noise_floor < 0:
            raise ConfigError("noise_floor must be >= 0")
        for name in ("kernel_lengthscale", "kernel_variance"):
            val = getattr(self, name)
            if val != "auto" and not (isinstance(val, (int, float)) and val > 0):
                raise ConfigError(f"{name} must be 'auto' or a positive number")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def to_unit(self, points) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return (np.atleast_2d(np.asarray(points, dtype=float)) - lo) / (hi - lo)

    def from_unit(self, u) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + np.asarray(u, dtype=float) * (hi - lo)

    def replace(self, **changes) -> "BoConfig":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return BoConfig(**values)


@dataclass(eq=False)
class GpSurrogate:
    """Zero-mean GP on unit-cube inputs and standardised outputs."""

    X: np.ndarray
    y: np.ndarray
    y_mean: float
    y_scale: float
    lengthscale: float
    variance: float
    noise: float
    chol: np.ndarray
    alpha: np.ndarray
    bounds: np.ndarray

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return _se_kernel(A, B, self.lengthscale, self.variance)

    def predict_unit(self, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance in standardised units at unit-cube points."""
        U = np.atleast_2d(U)
        Ks = self._kernel(U, self.X)
        mean = Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        var = self.variance - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)

    def predict(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance in the objective's own units."""
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        U = (np.atleast_2d(np.asarray(points, float)) - lo) / (hi - lo)
        mean, var = self.predict_unit(U)
        return self.y_mean + self.y_scale * mean, var * self.y_scale ** 2


def _se_kernel(A, B, lengthscale, variance):
    sq = (np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T)
    return variance * np.exp(-0.5 * np.maximum(sq, 0.0) / lengthscale ** 2)


def _fit_unit(U: np.ndarray, values: np.ndarray, config: BoConfig) -> GpSurrogate:
    values = np.asarray(values, dtype=float)
    if len(U) < 2 or len(U) != len(values):
        raise ConfigError("gp_fit needs at least 2 points and one value per point")
    y_mean = float(np.mean(values))
    y_scale = float(np.std(values))
    if not y_scale > 0:
        y_scale = 1.0
    y = (values - y_mean) / y_scale

    if config.kernel_lengthscale == "auto":
        dists = pdist(U)
        med = float(np.median(dists)) if len(dists) else 0.0
        lengthscale = med if med > 1e-12 else 1.0
    else:
        lengthscale = float(config.kernel_lengthscale)
    if config.kernel_variance == "auto":
        variance = float(np.var(y))
        if not variance > 0:
            variance = 1.0
    else:
        variance = float(config.kernel_variance)

    K = _se_kernel(U, U, lengthscale, variance)
    noise = config.noise_floor
    while True:
        try:
            L = np.linalg.cholesky(K + noise * np.eye(len(U)))
            break
        except np.linalg.LinAlgError:
            if noise >= MAX_NOISE:
                raise NumericError(f"kernel matrix not positive definite even with noise {noise:g}") from None
            noise = min(max(noise * 10.0, 1e-12), MAX_NOISE)
            logger.debug("raising GP noise to %g", noise)
    alpha = cho_solve((L, True), y, check_finite=False)
    return GpSurrogate(U, y, y_mean, y_scale, lengthscale, variance, noise, L, alpha,
                       config.bounds.copy())


def gp_fit(points, values, config: BoConfig) -> GpSurrogate:
    """Fit the surrogate to points given in the original parameter units."""
    return _fit_unit(config.to_unit(points), values, config)


def _ei(mean: np.ndarray, var: np.ndarray, best: float) -> np.ndarray:
    sigma = np.sqrt(var)
    imp = best - mean
    out = np.zeros_like(mean)
    ok = sigma > SIGMA_ZERO
    z = imp[ok] / sigma[ok]
    out[ok] = imp[ok] * ndtr(z) + sigma[ok] * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return np.maximum(out, 0.0)


def expected_improvement(gp: GpSurrogate, query, best_so_far: float) -> np.ndarray:
    """EI for minimisation, in objective units; zero where the posterior variance vanishes."""
    mean, var = gp.predict(query)
    return _ei(mean, var, best_so_far)


@dataclass(eq=False)
class BoResult:
    best_point: np.ndarray
    best_value: float
    points: np.ndarray
    values: np.ndarray
    bounds: np.ndarray
    history: list[tuple[np.ndarray, float]] = field(repr=False, default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.values)

    def incumbent_trace(self) -> np.ndarray:
        return np.minimum.accumulate(self.values)


def _refine(gp: GpSurrogate, x: np.ndarray, best_std: float, start: float = 0.05,
            stop: float = 1e-4, max_moves: int = 60) -> tuple[np.ndarray, float]:
    """Coordinate pattern search on EI inside the unit cube."""
    d = len(x)
    moves = np.vstack([np.eye(d), -np.eye(d)])
    cur = _ei(*gp.predict_unit(x), best_std)[0]
    step = start
    for _ in range(max_moves):
        nbrs = np.clip(x + step * moves, 0.0, 1.0)
        vals = _ei(*gp.predict_unit(nbrs), best_std)
        j = int(np.argmax(vals))
        if vals[j] > cur:
            x, cur = nbrs[j], vals[j]
        else:
            step *= 0.5
            if step < stop:
                break
    return x, cur


def _candidates(rng: np.random.Generator, incumbent: np.ndarray, n: int, local_fraction: float) -> np.ndarray:
    """Uniform points plus Gaussian perturbations of the incumbent at scales 1e-3 to 1e-1."""
    n_local = int(round(n * local_fraction))
    uniform = rng.random((n - n_local, len(incumbent)))
    scales = 10.0 ** rng.uniform(-3.0, -1.0, size=(n_local, 1))
    local = np.clip(incumbent + scales * rng.standard_normal((n_local, len(incumbent))), 0.0, 1.0)
    return np.vstack([uniform, local])


def bo_minimize(objective: Callable[[np.ndarray], float], config: BoConfig,
                initial_points: Sequence[Sequence[float]] | None = None) -> BoResult:
    """Minimise ``objective`` over ``config.bounds`` with n_init + n_iter evaluations.

    ``initial_points`` (original units) replace the first quasi-random
    design points; non-finite objective values are recorded as
    ``config.penalty``.
    """
    rng = np.random.default_rng(config.seed)
    d = config.dim
    sampler = qmc.Halton(d=d, scramble=True, seed=rng)
    U = sampler.random(config.n_init)
    if initial_points is not None and len(initial_points):
        fixed = np.clip(config.to_unit(initial_points), 0.0, 1.0)[: config.n_init]
        U[: len(fixed)] = fixed

    points, values = [], []

    def evaluate(u: np.ndarray) -> None:
        x = config.from_unit(u)
        val = float(objective(x))
        if not np.isfinite(val):
            val = config.penalty
        points.append(x)
        values.append(val)

    for u in U:
        evaluate(u)
    Uall = [u for u in U]
    for _ in range(config.n_iter):
        y = np.array(values)
        if config.y_transform == "log":
            y = np.log(np.maximum(y, 0.0) + config.log_offset)
        gp = _fit_unit(np.array(Uall), y, config)
        best_std = (y.min() - gp.y_mean) / gp.y_scale
        cand = _candidates(rng, Uall[int(np.argmin(values))], config.n_candidates, config.local_fraction)
        ei = _ei(*gp.predict_unit(cand), best_std)
        order = np.argsort(-ei, kind="stable")[: config.n_refine]
        chosen, chosen_ei = cand[order[0]], ei[order[0]]
        for j in order:
            x, val = _refine(gp, cand[j], best_std)
            if val > chosen_ei:
                chosen, chosen_ei = x, val
        Uall.append(chosen)
        evaluate(chosen)

    vals = np.array(values)
    k = int(np.argmin(vals))
    return BoResult(points[k].copy(), float(vals[k]), np.array(points), vals,
                    config.bounds.copy(), list(zip(points, values)))
