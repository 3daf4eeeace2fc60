"""Gaussian-process regression over nets with a graph-induced Gaussian kernel."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .metric import DistanceCache, EdgeWeights, default_cap
from .space import Net, SpaceConfig

logger = logging.getLogger(__name__)

__all__ = [
    "KernelParams",
    "GPModel",
    "FactorizationError",
    "kernel_eval",
    "gram_matrix",
    "fit",
    "tune_lambda",
    "JITTER_START",
    "JITTER_MAX",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-2
STD_FLOOR = 1e-12


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Gaussian shape ``exp(-lam * d**2)`` over the weighted geodesic metric."""

    lam: float = 0.5
    weights: EdgeWeights = field(default_factory=EdgeWeights)
    cap: float | None = None
    shape: str = "gaussian"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.shape != "gaussian":
            raise ValueError(f"unsupported kernel shape {self.shape!r}")

    @property
    def resolved_cap(self) -> float:
        return default_cap(self.weights) if self.cap is None else float(self.cap)

    def shape_fn(self, d):
        return np.exp(-self.lam * np.square(d))

    def cache(self, space: SpaceConfig) -> DistanceCache:
        return DistanceCache(space, self.weights, self.resolved_cap)


def kernel_eval(
    a: Net,
    b: Net,
    params: KernelParams,
    space: SpaceConfig,
    cache: DistanceCache | None = None,
) -> float:
    cache = params.cache(space) if cache is None else cache
    return float(params.shape_fn(cache.distance(a, b)))


def gram_matrix(points: Sequence[Net], params: KernelParams, cache: DistanceCache) -> np.ndarray:
    d = cache.matrix(points, points)
    # Symmetrize explicitly; both triangles come from exact searches anyway.
    d = np.minimum(d, d.T)
    return params.shape_fn(d)


def _factorize(K: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = JITTER_START
    eye = np.eye(len(K))
    while True:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            if jitter >= JITTER_MAX * (1 - 1e-9):
                raise FactorizationError(
                    f"Gram matrix not positive definite even with jitter {jitter:g}"
                ) from None
            jitter *= 10.0


@dataclass
class GPModel:
    """A fitted GP over nets.

    Observations are standardized internally; ``posterior`` reports raw
    units.  The noise variance is in standardized units.
    """

    points: list[Net]
    observations: np.ndarray
    params: KernelParams
    space: SpaceConfig
    noise_variance: float
    mean: float
    std: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    cache: DistanceCache = field(repr=False)

    @property
    def z(self) -> np.ndarray:
        return (self.observations - self.mean) / self.std

    def cross_cov(self, queries: Sequence[Net]) -> np.ndarray:
        """Kernel values between training points (rows) and queries (cols)."""
        if not queries:
            return np.zeros((len(self.points), 0))
        return self.params.shape_fn(self.cache.matrix(self.points, queries))

    def predict(self, queries: Sequence[Net]) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance (raw units) at several nets."""
        ks = self.cross_cov(queries)
        mu = ks.T @ self.alpha
        v = solve_triangular(self.chol, ks, lower=True)
        var = np.maximum(1.0 - np.einsum("ij,ij->j", v, v), 0.0)
        return self.mean + self.std * mu, var * self.std**2

    def posterior(self, query: Net) -> tuple[float, float]:
        mu, var = self.predict([query])
        return float(mu[0]), float(var[0])

    def log_marginal_likelihood(self) -> float:
        z = self.z
        n = len(z)
        return float(
            -0.5 * z @ self.alpha
            - np.log(np.diag(self.chol)).sum()
            - 0.5 * n * math.log(2 * math.pi)
        )


def fit(
    points: Sequence[Net],
    observations: Sequence[float],
    params: KernelParams,
    space: SpaceConfig,
    noise_variance: float = 1.0,
    *,
    cache: DistanceCache | None = None,
) -> GPModel:
    """Condition a zero-mean GP (in standardized units) on the given data.

    The Gram matrix ``K + noise*I`` is factorized with a jitter that starts at
    1e-10 and grows tenfold per failed attempt up to 1e-2.  Graph-induced
    Gaussian kernels need not be positive semi-definite, so this can fail;
    :class:`FactorizationError` is raised when the last attempt fails.
    """
    points = list(points)
    y = np.asarray(observations, dtype=float)
    if not points:
        raise ValueError("need at least one point")
    if len(y) != len(points):
        raise ValueError("points and observations differ in length")
    if len(set(points)) != len(points):
        raise ValueError("training points must be pairwise distinct")
    if noise_variance < 0:
        raise ValueError("noise variance must be non-negative")
    cache = params.cache(space) if cache is None else cache
    if cache.space != space or cache.weights != params.weights or cache.cap != params.resolved_cap:
        raise ValueError("distance cache does not match the kernel parameters")

    mean = float(y.mean())
    std = float(y.std())
    if std < STD_FLOOR:
        std = 1.0
    z = (y - mean) / std

    K = gram_matrix(points, params, cache)
    K[np.diag_indices_from(K)] += noise_variance
    chol, jitter = _factorize(K)
    if jitter > JITTER_START:
        logger.info("GP fit on %d points needed jitter %.0e", len(points), jitter)
    else:
        logger.debug("GP fit on %d points, jitter %.0e", len(points), jitter)
    alpha = solve_triangular(chol.T, solve_triangular(chol, z, lower=True), lower=False)
    return GPModel(
        points=points,
        observations=y,
        params=params,
        space=space,
        noise_variance=float(noise_variance),
        mean=mean,
        std=std,
        jitter=jitter,
        chol=chol,
        alpha=alpha,
        cache=cache,
    )


def tune_lambda(
    points: Sequence[Net],
    observations: Sequence[float],
    grid: Sequence[float],
    space: SpaceConfig,
    noise_variance: float = 1.0,
    weights: EdgeWeights = EdgeWeights(),
    cap: float | None = None,
) -> KernelParams:
    """Pick the lambda in ``grid`` with the highest log marginal likelihood.

    Ties go to the smaller lambda.
    """
    if not len(grid):
        raise ValueError("lambda grid is empty")
    cache = DistanceCache(space, weights, cap)
    best = None
    for lam in sorted(set(float(g) for g in grid)):
        params = KernelParams(lam, weights, cap)
        lml = fit(points, observations, params, space, noise_variance, cache=cache).log_marginal_likelihood()
        if best is None or lml > best[0]:
            best = (lml, params)
    return best[1]
