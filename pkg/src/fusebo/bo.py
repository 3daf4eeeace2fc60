"""Bayesian optimization over nets, and the random-search baseline."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .gp import GPModel, KernelParams, fit
from .metric import DistanceCache
from .objective import Evaluator, EvaluatorError
from .space import Net, SpaceConfig, _adjacent, random_net

__all__ = [
    "BOConfig",
    "Trial",
    "TrialLog",
    "SpaceExhausted",
    "EvaluationError",
    "expected_improvement",
    "incumbent",
    "ei_values",
    "propose_candidates",
    "run_bo",
    "run_random_search",
    "iterations_to_threshold",
]

MAX_DUPLICATE_DRAWS = 1000
NOISY_INCUMBENT_THRESHOLD = 0.1


class SpaceExhausted(RuntimeError):
    pass


class EvaluationError(EvaluatorError):
    reason = "objective raised"


@dataclass(frozen=True)
class BOConfig:
    space: SpaceConfig
    kernel: KernelParams = field(default_factory=KernelParams)
    noise_variance: float = 1.0
    budget: int = 30
    init_count: int = 3
    neighbor_radius: int = 2
    random_count: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.budget >= self.init_count >= 1:
            raise ValueError("need budget >= init_count >= 1")
        if self.neighbor_radius < 1:
            raise ValueError("neighbor_radius must be at least 1")
        if self.random_count < 0:
            raise ValueError("random_count must be non-negative")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")

    def to_dict(self) -> dict:
        k = self.kernel
        return {
            "modalities": list(self.space.modalities),
            "max_fc": self.space.max_fc,
            "kernel": {
                "lambda": k.lam,
                "w_T": k.weights.structural,
                "w_D": k.weights.depth,
                "cap": k.resolved_cap,
            },
            "noise_variance": self.noise_variance,
            "budget": self.budget,
            "init_count": self.init_count,
            "candidate_pool": {
                "neighbor_radius": self.neighbor_radius,
                "random_count": self.random_count,
            },
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Trial:
    iter: int
    net: Net
    y: float
    acq: float | None = None
    ms: int | None = None


@dataclass
class TrialLog:
    method: str
    trials: list[Trial] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trials)

    @property
    def nets(self) -> list[Net]:
        return [t.net for t in self.trials]

    @property
    def values(self) -> np.ndarray:
        return np.array([t.y for t in self.trials], dtype=float)

    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate(self.values) if self.trials else np.array([])

    def append(self, net: Net, y: float, acq: float | None, ms: int | None) -> Trial:
        t = Trial(len(self.trials) + 1, net, float(y), acq, ms)
        self.trials.append(t)
        return t

    def to_jsonl(self, timing: bool = False) -> str:
        """One JSON object per trial.  ``ms`` is null unless ``timing`` is set,
        which keeps logs byte-reproducible by default."""
        lines = []
        for t in self.trials:
            rec = {
                "iter": t.iter,
                "net": t.net.to_dict(),
                "y": t.y,
                "acq": t.acq,
                "method": self.method,
                "ms": t.ms if timing else None,
            }
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrialLog":
        log = None
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if log is None:
                log = cls(rec["method"])
            if rec["iter"] != len(log) + 1:
                raise ValueError(f"line {lineno}: iteration {rec['iter']} out of sequence")
            log.trials.append(
                Trial(rec["iter"], Net.from_dict(rec["net"]), float(rec["y"]), rec["acq"], rec["ms"])
            )
        if log is None:
            raise ValueError("empty trial log")
        return log


def ei_values(mean, sd, best: float) -> np.ndarray:
    """Expected improvement over ``best`` for a maximization problem."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    out = np.zeros(np.broadcast(mean, sd).shape)
    pos = np.broadcast_to(sd > 0, out.shape)
    s = np.broadcast_to(sd, out.shape)[pos]
    z = (np.broadcast_to(mean, out.shape)[pos] - best) / s
    out[pos] = np.maximum(s * (z * norm.cdf(z) + norm.pdf(z)), 0.0)
    return out


def expected_improvement(model: GPModel, query: Net, best_so_far: float) -> float:
    mu, var = model.posterior(query)
    return float(ei_values(mu, np.sqrt(var), best_so_far))


def _ball(keys: Iterable, radius: int, max_fc: int) -> set:
    seen = set(keys)
    frontier = list(seen)
    for _ in range(radius):
        nxt = []
        for k in frontier:
            for v, _mv in _adjacent(k, max_fc):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    return seen


def propose_candidates(
    history: TrialLog | Sequence[Net],
    config: BOConfig,
    rng: np.random.Generator | int | None = None,
) -> list[Net]:
    """Unevaluated nets near the history plus fresh random draws.

    The pool is every net within ``neighbor_radius`` moves of an evaluated
    net together with ``random_count`` samples from ``random_net``, minus
    the evaluated nets, sorted by canonical string.  The pool can only be
    empty once every net has been evaluated, in which case
    :class:`SpaceExhausted` is raised.
    """
    nets = history.nets if isinstance(history, TrialLog) else list(history)
    if not nets:
        raise ValueError("history is empty")
    rng = np.random.default_rng(rng)
    space = config.space
    mods = nets[0].modalities
    done = {x.uid for x in nets}
    pool = _ball(done, config.neighbor_radius, space.max_fc)
    for _ in range(config.random_count):
        pool.add(random_net(space, rng).uid)
    pool -= done
    if not pool:
        # the neighbor graph is connected, so a closed evaluated set is everything
        raise SpaceExhausted("every reachable net has been evaluated")
    out = [Net._of(mods, u) for u in pool]
    out.sort(key=lambda x: x.canonical)
    return out


def incumbent(model: GPModel, observations: Sequence[float]) -> float:
    """Reference value EI improves on.

    With a large noise variance the best raw observation is an optimistic
    outlier, so the highest posterior mean over evaluated nets is used.
    """
    if model.noise_variance > NOISY_INCUMBENT_THRESHOLD:
        return float(model.predict(model.points)[0].max())
    return float(np.max(observations))


def _evaluate(objective: Evaluator, net: Net, log: TrialLog) -> tuple[float, int]:
    t0 = time.perf_counter()
    try:
        y = float(objective(net))
    except EvaluatorError as exc:
        exc.log = log
        raise
    except Exception as exc:
        err = EvaluationError(net.canonical, repr(exc))
        err.log = log
        raise err from exc
    return y, int(round((time.perf_counter() - t0) * 1000))


def _draw_new(space: SpaceConfig, rng, seen: set) -> Net | None:
    for _ in range(MAX_DUPLICATE_DRAWS):
        x = random_net(space, rng)
        if x not in seen:
            return x
    return None


def run_random_search(objective: Evaluator, config: BOConfig) -> TrialLog:
    """Independent ``random_net`` draws, rejecting nets already evaluated.

    Stops early once ``MAX_DUPLICATE_DRAWS`` consecutive draws are all
    duplicates.
    """
    rng = np.random.default_rng(config.seed)
    log = TrialLog("random", config=config.to_dict())
    seen: set[Net] = set()
    while len(log) < config.budget:
        x = _draw_new(config.space, rng, seen)
        if x is None:
            break
        seen.add(x)
        y, ms = _evaluate(objective, x, log)
        log.append(x, y, None, ms)
    return log


def run_bo(
    objective: Evaluator,
    config: BOConfig,
    *,
    cache: DistanceCache | None = None,
) -> TrialLog:
    """Sequential GP-based Bayesian optimization with expected improvement.

    The first ``init_count`` nets are the same draws random search makes
    under the same seed.  After that each step fits the GP to everything
    seen so far and evaluates the pool candidate with the highest EI (ties go
    to the smaller canonical string).
    """
    space = config.space
    cache = config.kernel.cache(space) if cache is None else cache
    rng = np.random.default_rng(config.seed)
    log = TrialLog("bo", config=config.to_dict())
    seen: set[Net] = set()

    for _ in range(config.init_count):
        x = _draw_new(space, rng, seen)
        if x is None:
            break
        seen.add(x)
        y, ms = _evaluate(objective, x, log)
        log.append(x, y, None, ms)

    while len(log) < config.budget:
        model = fit(log.nets, log.values, config.kernel, space, config.noise_variance, cache=cache)
        try:
            pool = propose_candidates(log, config, rng)
        except SpaceExhausted:
            break
        mu, var = model.predict(pool)
        ei = ei_values(mu, np.sqrt(var), incumbent(model, log.values))
        i = int(np.argmax(ei))
        x = pool[i]
        y, ms = _evaluate(objective, x, log)
        log.append(x, y, float(ei[i]), ms)
    return log


def iterations_to_threshold(log: TrialLog | Sequence[float], threshold: float) -> int | None:
    """1-based index of the first trial with value >= ``threshold``."""
    values = log.values if isinstance(log, TrialLog) else np.asarray(log, dtype=float)
    hits = np.flatnonzero(values >= threshold)
    return int(hits[0]) + 1 if hits.size else None
