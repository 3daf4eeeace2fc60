"""Objective functions: a synthetic landscape and an external-process evaluator."""

from __future__ import annotations

import hashlib
import math
import re
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metric import DistanceCache, EdgeWeights, default_cap
from .space import Net, SpaceConfig, random_net

__all__ = [
    "Evaluator",
    "EvaluatorError",
    "EvaluatorCrashed",
    "MalformedResponse",
    "EvaluatorTimeout",
    "SyntheticObjective",
    "ExternalEvaluator",
    "synthetic_eval",
    "external_eval",
    "DEFAULT_TIMEOUT",
]

Evaluator = Callable[[Net], float]

DEFAULT_TIMEOUT = 86400.0
_RESPONSE = re.compile(r"-?[0-9]+(\.[0-9]+)?([eE][+-]?[0-9]+)?")


class EvaluatorError(RuntimeError):
    """An objective evaluation failed; ``net`` is the canonical string of the input."""

    reason = "evaluation failed"

    def __init__(self, net: str, detail: str = ""):
        self.net = net
        self.detail = detail
        msg = f"{self.reason} on net {net}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class EvaluatorCrashed(EvaluatorError):
    reason = "evaluator crashed"


class MalformedResponse(EvaluatorError):
    reason = "malformed response"


class EvaluatorTimeout(EvaluatorError):
    reason = "timeout"


@dataclass
class SyntheticObjective:
    """``f(x) = exp(-d(x, target) / scale) + eps`` over the geodesic metric.

    ``eps`` is Gaussian with standard deviation ``noise_sd`` and is drawn
    from a stream seeded by the net's canonical string and ``seed``, so the
    same net always gets the same value under the same seed.
    """

    space: SpaceConfig
    target: Net
    scale: float = 3.0
    noise_sd: float = 0.02
    weights: EdgeWeights = field(default_factory=EdgeWeights)
    cap: float | None = None
    seed: int = 0
    cache: DistanceCache | None = field(default=None, repr=False, compare=False)
    deterministic: bool = field(default=True, init=False)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.cache is None:
            self.cache = DistanceCache(self.space, self.weights, self.cap)
        elif (self.cache.space, self.cache.weights, self.cache.cap) != (
            self.space,
            self.weights,
            default_cap(self.weights) if self.cap is None else float(self.cap),
        ):
            raise ValueError("distance cache belongs to a different space or weighting")

    @classmethod
    def random(cls, space: SpaceConfig, seed: int, **kwargs) -> "SyntheticObjective":
        """Objective whose hidden optimum is drawn with ``random_net``."""
        rng = np.random.default_rng([seed, 0x7A46])
        return cls(space, random_net(space, rng), seed=seed, **kwargs)

    def distance(self, net: Net) -> float:
        return float(self.cache.distances_from(self.target, [net])[0])

    def noise(self, net: Net) -> float:
        if self.noise_sd == 0:
            return 0.0
        digest = hashlib.blake2b(
            f"{self.seed}|{net.canonical}".encode(), digest_size=16
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return float(rng.normal(0.0, self.noise_sd))

    def __call__(self, net: Net) -> float:
        return math.exp(-self.distance(net) / self.scale) + self.noise(net)

    def describe(self) -> dict:
        return {
            "kind": "synthetic",
            "target": self.target.canonical,
            "scale": self.scale,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
        }


def synthetic_eval(net: Net, obj: SyntheticObjective) -> float:
    return obj(net)


_endpoint_locks: dict[tuple[str, ...], threading.Lock] = {}
_registry_lock = threading.Lock()


def _lock_for(command: tuple[str, ...]) -> threading.Lock:
    with _registry_lock:
        return _endpoint_locks.setdefault(command, threading.Lock())


@dataclass
class ExternalEvaluator:
    """Evaluate nets by running a child process.

    The child receives one line on standard input (the net's JSON encoding)
    followed by end-of-file, and must print one decimal number and exit 0.
    Only one child per command runs at a time.
    """

    command: Sequence[str]
    timeout: float = DEFAULT_TIMEOUT
    deterministic: bool = False
    cwd: str | None = None

    def __post_init__(self):
        if isinstance(self.command, str):
            raise TypeError("command must be an argument list, not a string")
        self.command = tuple(self.command)
        if not self.command:
            raise ValueError("empty evaluator command")

    def __call__(self, net: Net) -> float:
        payload = net.to_json() + "\n"
        with _lock_for(self.command):
            try:
                proc = subprocess.run(
                    self.command,
                    input=payload,
                    capture_output=True,
                    text=True,
                    timeout=self.timeout,
                    cwd=self.cwd,
                )
            except subprocess.TimeoutExpired:
                raise EvaluatorTimeout(net.canonical, f"no answer after {self.timeout:g} s") from None
            except OSError as exc:
                raise EvaluatorCrashed(net.canonical, str(exc)) from exc
        if proc.returncode != 0:
            tail = proc.stderr.strip().splitlines()[-1:] or [""]
            raise EvaluatorCrashed(net.canonical, f"exit status {proc.returncode} {tail[0]}".strip())
        lines = proc.stdout.splitlines()
        line = lines[0].strip() if lines else ""
        if len([ln for ln in lines if ln.strip()]) != 1 or not _RESPONSE.fullmatch(line):
            raise MalformedResponse(net.canonical, f"got {proc.stdout[:80]!r}")
        return float(line)

    def describe(self) -> dict:
        return {"kind": "external", "command": list(self.command), "timeout": self.timeout}


def external_eval(net: Net, command: Sequence[str], timeout: float = DEFAULT_TIMEOUT) -> float:
    return ExternalEvaluator(command, timeout)(net)
