"""Paired BO / random-search experiments and their two analyses.

File layout written by :func:`cmd_run` into the output directory::

    manifest.json           resolved config plus per-run status
    run-000-bo.jsonl        one TrialLog per run and method
    run-000-random.jsonl

CSV columns are fixed (see ``COMPARE_COLUMNS``, ``CURVE_COLUMNS`` and
``TREND_COLUMNS``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.stats import spearmanr

from .bo import BOConfig, TrialLog, iterations_to_threshold, run_bo, run_random_search
from .gp import KernelParams
from .metric import DistanceCache, EdgeWeights, all_pairs_distances
from .objective import DEFAULT_TIMEOUT, EvaluatorError, ExternalEvaluator, SyntheticObjective
from .space import (
    ENUMERATION_LIMIT,
    InvalidNetError,
    Net,
    SpaceConfig,
    decode_canonical,
)

__all__ = [
    "SpecError",
    "AnalysisError",
    "ExperimentSpec",
    "load_spec",
    "cmd_run",
    "cmd_compare",
    "compare_logs",
    "best_so_far_curves",
    "cmd_distance_trend",
    "distance_trend",
    "trend_from_pairs",
    "trend_from_space",
    "trend_from_logs",
    "COMPARE_COLUMNS",
    "CURVE_COLUMNS",
    "TREND_COLUMNS",
]

MANIFEST = "manifest.json"
MANIFEST_FORMAT = 1
MIN_PAIRS = 10

COMPARE_COLUMNS = (
    "threshold",
    "runs",
    "bo_median",
    "bo_mean",
    "bo_reached",
    "random_median",
    "random_mean",
    "random_reached",
    "speedup",
)
CURVE_COLUMNS = ("iter", "bo_mean_best", "bo_median_best", "random_mean_best", "random_median_best")
TREND_COLUMNS = ("distance", "count", "mean_abs_diff", "sd_abs_diff")


class SpecError(ValueError):
    """Bad experiment spec or unusable input directory (CLI exit code 2)."""


class AnalysisError(ValueError):
    """An analysis cannot be computed from the given data (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# Spec
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "modalities",
    "max_fc",
    "budget",
    "init_count",
    "noise_variance",
    "kernel",
    "candidate_pool",
    "objective",
    "runs",
    "seed",
    "output",
}


@dataclass(frozen=True)
class ExperimentSpec:
    bo: BOConfig
    objective: dict
    runs: int = 1
    output: str = "results"

    @property
    def space(self) -> SpaceConfig:
        return self.bo.space

    @property
    def seed(self) -> int:
        return self.bo.seed

    def run_seed(self, index: int) -> int:
        return self.bo.seed + index

    def to_dict(self) -> dict:
        out = self.bo.to_dict()
        out["objective"] = self.objective
        out["runs"] = self.runs
        return out

    def make_objective(self, seed: int, cache: DistanceCache | None = None):
        kind, params = next(iter(self.objective.items()))
        if kind == "external":
            return ExternalEvaluator(params["command"], params["timeout"])
        kw = dict(
            scale=params["scale"],
            noise_sd=params["noise_sd"],
            weights=self.bo.kernel.weights,
            cap=self.bo.kernel.resolved_cap,
            cache=cache,
        )
        if params["target"] is None:
            return SyntheticObjective.random(self.space, seed, **kw)
        target = decode_canonical(params["target"], self.space.modalities)
        return SyntheticObjective(self.space, target, seed=seed, **kw)


def _field(data: dict, name: str, kind, default=None, *, path: str = "", required=False):
    where = f"{path}{name}"
    if name not in data:
        if required:
            raise SpecError(f"field '{where}': missing")
        return default
    value = data[name]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise SpecError(f"field '{where}': expected {kind.__name__}, got {value!r}")
    return float(value) if kind is float else value


def _no_extra(data: dict, allowed: set, path: str):
    extra = sorted(set(data) - allowed)
    if extra:
        raise SpecError(f"field '{path}{extra[0]}': unknown field")


def parse_spec(data: Any) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise SpecError("spec must be a JSON object")
    _no_extra(data, _TOP_KEYS, "")
    mods = _field(data, "modalities", list, required=True)
    try:
        space = SpaceConfig(tuple(mods), _field(data, "max_fc", int, 3))
    except ValueError as exc:
        raise SpecError(f"field 'modalities'/'max_fc': {exc}") from None

    k = _field(data, "kernel", dict, {})
    _no_extra(k, {"lambda", "w_T", "w_D", "cap"}, "kernel.")
    cap = k.get("cap")
    if cap is not None:
        cap = _field(k, "cap", float, path="kernel.")
    try:
        weights = EdgeWeights(_field(k, "w_T", float, 1.0, path="kernel."), _field(k, "w_D", float, 1.0, path="kernel."))
        kernel = KernelParams(_field(k, "lambda", float, 0.5, path="kernel."), weights, cap)
    except ValueError as exc:
        raise SpecError(f"field 'kernel': {exc}") from None

    pool = _field(data, "candidate_pool", dict, {})
    _no_extra(pool, {"neighbor_radius", "random_count"}, "candidate_pool.")
    try:
        bo = BOConfig(
            space=space,
            kernel=kernel,
            noise_variance=_field(data, "noise_variance", float, 1.0),
            budget=_field(data, "budget", int, 30),
            init_count=_field(data, "init_count", int, 3),
            neighbor_radius=_field(pool, "neighbor_radius", int, 2, path="candidate_pool."),
            random_count=_field(pool, "random_count", int, 100, path="candidate_pool."),
            seed=_field(data, "seed", int, 0),
        )
    except ValueError as exc:
        raise SpecError(f"field 'budget'/'init_count'/'candidate_pool': {exc}") from None

    obj = _field(data, "objective", dict, {"synthetic": {}})
    if len(obj) != 1 or next(iter(obj)) not in ("synthetic", "external"):
        raise SpecError("field 'objective': must hold exactly one of 'synthetic' or 'external'")
    kind, params = next(iter(obj.items()))
    if not isinstance(params, dict):
        raise SpecError(f"field 'objective.{kind}': expected dict")
    path = f"objective.{kind}."
    if kind == "synthetic":
        _no_extra(params, {"scale", "noise_sd", "target"}, path)
        target = params.get("target")
        if target is not None:
            if not isinstance(target, str):
                raise SpecError(f"field '{path}target': expected canonical string")
            try:
                decode_canonical(target, space.modalities)
            except (ValueError, InvalidNetError) as exc:
                raise SpecError(f"field '{path}target': {exc}") from None
        resolved = {
            "scale": _field(params, "scale", float, 3.0, path=path),
            "noise_sd": _field(params, "noise_sd", float, 0.02, path=path),
            "target": target,
        }
        if resolved["scale"] <= 0 or resolved["noise_sd"] < 0:
            raise SpecError(f"field '{path}scale'/'noise_sd': scale must be > 0, noise_sd >= 0")
    else:
        _no_extra(params, {"command", "timeout"}, path)
        command = _field(params, "command", list, path=path, required=True)
        if not command or not all(isinstance(c, str) for c in command):
            raise SpecError(f"field '{path}command': expected a non-empty list of strings")
        timeout = _field(params, "timeout", float, DEFAULT_TIMEOUT, path=path)
        if timeout <= 0:
            raise SpecError(f"field '{path}timeout': must be positive")
        resolved = {"command": command, "timeout": timeout}

    runs = _field(data, "runs", int, 1)
    if runs < 1:
        raise SpecError("field 'runs': must be at least 1")
    return ExperimentSpec(bo, {kind: resolved}, runs, _field(data, "output", str, "results"))


def load_spec(path: str | os.PathLike, *, seed: int | None = None, runs: int | None = None) -> ExperimentSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"cannot read spec: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if isinstance(data, dict):
        if seed is not None:
            data["seed"] = seed
        if runs is not None:
            data["runs"] = runs
    return parse_spec(data)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _log_name(index: int, method: str) -> str:
    return f"run-{index:03d}-{method}.jsonl"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _without_runs(config) -> dict | None:
    if not isinstance(config, dict):
        return None
    return {k: v for k, v in config.items() if k != "runs"}


@dataclass
class RunSummary:
    out_dir: Path
    completed: list[int] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    failed: dict[int, str] = field(default_factory=dict)


def cmd_run(spec: ExperimentSpec, out_dir: str | os.PathLike | None = None, *, timing: bool = False) -> RunSummary:
    """Run ``spec.runs`` paired (bo, random) experiments with matched seeds.

    Runs recorded as complete in an existing manifest are skipped.  An
    evaluator failure marks that run as failed in the manifest and the
    remaining runs still execute.
    """
    out = Path(out_dir if out_dir is not None else spec.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SpecError(f"output directory {out}: {exc}") from None
    config = spec.to_dict()
    manifest_path = out / MANIFEST
    manifest = {"format": MANIFEST_FORMAT, "config": config, "runs": {}}
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{manifest_path}: unreadable manifest ({exc})") from None
        # the run count may grow between invocations; nothing else may change
        if _without_runs(old.get("config")) != _without_runs(config):
            raise SpecError(f"{out} already holds a different experiment")
        manifest["runs"] = old.get("runs", {})

    summary = RunSummary(out)
    space = spec.space
    bo_cache = spec.bo.kernel.cache(space)
    for i in range(spec.runs):
        entry = manifest["runs"].get(str(i))
        files = {m: _log_name(i, m) for m in ("bo", "random")}
        if entry and entry.get("status") == "ok" and all((out / f).exists() for f in files.values()):
            summary.skipped.append(i)
            continue
        seed = spec.run_seed(i)
        cfg = BOConfig(
            space=space,
            kernel=spec.bo.kernel,
            noise_variance=spec.bo.noise_variance,
            budget=spec.bo.budget,
            init_count=spec.bo.init_count,
            neighbor_radius=spec.bo.neighbor_radius,
            random_count=spec.bo.random_count,
            seed=seed,
        )
        objective = spec.make_objective(seed, cache=bo_cache if "synthetic" in spec.objective else None)
        record = {"seed": seed, "objective": objective.describe()}
        try:
            logs = {"bo": run_bo(objective, cfg, cache=bo_cache), "random": run_random_search(objective, cfg)}
        except EvaluatorError as exc:
            record.update(status="error", error=str(exc), net=exc.net)
            summary.failed[i] = str(exc)
        else:
            for method, log in logs.items():
                _write_atomic(out / files[method], log.to_jsonl(timing=timing))
            record.update(status="ok", files=files)
            summary.completed.append(i)
        manifest["runs"][str(i)] = record
        manifest["runs"] = dict(sorted(manifest["runs"].items(), key=lambda kv: int(kv[0])))
        _write_atomic(manifest_path, _dump(manifest))
    return summary


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

_LOG_RE = re.compile(r"run-(\d+)-(bo|random)\.jsonl$")


def load_logs(log_dir: str | os.PathLike) -> dict[str, dict[int, TrialLog]]:
    """Read every ``run-NNN-{bo,random}.jsonl`` in ``log_dir``."""
    d = Path(log_dir)
    if not d.is_dir():
        raise AnalysisError(f"{d} is not a directory")
    logs: dict[str, dict[int, TrialLog]] = {"bo": {}, "random": {}}
    for p in sorted(d.iterdir()):
        m = _LOG_RE.fullmatch(p.name)
        if m:
            try:
                logs[m.group(2)][int(m.group(1))] = TrialLog.from_jsonl(p.read_text())
            except (ValueError, KeyError) as exc:
                raise AnalysisError(f"{p}: {exc}") from None
    return logs


def _paired(logs) -> list[int]:
    bo, rs = logs["bo"], logs["random"]
    if len(bo) != len(rs) or set(bo) != set(rs):
        raise AnalysisError(f"unpaired logs: {len(bo)} bo runs vs {len(rs)} random runs")
    if not bo:
        raise AnalysisError("no trial logs found")
    return sorted(bo)


def _censored(log: TrialLog, threshold: float) -> tuple[float, bool]:
    k = iterations_to_threshold(log, threshold)
    return (float(k), True) if k is not None else (float(len(log) + 1), False)


def compare_logs(logs, thresholds: Sequence[float]) -> list[dict]:
    """Iterations-to-threshold statistics per threshold.

    A run that never reaches the threshold counts as ``len(log) + 1``
    iterations in the median and mean; ``*_reached`` is the fraction of runs
    that did reach it.  ``speedup`` is random median over BO median.
    """
    idx = _paired(logs)
    rows = []
    for thr in thresholds:
        row: dict[str, Any] = {"threshold": float(thr), "runs": len(idx)}
        for method in ("bo", "random"):
            its, hit = zip(*(_censored(logs[method][i], thr) for i in idx))
            row[f"{method}_median"] = float(np.median(its))
            row[f"{method}_mean"] = float(np.mean(its))
            row[f"{method}_reached"] = float(np.mean(hit))
        row["speedup"] = row["random_median"] / row["bo_median"]
        rows.append(row)
    return rows


def best_so_far_curves(logs) -> list[dict]:
    """Mean and median best-so-far value per iteration for each method."""
    idx = _paired(logs)
    length = max(len(logs[m][i]) for m in ("bo", "random") for i in idx)
    curves = {}
    for m in ("bo", "random"):
        arr = np.full((len(idx), length), np.nan)
        for r, i in enumerate(idx):
            best = logs[m][i].best_so_far()
            arr[r, : len(best)] = best
            arr[r, len(best) :] = best[-1]
        curves[m] = arr
    return [
        {
            "iter": t + 1,
            "bo_mean_best": float(curves["bo"][:, t].mean()),
            "bo_median_best": float(np.median(curves["bo"][:, t])),
            "random_mean_best": float(curves["random"][:, t].mean()),
            "random_median_best": float(np.median(curves["random"][:, t])),
        }
        for t in range(length)
    ]


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def cmd_compare(log_dir, thresholds: Sequence[float]) -> str:
    return to_csv(compare_logs(load_logs(log_dir), thresholds), COMPARE_COLUMNS)


# ---------------------------------------------------------------------------
# distance trend
# ---------------------------------------------------------------------------


@dataclass
class Trend:
    rows: list[dict]
    rho: float
    rho_defined: bool
    pairs: int
    bucket_rho: float

    def summary(self) -> dict:
        return {
            "spearman_rho": self.rho,
            "rho_defined": self.rho_defined,
            "pairs": self.pairs,
            "bucket_rho": self.bucket_rho,
        }


def _spearman(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0, False
    rho = float(spearmanr(a, b).statistic)
    return (rho, True) if math.isfinite(rho) else (0.0, False)


def trend_from_pairs(distances, abs_diffs, *, min_pairs: int = MIN_PAIRS) -> Trend:
    """Bucket pairs by distance and summarize ``|f(x) - f(y)|`` per bucket.

    ``spearman_rho`` is the rank correlation over all pairs; it is reported
    as 0 with ``rho_defined`` false when either side is constant.
    ``bucket_rho`` is the rank correlation between bucket distance and
    bucket mean, i.e. the trend of the plotted curve.
    """
    d = np.round(np.asarray(distances, dtype=float), 9)
    diff = np.asarray(abs_diffs, dtype=float)
    if len(d) < min_pairs:
        raise AnalysisError(f"insufficient pairs: {len(d)} < {min_pairs}")
    order = np.argsort(d, kind="stable")
    d, diff = d[order], diff[order]
    bounds = np.flatnonzero(np.diff(d)) + 1
    rows = []
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(d)]):
        chunk = diff[lo:hi]
        rows.append(
            {
                "distance": float(d[lo]),
                "count": int(hi - lo),
                "mean_abs_diff": float(chunk.mean()),
                "sd_abs_diff": float(chunk.std(ddof=1)) if len(chunk) > 1 else 0.0,
            }
        )
    rho, defined = _spearman(d, diff)
    bucket_rho, _ = _spearman(
        np.array([r["distance"] for r in rows]), np.array([r["mean_abs_diff"] for r in rows])
    )
    return Trend(rows, rho, defined, int(len(d)), bucket_rho)


def _upper_pairs(dist: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(len(values), k=1)
    return np.asarray(dist)[iu], np.abs(values[iu[0]] - values[iu[1]])


def distance_trend(distances: np.ndarray, values, *, min_pairs: int = MIN_PAIRS) -> Trend:
    """Trend over all pairs of one set of nets (square distance matrix)."""
    return trend_from_pairs(*_upper_pairs(distances, np.asarray(values, dtype=float)), min_pairs=min_pairs)


def trend_from_space(spec: ExperimentSpec, *, limit: int = ENUMERATION_LIMIT) -> Trend:
    """Trend over every pair of nets in an enumerable space (run-0 objective)."""
    if "synthetic" not in spec.objective:
        raise SpecError("a full-space trend needs a synthetic objective; use --logs instead")
    nets, dist = all_pairs_distances(spec.space, spec.bo.kernel.weights, limit=limit)
    dist = np.minimum(dist, spec.bo.kernel.resolved_cap)
    objective = spec.make_objective(spec.run_seed(0))
    values = np.array([objective(x) for x in nets])
    return distance_trend(dist, values)


def trend_from_logs(log_dir) -> Trend:
    """Trend over pairs of nets evaluated within the same run.

    Each run has its own objective, so pairs never cross runs.  The space
    bound and kernel weights come from the directory's manifest.
    """
    logs = load_logs(log_dir)
    manifest = Path(log_dir) / MANIFEST
    if not manifest.exists():
        raise AnalysisError(f"{manifest} not found")
    cfg = json.loads(manifest.read_text())["config"]
    weights = EdgeWeights(cfg["kernel"]["w_T"], cfg["kernel"]["w_D"])
    space = SpaceConfig(tuple(cfg["modalities"]), cfg["max_fc"])
    cache = DistanceCache(space, weights, cfg["kernel"]["cap"])
    ds, diffs = [], []
    for i in sorted(set(logs["bo"]) | set(logs["random"])):
        seen: dict[Net, float] = {}
        for method in ("bo", "random"):
            if i in logs[method]:
                for t in logs[method][i].trials:
                    seen.setdefault(t.net, t.y)
        nets = sorted(seen, key=lambda x: x.canonical)
        dist = cache.matrix(nets, nets)
        d, diff = _upper_pairs(np.minimum(dist, dist.T), np.array([seen[x] for x in nets]))
        ds.append(d)
        diffs.append(diff)
    if not ds:
        raise AnalysisError("no trial logs found")
    return trend_from_pairs(np.concatenate(ds), np.concatenate(diffs))


def cmd_distance_trend(source, *, logs: bool = False) -> Trend:
    if logs:
        return trend_from_logs(source)
    return trend_from_space(source if isinstance(source, ExperimentSpec) else load_spec(source))
