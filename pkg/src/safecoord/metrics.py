"""Evaluation metrics over deterministic checkpoints.

Costs are compared to the budget with two conventions: a checkpoint is feasible
when its mean cost is ``<= d``, while an individual episode counts as a
violation only when its cost is strictly ``> d``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_COLUMNS = ["step", "mean_return", "mean_cost", "violations", "n_eval"]


def fmt(x) -> str:
    """Nine significant digits; integers and booleans unchanged; NaN as ``nan``."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.9g}"


def episodic_aggregate(rewards, costs) -> tuple[float, float]:
    """Episode return and cost from (T, n) per-step arrays: sum over time of the agent mean."""
    r = np.asarray(rewards, dtype=np.float64)
    c = np.asarray(costs, dtype=np.float64)
    if r.dtype == object or c.dtype == object:
        raise ValueError("ragged episode input")
    if r.ndim != 2 or r.shape != c.shape:
        raise ValueError(f"rewards {r.shape} and costs {c.shape} must both be (T, n)")
    if r.shape[1] == 0:
        raise ValueError("episode has no agents")
    return float(r.mean(1).sum()), float(c.mean(1).sum())


def _as_array(values, name: str) -> np.ndarray:
    try:
        return np.asarray(values, dtype=np.float64)
    except ValueError as err:
        raise ValueError(f"ragged {name}") from err


@dataclass
class EvalCheckpoint:
    step: int
    mean_return: float
    mean_cost: float
    episodes: list[tuple[float, float]] = field(default_factory=list)
    violations: int = 0

    def __post_init__(self) -> None:
        if self.episodes:
            r = float(np.mean([e[0] for e in self.episodes]))
            c = float(np.mean([e[1] for e in self.episodes]))
            if not (math.isclose(r, self.mean_return, rel_tol=1e-9, abs_tol=1e-9) and math.isclose(c, self.mean_cost, rel_tol=1e-9, abs_tol=1e-9)):
                raise ValueError("checkpoint means disagree with the episode list")
        if self.mean_cost < 0:
            raise ValueError("mean cost must be nonnegative")

    @property
    def n_eval(self) -> int:
        return len(self.episodes)

    @classmethod
    def from_episodes(cls, step: int, episodes: Sequence[tuple[float, float]], budget: float) -> "EvalCheckpoint":
        if not episodes:
            raise ValueError("a checkpoint needs at least one episode")
        eps = [(float(r), float(c)) for r, c in episodes]
        return cls(
            step=int(step),
            mean_return=float(np.mean([r for r, _ in eps])),
            mean_cost=float(np.mean([c for _, c in eps])),
            episodes=eps,
            violations=int(sum(c > budget for _, c in eps)),
        )

    def row(self) -> dict[str, str]:
        return {
            "step": fmt(self.step),
            "mean_return": fmt(self.mean_return),
            "mean_cost": fmt(self.mean_cost),
            "violations": fmt(self.violations),
            "n_eval": fmt(self.n_eval),
        }


def _require(checkpoints) -> list[EvalCheckpoint]:
    cks = list(checkpoints)
    if not cks:
        raise ValueError("need at least one checkpoint")
    return cks


def feasible_return(checkpoints: Iterable[EvalCheckpoint], budget: float) -> float | None:
    cks = _require(checkpoints)
    feasible = [c.mean_return for c in cks if c.mean_cost <= budget]
    return max(feasible) if feasible else None


def peak_cost(checkpoints: Iterable[EvalCheckpoint]) -> float:
    return max(c.mean_cost for c in _require(checkpoints))


def violation_rate(episode_costs, budget: float) -> float:
    c = _as_array(episode_costs, "episode costs")
    if c.size == 0:
        raise ValueError("need at least one episode cost")
    return float(np.count_nonzero(c > budget) / c.size)


def time_to_feasible(checkpoints: Iterable[EvalCheckpoint], budget: float) -> int | None:
    steps = [c.step for c in _require(checkpoints) if c.mean_cost <= budget]
    return min(steps) if steps else None


def feasible_indicator(j_r: float, j_c: float, budget: float) -> float:
    return float(j_r) if j_c <= budget else 0.0


@dataclass
class MetricsReport:
    budget: float
    r_final: float
    c_final: float
    c_peak: float
    violation_rate: float
    r_feas: float | None
    time_to_feasible: int | None
    j_feasible: float
    n_checkpoints: int

    @classmethod
    def from_checkpoints(cls, checkpoints: Sequence[EvalCheckpoint], budget: float) -> "MetricsReport":
        cks = _require(checkpoints)
        final = cks[-1]
        return cls(
            budget=float(budget),
            r_final=final.mean_return,
            c_final=final.mean_cost,
            c_peak=peak_cost(cks),
            violation_rate=violation_rate([c for _, c in final.episodes], budget),
            r_feas=feasible_return(cks, budget),
            time_to_feasible=time_to_feasible(cks, budget),
            j_feasible=feasible_indicator(final.mean_return, final.mean_cost, budget),
            n_checkpoints=len(cks),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read_json(cls, path: str | Path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


REPORT_FIELDS = ["r_final", "c_final", "c_peak", "violation_rate", "r_feas", "time_to_feasible", "j_feasible"]


def summarize(reports: Sequence[MetricsReport]) -> dict[str, dict]:
    """Per-field mean and std across seeds; absent values are skipped and counted."""
    out = {}
    for name in REPORT_FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = {
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "present": len(vals),
            "total": len(reports),
        }
    return out


def write_checkpoints_csv(path: str | Path, checkpoints: Iterable[EvalCheckpoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CHECKPOINT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for ck in checkpoints:
            w.writerow(ck.row())


def read_checkpoints_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
