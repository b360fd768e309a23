"""Loss-trajectory clustering and upsampling of hard examples.

A small proxy model is trained briefly; every example's loss at a few
checkpoints forms its trajectory.  Two-means clustering splits the examples
into an easy and a hard group (hard = higher mean final loss), and the hard
group is duplicated or up-weighted for the main run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .optimizers import OptimizerConfig, init_params, train
from .spectra import CovarianceSpec, TaskBatch, as_batch

FEATURE_MODES = ("trajectory", "final")
TRANSFORMS = ("none", "log_relative")
PLAN_MODES = ("duplicate", "weight")


class TrajectoryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LossTrajectory:
    example_id: str
    losses: np.ndarray

    def __post_init__(self):
        x = np.array(self.losses, dtype=float).reshape(-1)
        if x.size == 0:
            raise ValueError(f"trajectory {self.example_id!r} is empty")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"trajectory {self.example_id!r} has non-finite losses")
        x.setflags(write=False)
        object.__setattr__(self, "losses", x)

    def __eq__(self, other):
        if not isinstance(other, LossTrajectory):
            return NotImplemented
        return self.example_id == other.example_id and np.array_equal(self.losses, other.losses)


def default_ids(n: int) -> list[str]:
    return [f"ex{i:06d}" for i in range(n)]


def _validate_set(trajs: Sequence[LossTrajectory]):
    if len(trajs) == 0:
        raise ValueError("no trajectories")
    lengths = {t.losses.size for t in trajs}
    if len(lengths) != 1:
        raise ValueError(f"trajectories have inconsistent lengths {sorted(lengths)}")
    ids = [t.example_id for t in trajs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate trajectory ids")


@dataclass(frozen=True)
class ProxyConfig:
    optimizer: OptimizerConfig
    n_heads: int = 2
    init_mode: str = "gaussian"
    init_scale: float = 1e-3


def checkpoint_schedule(steps: int, n_checkpoints: int, include_initial: bool = False) -> np.ndarray:
    """Steps ``j * steps / n`` for ``j = 1..n`` (plus step 0 when ``include_initial``)."""
    if n_checkpoints < 1:
        raise ValueError("need at least one checkpoint")
    if steps < n_checkpoints:
        raise ValueError("proxy steps must be >= n_checkpoints")
    ck = np.round(np.linspace(steps / n_checkpoints, steps, n_checkpoints)).astype(int)
    return np.concatenate([[0], ck]) if include_initial else ck


def collect_proxy_trajectories(
    dataset,
    spec: CovarianceSpec,
    n_ctx: int,
    proxy: ProxyConfig,
    n_checkpoints: int,
    rng: np.random.Generator,
    ids: Sequence[str] | None = None,
    weights=None,
    include_initial: bool = False,
) -> list[LossTrajectory]:
    """Train the proxy and return each example's loss at evenly spaced checkpoints.

    ``include_initial`` prepends the loss at step 0, which the ``log_relative``
    clustering transform uses as each example's own scale.
    """
    batch = as_batch(dataset)
    if len(batch) == 0:
        raise ValueError("empty dataset")
    if ids is None:
        ids = default_ids(len(batch))
    if len(ids) != len(batch):
        raise ValueError("one id per example required")
    cfg = proxy.optimizer
    if cfg.grad_mode != "empirical":
        raise ValueError("proxy must train on the dataset (grad_mode='empirical')")
    ckpts = checkpoint_schedule(cfg.steps, n_checkpoints, include_initial)
    init = init_params(proxy.init_mode, proxy.init_scale, spec.d, proxy.n_heads, rng)
    trace = train(init, spec, n_ctx, cfg, dataset=batch, weights=weights, rng=rng, checkpoint_steps=ckpts, eval_set=batch.take([0]))
    L = trace.per_example_losses  # (n_checkpoints, P)
    return [LossTrajectory(ids[p], L[:, p]) for p in range(len(batch))]


@dataclass(frozen=True)
class ClusterAssignment:
    ids: tuple
    labels: np.ndarray  # "hard" / "easy"
    centroids: np.ndarray  # (2, n_features) in standardised feature space; row 0 easy, row 1 hard
    feature_mode: str
    objective_history: tuple = ()
    n_iter: int = 0

    @property
    def mapping(self) -> dict:
        return dict(zip(self.ids, self.labels.tolist()))

    @property
    def hard_mask(self) -> np.ndarray:
        return self.labels == "hard"


def cluster_features(trajs: Sequence[LossTrajectory], feature_mode: str, transform: str = "none") -> np.ndarray:
    """Feature matrix, z-scored per checkpoint.

    ``log_relative`` first replaces each trajectory by ``log(L_j / L_0)``, the
    log of the loss relative to the example's own first checkpoint.  Single-query
    squared losses are chi-square distributed, and without this the clustering
    splits examples by label magnitude instead of by learning progress.
    """
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
    if transform not in TRANSFORMS:
        raise ValueError(f"transform must be one of {TRANSFORMS}")
    X = np.stack([t.losses for t in trajs])
    if transform == "log_relative":
        if X.shape[1] < 2:
            raise ValueError("log_relative needs at least two checkpoints")
        if np.any(X < 0):
            raise ValueError("log_relative needs non-negative losses")
        pos = X[X > 0]
        floor = 1e-9 * (float(np.median(pos)) if pos.size else 1.0)
        X = np.log((X[:, 1:] + floor) / (X[:, :1] + floor))
    if feature_mode == "final":
        X = X[:, -1:]
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans2(
    trajectories: Sequence[LossTrajectory],
    feature_mode: str = "trajectory",
    max_iters: int = 100,
    seed: int = 0,
    transform: str = "none",
) -> ClusterAssignment:
    """Two-means (k-means++ seeding, Lloyd iterations) over loss trajectories."""
    trajs = list(trajectories)
    _validate_set(trajs)
    if len(trajs) < 2:
        raise ValueError("need at least two trajectories")
    X = cluster_features(trajs, feature_mode, transform)
    if np.all(X == X[0]):
        raise ValueError("degenerate clustering input: all feature vectors identical")
    rng = np.random.default_rng(seed)
    n = X.shape[0]

    first = int(rng.integers(n))
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    second = int(rng.choice(n, p=d2 / d2.sum()))
    C = X[[first, second]].copy()

    history = []
    labels = np.argmin(_sq_dists(X, C), axis=1)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        for j in range(2):
            members = X[labels == j]
            if len(members) == 0:
                far = int(np.argmax(np.min(_sq_dists(X, C), axis=1)))
                C[j] = X[far]
            else:
                C[j] = members.mean(axis=0)
        dist = _sq_dists(X, C)
        new = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(n), new].sum()))
        if np.array_equal(new, labels) and n_iter > 1:
            break
        labels = new

    final = np.array([t.losses[-1] for t in trajs])
    means = [final[labels == j].mean() if np.any(labels == j) else -np.inf for j in range(2)]
    hard = int(np.argmax(means))
    names = np.where(labels == hard, "hard", "easy")
    order = [1 - hard, hard]
    return ClusterAssignment(
        ids=tuple(t.example_id for t in trajs),
        labels=names,
        centroids=C[order],
        feature_mode=feature_mode,
        objective_history=tuple(history),
        n_iter=n_iter,
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class UpsamplePlan:
    ids: tuple
    clusters: tuple  # "hard" / "easy"
    factor: float
    mode: str = "duplicate"

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.mode not in PLAN_MODES:
            raise ValueError(f"mode must be one of {PLAN_MODES}")
        if len(self.ids) != len(self.clusters):
            raise ValueError("one cluster label per id required")

    @property
    def multiplicities(self) -> np.ndarray:
        m = _round_half_up(self.factor)
        return np.array([m if c == "hard" else 1 for c in self.clusters], dtype=int)

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.factor if c == "hard" else 1.0 for c in self.clusters])

    @property
    def counts(self) -> dict:
        n_hard = sum(c == "hard" for c in self.clusters)
        return {"hard": n_hard, "easy": len(self.clusters) - n_hard}

    @property
    def effective_size(self) -> float:
        if self.mode == "duplicate":
            return float(self.multiplicities.sum())
        return float(self.weights.sum())

    def with_factor(self, factor: float, mode: str | None = None) -> "UpsamplePlan":
        return UpsamplePlan(self.ids, self.clusters, factor, mode or self.mode)

    def to_dict(self) -> dict:
        mult = self.multiplicities
        rows = []
        for i, (eid, c) in enumerate(zip(self.ids, self.clusters)):
            row = {"id": eid, "cluster": c, "multiplicity": int(mult[i])}
            if self.mode == "weight":
                row["weight"] = float(self.weights[i])
            rows.append(row)
        return {"factor": float(self.factor), "mode": self.mode, "assignments": rows}

    @classmethod
    def from_dict(cls, obj: dict) -> "UpsamplePlan":
        rows = obj["assignments"]
        for r in rows:
            if r["cluster"] not in ("hard", "easy"):
                raise ValueError(f"bad cluster label {r['cluster']!r} for id {r['id']!r}")
        return cls(
            tuple(r["id"] for r in rows),
            tuple(r["cluster"] for r in rows),
            float(obj["factor"]),
            obj.get("mode", "duplicate"),
        )


def build_plan(assignment: ClusterAssignment, factor: float = 2.0, mode: str = "duplicate") -> UpsamplePlan:
    """Hard examples get ``round(factor)`` copies (or weight ``factor``); easy ones stay at 1."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return UpsamplePlan(tuple(assignment.ids), tuple(assignment.labels.tolist()), float(factor), mode)


def apply_plan(dataset, plan: UpsamplePlan, mode: str | None = None, ids: Sequence[str] | None = None):
    """``duplicate``: expanded batch.  ``weight``: ``(batch, weights)``."""
    batch = as_batch(dataset)
    mode = mode or plan.mode
    if mode not in PLAN_MODES:
        raise ValueError(f"mode must be one of {PLAN_MODES}")
    if ids is None:
        ids = default_ids(len(batch))
    ids = list(ids)
    if len(ids) != len(batch):
        raise ValueError("one id per example required")
    pos = {eid: i for i, eid in enumerate(plan.ids)}
    missing = [eid for eid in ids if eid not in pos]
    if missing or len(ids) != len(plan.ids):
        raise ValueError(f"plan and dataset ids differ (e.g. {missing[:3]})")
    order = np.array([pos[eid] for eid in ids])
    if mode == "weight":
        return batch, plan.weights[order]
    reps = plan.multiplicities[order]
    return batch.take(np.repeat(np.arange(len(batch)), reps))


# -- file formats ------------------------------------------------------------


def export_trajectories(trajs: Sequence[LossTrajectory], path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps({"id": t.example_id, "losses": [float(x) for x in t.losses]}) + "\n")


def ingest_trajectories(path) -> list[LossTrajectory]:
    out = []
    seen = {}
    length = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                eid = obj["id"]
                losses = obj["losses"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise TrajectoryFormatError(f"line {lineno}: malformed trajectory record ({exc})") from None
            if not isinstance(eid, str):
                raise TrajectoryFormatError(f"line {lineno}: id must be a string")
            if not isinstance(losses, list) or not losses:
                raise TrajectoryFormatError(f"line {lineno}: losses must be a non-empty list")
            try:
                arr = np.array(losses, dtype=float)
            except (TypeError, ValueError):
                raise TrajectoryFormatError(f"line {lineno}: losses must be numbers") from None
            if not np.all(np.isfinite(arr)):
                raise TrajectoryFormatError(f"line {lineno}: non-finite loss in trajectory {eid!r}")
            if eid in seen:
                raise TrajectoryFormatError(f"line {lineno}: duplicate id {eid!r} (first on line {seen[eid]})")
            if length is not None and arr.size != length:
                raise TrajectoryFormatError(f"line {lineno}: trajectory length {arr.size}, expected {length}")
            length = arr.size
            seen[eid] = lineno
            out.append(LossTrajectory(eid, arr))
    if not out:
        raise TrajectoryFormatError("no trajectories")
    return out


def export_plan(plan: UpsamplePlan, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict(), fh, indent=2)
        fh.write("\n")


def load_plan(path) -> UpsamplePlan:
    with open(path, encoding="utf-8") as fh:
        return UpsamplePlan.from_dict(json.load(fh))
