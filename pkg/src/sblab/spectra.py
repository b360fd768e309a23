"""Covariance spectra and in-context linear regression tasks.

Covariates live in the eigenbasis of the data covariance, so a spectrum is
just a strictly decreasing list of positive eigenvalues and the eigenvectors
are the standard basis vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class SpectrumError(ValueError):
    """Raised for an invalid eigenvalue list."""


@dataclass(frozen=True)
class CovarianceSpec:
    eigenvalues: np.ndarray

    def __post_init__(self):
        lam = np.array(self.eigenvalues, dtype=float).reshape(-1)
        if lam.size == 0:
            raise SpectrumError("need at least one eigenvalue")
        for i, x in enumerate(lam):
            if not np.isfinite(x) or x <= 0:
                raise SpectrumError(f"eigenvalue {i} must be positive and finite, got {x}")
        for i in range(1, lam.size):
            if lam[i] == lam[i - 1]:
                raise SpectrumError(f"eigenvalues must be distinct (index {i} repeats {lam[i]})")
            if lam[i] > lam[i - 1]:
                raise SpectrumError(f"eigenvalues must be strictly decreasing (index {i})")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def d(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    @property
    def frobenius(self) -> float:
        return float(np.sqrt(np.sum(self.eigenvalues**2)))

    def matrix(self) -> np.ndarray:
        return np.diag(self.eigenvalues)

    def to_dict(self) -> dict:
        return {"eigenvalues": [float(x) for x in self.eigenvalues]}


def make_spectrum(d: int, eigenvalues: Sequence[float]) -> CovarianceSpec:
    """Validate ``eigenvalues`` against dimension ``d`` and build a spectrum."""
    lam = np.asarray(eigenvalues, dtype=float).reshape(-1)
    if lam.size != d:
        raise SpectrumError(f"expected {d} eigenvalues, got {lam.size}")
    return CovarianceSpec(lam)


def geometric_spectrum(d: int, gamma: float = 0.5, scale: float = 1.0) -> CovarianceSpec:
    if not 0 < gamma < 1:
        raise SpectrumError("geometric ratio must lie in (0, 1)")
    return make_spectrum(d, scale * gamma ** np.arange(d))


def spectrum_from_config(obj) -> CovarianceSpec:
    """Accept ``[l1, l2, ...]`` or ``{"geometric": {"gamma": g, "d": d}}``."""
    if isinstance(obj, CovarianceSpec):
        return obj
    if isinstance(obj, dict):
        if set(obj) == {"eigenvalues"}:
            obj = obj["eigenvalues"]
        elif set(obj) == {"geometric"}:
            g = obj["geometric"]
            unknown = set(g) - {"gamma", "d", "scale"}
            if unknown:
                raise SpectrumError(f"unknown geometric spectrum fields: {sorted(unknown)}")
            return geometric_spectrum(int(g["d"]), float(g.get("gamma", 0.5)), float(g.get("scale", 1.0)))
        else:
            raise SpectrumError(f"unrecognised spectrum spec: {obj!r}")
    lam = list(obj)
    return make_spectrum(len(lam), lam)


def expected_sample_cov_sq_eigs(spec: CovarianceSpec, n_ctx: int) -> np.ndarray:
    """Eigenvalues ``a_i`` of E[S^2] for the sample covariance S of ``n_ctx`` draws.

    a_i = (1 + 1/N) lam_i^2 + (Tr / N) lam_i
    """
    if n_ctx < 1:
        raise ValueError("n_ctx must be >= 1")
    lam = spec.eigenvalues
    return (1.0 + 1.0 / n_ctx) * lam**2 + (spec.trace / n_ctx) * lam


def fixed_point_m_target(spec: CovarianceSpec, n_ctx: int) -> np.ndarray:
    """Diagonal of the aggregate key-query-value matrix once a feature is learned."""
    if n_ctx < 1:
        raise ValueError("n_ctx must be >= 1")
    lam = spec.eigenvalues
    return 1.0 / (lam + (lam + spec.trace) / n_ctx)


def fixed_point_v_target(spec: CovarianceSpec, n_ctx: int, i: int) -> float:
    """Learned value weight for feature ``i`` (1-based), ``(lam + (lam+Tr)/N)^(-1/3)``."""
    if not 1 <= i <= spec.d:
        raise IndexError(f"feature index {i} outside 1..{spec.d}")
    return float(np.cbrt(fixed_point_m_target(spec, n_ctx)[i - 1]))


@dataclass(frozen=True)
class TaskSample:
    context_inputs: np.ndarray  # (N, d)
    context_labels: np.ndarray  # (N,)
    query_input: np.ndarray  # (d,)
    query_label: float
    task_weights: np.ndarray  # (d,)

    @property
    def n_ctx(self) -> int:
        return int(self.context_labels.size)

    @property
    def d(self) -> int:
        return int(self.query_input.size)


@dataclass(frozen=True)
class TaskBatch:
    """A stack of tasks with the per-task matrix M = (1/N) sum_j y_j x_j x_q^T cached."""

    context_inputs: np.ndarray  # (P, N, d)
    context_labels: np.ndarray  # (P, N)
    query_inputs: np.ndarray  # (P, d)
    query_labels: np.ndarray  # (P,)
    task_weights: np.ndarray  # (P, d)
    M: np.ndarray = field(init=False, repr=False)  # (P, d, d)

    def __post_init__(self):
        n = self.context_labels.shape[1]
        yx = np.einsum("pn,pni->pi", self.context_labels, self.context_inputs) / n
        object.__setattr__(self, "M", yx[:, :, None] * self.query_inputs[:, None, :])

    def __len__(self) -> int:
        return int(self.query_labels.size)

    @property
    def d(self) -> int:
        return int(self.query_inputs.shape[1])

    @property
    def n_ctx(self) -> int:
        return int(self.context_labels.shape[1])

    def __getitem__(self, p: int) -> TaskSample:
        return TaskSample(
            self.context_inputs[p],
            self.context_labels[p],
            self.query_inputs[p],
            float(self.query_labels[p]),
            self.task_weights[p],
        )

    def take(self, idx) -> "TaskBatch":
        idx = np.asarray(idx, dtype=int)
        return TaskBatch(
            self.context_inputs[idx],
            self.context_labels[idx],
            self.query_inputs[idx],
            self.query_labels[idx],
            self.task_weights[idx],
        )

    @classmethod
    def stack(cls, tasks: Sequence[TaskSample]) -> "TaskBatch":
        if len(tasks) == 0:
            raise ValueError("empty batch")
        return cls(
            np.stack([t.context_inputs for t in tasks]),
            np.stack([t.context_labels for t in tasks]),
            np.stack([t.query_input for t in tasks]),
            np.array([t.query_label for t in tasks], dtype=float),
            np.stack([t.task_weights for t in tasks]),
        )


def as_batch(tasks) -> TaskBatch:
    if isinstance(tasks, TaskBatch):
        if len(tasks) == 0:
            raise ValueError("empty batch")
        return tasks
    if isinstance(tasks, TaskSample):
        return TaskBatch.stack([tasks])
    return TaskBatch.stack(list(tasks))


def make_task(context_inputs, query_input, task_weights) -> TaskSample:
    """Build a task whose labels are exactly ``w . x``."""
    X = np.atleast_2d(np.asarray(context_inputs, dtype=float))
    xq = np.asarray(query_input, dtype=float).reshape(-1)
    w = np.asarray(task_weights, dtype=float).reshape(-1)
    return TaskSample(X, X @ w, xq, float(w @ xq), w)


def sample_task(spec: CovarianceSpec, n_ctx: int, rng: np.random.Generator, weight_override=None) -> TaskSample:
    if n_ctx < 1:
        raise ValueError("n_ctx must be >= 1")
    d = spec.d
    if weight_override is None:
        w = rng.standard_normal(d)
    else:
        w = np.asarray(weight_override, dtype=float).reshape(-1)
        if w.size != d:
            raise ValueError(f"weight_override has length {w.size}, expected {d}")
    scale = np.sqrt(spec.eigenvalues)
    X = rng.standard_normal((n_ctx, d)) * scale
    xq = rng.standard_normal(d) * scale
    return make_task(X, xq, w)


def sample_tasks(
    spec: CovarianceSpec,
    n_ctx: int,
    n_tasks: int,
    rng: np.random.Generator,
    task_weights: np.ndarray | None = None,
) -> TaskBatch:
    """Vectorised sampler; ``task_weights`` (n_tasks, d) overrides the N(0, I) draw."""
    if n_ctx < 1:
        raise ValueError("n_ctx must be >= 1")
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    d = spec.d
    if task_weights is None:
        W = rng.standard_normal((n_tasks, d))
    else:
        W = np.asarray(task_weights, dtype=float)
        if W.shape != (n_tasks, d):
            raise ValueError(f"task_weights must have shape {(n_tasks, d)}")
    scale = np.sqrt(spec.eigenvalues)
    X = rng.standard_normal((n_tasks, n_ctx, d)) * scale
    XQ = rng.standard_normal((n_tasks, d)) * scale
    Y = np.einsum("pni,pi->pn", X, W)
    return TaskBatch(X, Y, XQ, np.einsum("pi,pi->p", XQ, W), W)


def sample_structured_tasks(
    spec: CovarianceSpec,
    n_ctx: int,
    n_tasks: int,
    rng: np.random.Generator,
    mixture: Sequence[float] | None = None,
    weight_scale: float = 1.0,
    magnitude: str = "gaussian",
) -> tuple[TaskBatch, np.ndarray]:
    """Tasks whose weight vector points along a single eigenvector.

    Example ``p`` draws a direction ``g_p`` from ``mixture`` (uniform by default)
    and uses ``w = weight_scale * s * e_{g_p}``, with ``s ~ N(0, 1)`` for
    ``magnitude="gaussian"`` or a random sign for ``magnitude="sign"``.
    Returns the batch and the 0-based direction index of every example.
    """
    d = spec.d
    probs = np.full(d, 1.0 / d) if mixture is None else np.asarray(mixture, dtype=float)
    if probs.shape != (d,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ValueError("mixture must be a probability vector of length d")
    if magnitude not in ("gaussian", "sign"):
        raise ValueError("magnitude must be 'gaussian' or 'sign'")
    groups = rng.choice(d, size=n_tasks, p=probs)
    W = np.zeros((n_tasks, d))
    if magnitude == "gaussian":
        s = rng.standard_normal(n_tasks)
    else:
        s = rng.choice([-1.0, 1.0], size=n_tasks)
    W[np.arange(n_tasks), groups] = weight_scale * s
    return sample_tasks(spec, n_ctx, n_tasks, rng, task_weights=W), groups


def feature_map_z(task: TaskSample) -> np.ndarray:
    """Column-major flattening of (1/N) sum_i y_i x_i x_q^T, length d^2."""
    X, y, xq = task.context_inputs, task.context_labels, task.query_input
    M = np.outer(y @ X / y.size, xq)
    return M.reshape(-1, order="F")
