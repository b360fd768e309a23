"""Rank-one multi-head linear self-attention and its merged key-query cousin.

With rank-one keys and queries the attention prediction collapses to

    y_hat = sum_h v_h k_h^T M q_h,     M = (1/N) sum_j y_j x_j x_q^T,

so the whole model is the aggregate matrix ``A = sum_h v_h k_h q_h^T`` read
out against ``M``.  All gradients here are closed forms; tests compare them to
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .spectra import (
    CovarianceSpec,
    TaskSample,
    as_batch,
    expected_sample_cov_sq_eigs,
    feature_map_z,
    fixed_point_m_target,
)


@dataclass(frozen=True)
class HeadParams:
    v: float
    k: np.ndarray
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Per-head value scalars ``v`` (H,), keys ``k`` (H, d) and queries ``q`` (H, d)."""

    v: np.ndarray
    k: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        v = np.array(self.v, dtype=float).reshape(-1)
        k = np.array(self.k, dtype=float)
        q = np.array(self.q, dtype=float)
        if k.ndim == 1:
            k = k[None, :]
        if q.ndim == 1:
            q = q[None, :]
        if v.size < 1:
            raise ValueError("need at least one head")
        if k.shape != (v.size, k.shape[1]) or q.shape != k.shape:
            raise ValueError(f"inconsistent head shapes: v{v.shape} k{k.shape} q{q.shape}")
        for arr in (v, k, q):
            arr.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "q", q)

    @property
    def n_heads(self) -> int:
        return int(self.v.size)

    @property
    def d(self) -> int:
        return int(self.k.shape[1])

    @property
    def heads(self) -> list[HeadParams]:
        return [HeadParams(float(self.v[h]), self.k[h], self.q[h]) for h in range(self.n_heads)]

    @classmethod
    def from_heads(cls, heads) -> "ModelParams":
        heads = list(heads)
        return cls(
            np.array([h.v for h in heads], dtype=float),
            np.stack([np.asarray(h.k, dtype=float) for h in heads]),
            np.stack([np.asarray(h.q, dtype=float) for h in heads]),
        )

    @classmethod
    def zeros(cls, d: int, n_heads: int) -> "ModelParams":
        return cls(np.zeros(n_heads), np.zeros((n_heads, d)), np.zeros((n_heads, d)))

    def flat(self) -> np.ndarray:
        """Per-head blocks ``(v_h, k_h, q_h)`` concatenated head by head."""
        return np.concatenate([self.v[:, None], self.k, self.q], axis=1).reshape(-1)

    @classmethod
    def from_flat(cls, x: np.ndarray, d: int) -> "ModelParams":
        blocks = np.asarray(x, dtype=float).reshape(-1, 2 * d + 1)
        return cls(blocks[:, 0], blocks[:, 1 : d + 1], blocks[:, d + 1 :])

    def aggregate(self) -> np.ndarray:
        """``A = sum_h v_h k_h q_h^T``."""
        return np.einsum("h,hi,hj->ij", self.v, self.k, self.q)

    def to_dict(self) -> dict:
        return {
            "heads": [
                {"v": float(self.v[h]), "k": self.k[h].tolist(), "q": self.q[h].tolist()}
                for h in range(self.n_heads)
            ]
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelParams":
        return cls.from_heads(HeadParams(h["v"], h["k"], h["q"]) for h in obj["heads"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            np.array_equal(self.v, other.v)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.q, other.q)
        )


# Gradients share the exact layout of the parameters.
@dataclass(frozen=True, eq=False)
class GradientSet(ModelParams):
    @property
    def dv(self) -> np.ndarray:
        return self.v

    @property
    def dk(self) -> np.ndarray:
        return self.k

    @property
    def dq(self) -> np.ndarray:
        return self.q

    def head_norms(self) -> np.ndarray:
        return np.sqrt(self.v**2 + np.sum(self.k**2, axis=1) + np.sum(self.q**2, axis=1))

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass(frozen=True)
class MergedParams:
    """Two-layer linear network ``y_hat = w2^T W1 z`` with ``W1`` of shape (H, d^2)."""

    w2: np.ndarray
    W1: np.ndarray

    def __post_init__(self):
        w2 = np.array(self.w2, dtype=float).reshape(-1)
        W1 = np.atleast_2d(np.array(self.W1, dtype=float))
        if W1.shape[0] != w2.size:
            raise ValueError(f"W1 has {W1.shape[0]} rows but w2 has {w2.size} entries")
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "W1", W1)


def _check_dims(params: ModelParams, d: int):
    if params.d != d:
        raise ValueError(f"parameter dimension {params.d} does not match data dimension {d}")


def cnn_filter_matrix(k: np.ndarray) -> np.ndarray:
    """Block matrix K (d x d^2) with ``k^T`` repeated along the diagonal."""
    k = np.asarray(k, dtype=float)
    return np.kron(np.eye(k.size), k[None, :])


def predict_batch(params: ModelParams, tasks) -> np.ndarray:
    batch = as_batch(tasks)
    _check_dims(params, batch.d)
    return np.einsum("pij,ij->p", batch.M, params.aggregate())


def predict(params: ModelParams, task: TaskSample) -> float:
    return float(predict_batch(params, task)[0])


def predict_merged(params: MergedParams, task: TaskSample) -> float:
    z = feature_map_z(task)
    if params.W1.shape[1] != z.size:
        raise ValueError(f"W1 has {params.W1.shape[1]} columns, feature map has {z.size}")
    return float(params.w2 @ (params.W1 @ z))


def _normalised_weights(batch_len: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(batch_len, 1.0 / batch_len)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != batch_len:
        raise ValueError("one weight per example required")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return w / w.sum()


def per_example_losses(params: ModelParams, tasks) -> np.ndarray:
    batch = as_batch(tasks)
    return (batch.query_labels - predict_batch(params, batch)) ** 2


def empirical_loss(params: ModelParams, batch, weights=None) -> float:
    """(Weighted) mean squared error of the query prediction over ``batch``."""
    b = as_batch(batch)
    return float(_normalised_weights(len(b), weights) @ per_example_losses(params, b))


def empirical_gradients(params: ModelParams, batch, weights=None) -> GradientSet:
    b = as_batch(batch)
    _check_dims(params, b.d)
    c = 2.0 * _normalised_weights(len(b), weights) * (predict_batch(params, b) - b.query_labels)
    Mbar = np.einsum("p,pij->ij", c, b.M)
    return _grads_from_matrix(params, Mbar)


def loss_and_gradients(params: ModelParams, batch, weights=None) -> tuple[float, GradientSet]:
    b = as_batch(batch)
    _check_dims(params, b.d)
    w = _normalised_weights(len(b), weights)
    resid = predict_batch(params, b) - b.query_labels
    Mbar = np.einsum("p,pij->ij", 2.0 * w * resid, b.M)
    return float(w @ resid**2), _grads_from_matrix(params, Mbar)


def _grads_from_matrix(params: ModelParams, D: np.ndarray) -> GradientSet:
    # L depends on the heads only through A, with dL/dA = D.
    Dq = params.q @ D.T  # row h: D q_h
    DTk = params.k @ D  # row h: D^T k_h
    dv = np.einsum("hi,hi->h", params.k, Dq)
    dk = params.v[:, None] * Dq
    dq = params.v[:, None] * DTk
    return GradientSet(dv, dk, dq)


def population_loss(params: ModelParams, spec: CovarianceSpec, n_ctx: int) -> float:
    """Exact E[(y_q - y_hat)^2] for w ~ N(0, I), x ~ N(0, Sigma).

    L(A) = tr(E[S^2] A Sigma A^T) - 2 tr(Sigma A Sigma) + tr(Sigma)
    """
    _check_dims(params, spec.d)
    lam = spec.eigenvalues
    a = expected_sample_cov_sq_eigs(spec, n_ctx)
    A = params.aggregate()
    return float(np.einsum("i,ij,j->", a, A**2, lam) - 2.0 * np.sum(lam**2 * np.diag(A)) + spec.trace)


def population_gradients(params: ModelParams, spec: CovarianceSpec, n_ctx: int) -> GradientSet:
    """dL/dv_h = -2 k_h^T G q_h, dL/dk_h = -2 v_h G q_h, dL/dq_h = -2 v_h G^T k_h,
    with G = Sigma^2 - E[S^2] A Sigma."""
    _check_dims(params, spec.d)
    return _grads_from_matrix(params, -2.0 * _residual_matrix(params, spec, n_ctx))


def _residual_matrix(params: ModelParams, spec: CovarianceSpec, n_ctx: int) -> np.ndarray:
    lam = spec.eigenvalues
    a = expected_sample_cov_sq_eigs(spec, n_ctx)
    return np.diag(lam**2) - a[:, None] * params.aggregate() * lam[None, :]


def hessian_blocks(params: ModelParams, spec: CovarianceSpec, n_ctx: int, head: int) -> np.ndarray:
    """Population Hessian of one head's weights ``(v, k, q)``; ``head`` is 1-based."""
    if not 1 <= head <= params.n_heads:
        raise IndexError(f"head {head} outside 1..{params.n_heads}")
    _check_dims(params, spec.d)
    h = head - 1
    d = spec.d
    lam = spec.eigenvalues
    Sig = np.diag(lam)
    E2 = np.diag(expected_sample_cov_sq_eigs(spec, n_ctx))
    G = _residual_matrix(params, spec, n_ctx)
    v, k, q = float(params.v[h]), params.k[h], params.q[h]
    kEk = k @ E2 @ k
    qSq = q @ Sig @ q

    H = np.empty((2 * d + 1, 2 * d + 1))
    sv, sk, sq = slice(0, 1), slice(1, d + 1), slice(d + 1, 2 * d + 1)
    H[0, 0] = 2.0 * kEk * qSq
    h_kv = -2.0 * G @ q + 2.0 * v * qSq * (E2 @ k)
    h_qv = -2.0 * G.T @ k + 2.0 * v * kEk * (Sig @ q)
    H[sk, sv] = h_kv[:, None]
    H[sv, sk] = h_kv[None, :]
    H[sq, sv] = h_qv[:, None]
    H[sv, sq] = h_qv[None, :]
    H[sk, sk] = 2.0 * v**2 * qSq * E2
    H[sq, sq] = 2.0 * v**2 * kEk * Sig
    h_kq = -2.0 * v * G + 2.0 * v**2 * np.outer(E2 @ k, Sig @ q)
    H[sk, sq] = h_kq
    H[sq, sk] = h_kq.T
    return H


def feature_progress(params: ModelParams, spec: CovarianceSpec | None = None, n_ctx: int | None = None) -> np.ndarray:
    """Diagonal ``m_i = e_i^T A e_i`` of the aggregate matrix."""
    if spec is not None:
        _check_dims(params, spec.d)
    return np.einsum("h,hi,hi->i", params.v, params.k, params.q)


def ansatz_params(
    spec: CovarianceSpec,
    n_ctx: int,
    n_heads: int,
    learned: int = 0,
    active_value: float = 0.0,
) -> ModelParams:
    """Saddle-to-saddle state: heads ``1..learned`` sit at their fixed point,
    head ``learned+1`` has ``k = q = v e`` with ``v = active_value``, the rest are zero."""
    d = spec.d
    if not 0 <= learned <= min(n_heads, d):
        raise ValueError("learned must lie in 0..min(H, d)")
    v = np.zeros(n_heads)
    v[:learned] = np.cbrt(fixed_point_m_target(spec, n_ctx)[:learned])
    if learned < min(n_heads, d):
        v[learned] = active_value
    k = np.zeros((n_heads, d))
    m = min(n_heads, d)
    k[np.arange(m), np.arange(m)] = v[:m]
    return ModelParams(v, k, k.copy())
