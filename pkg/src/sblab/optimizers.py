"""GD and SAM training loops for the rank-one attention model."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .attention import (
    GradientSet,
    ModelParams,
    hessian_blocks,
    population_gradients,
)
from .spectra import CovarianceSpec, TaskBatch, as_batch, expected_sample_cov_sq_eigs, sample_tasks

logger = logging.getLogger(__name__)

KINDS = ("gd", "sam_exact", "sam_first_order")
GRAD_MODES = ("population", "empirical")
GRAD_NORM_FLOOR = 1e-12
DIVERGENCE_LOSS = 1e6


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "gd"
    learning_rate: float = 5e-3
    rho: float = 0.0
    grad_mode: str = "population"
    batch_size: int | None = None  # None: full batch
    steps: int = 1000
    snapshot_every: int = 0  # 0: no snapshots
    log_every: int = 1
    eval_size: int = 10_000
    eval_seed: int = 12345

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.kind == "gd" and self.rho != 0:
            raise ValueError("rho must be 0 for plain gd")
        if self.kind == "sam_first_order" and self.grad_mode != "population":
            raise ValueError("first-order SAM needs the population Hessian (grad_mode='population')")
        if self.steps < 0 or self.log_every < 1 or self.snapshot_every < 0:
            raise ValueError("steps >= 0, log_every >= 1, snapshot_every >= 0 required")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# -- single steps ------------------------------------------------------------


def _vec(x) -> np.ndarray:
    return x.flat() if isinstance(x, ModelParams) else np.asarray(x, dtype=float)


def _like(template, x: np.ndarray):
    if isinstance(template, GradientSet):
        blocks = x.reshape(template.n_heads, -1)
        d = template.d
        return GradientSet(blocks[:, 0], blocks[:, 1 : d + 1], blocks[:, d + 1 :])
    if isinstance(template, ModelParams):
        return ModelParams.from_flat(x, template.d)
    return x


def gd_step(params, grads, eta: float):
    """``w <- w - eta * grad``."""
    return _like(params, _vec(params) - eta * _vec(grads))


def sam_perturbation(grad: np.ndarray, rho: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if rho == 0 or norm < GRAD_NORM_FLOOR:
        return np.zeros_like(grad)
    return rho * grad / norm


def sam_step_exact(params, loss_grad_fn: Callable, eta: float, rho: float):
    """Two-pass SAM: ascend by ``rho`` along the normalised gradient, then descend
    from the original point with the gradient found there.

    ``loss_grad_fn`` maps parameters (same type as ``params``) to a gradient.
    """
    g = _vec(loss_grad_fn(params))
    eps = sam_perturbation(g, rho)
    if not eps.any():
        return _like(params, _vec(params) - eta * g)
    g_adv = _vec(loss_grad_fn(_like(params, _vec(params) + eps)))
    return _like(params, _vec(params) - eta * g_adv)


def active_head(grads: GradientSet) -> int:
    """1-based index of the head with the largest gradient norm (ties: lowest index)."""
    return int(np.argmax(grads.head_norms())) + 1


def sam_gradient_first_order(
    params: ModelParams,
    grads: GradientSet,
    spec: CovarianceSpec,
    n_ctx: int,
    rho: float,
    head: int | None = None,
) -> GradientSet:
    """``(I + P) grad`` with ``P = rho H_a / ||grad_a||`` acting on the active head ``a`` only."""
    if head is None:
        head = active_head(grads)
    d = params.d
    flat = grads.flat().copy()
    sl = slice((head - 1) * (2 * d + 1), head * (2 * d + 1))
    g_a = flat[sl]
    norm = float(np.linalg.norm(g_a))
    if rho == 0 or norm < GRAD_NORM_FLOOR:
        return grads
    H = hessian_blocks(params, spec, n_ctx, head)
    flat[sl] = g_a + (rho / norm) * (H @ g_a)
    return _like(grads, flat)


def sam_step_first_order(
    params: ModelParams,
    spec: CovarianceSpec,
    n_ctx: int,
    eta: float,
    rho: float,
    active: int | None = None,
) -> ModelParams:
    g = population_gradients(params, spec, n_ctx)
    return gd_step(params, sam_gradient_first_order(params, g, spec, n_ctx, rho, active), eta)


def init_params(mode: str, scale: float, d: int, n_heads: int, rng: np.random.Generator | None = None) -> ModelParams:
    """``gaussian``: every coordinate N(0, scale^2). ``ansatz``: k_i = q_i = scale e_i, v_i = scale."""
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if mode == "gaussian":
        if rng is None:
            raise ValueError("gaussian init needs a generator")
        x = scale * rng.standard_normal(n_heads * (2 * d + 1))
        return ModelParams.from_flat(x, d)
    if mode == "ansatz":
        v = np.zeros(n_heads)
        k = np.zeros((n_heads, d))
        m = min(n_heads, d)
        v[:m] = scale
        k[np.arange(m), np.arange(m)] = scale
        return ModelParams(v, k, k.copy())
    raise ValueError(f"unknown init mode {mode!r}")


# -- training traces ---------------------------------------------------------


@dataclass
class TrainingTrace:
    steps: np.ndarray
    losses: np.ndarray
    test_losses: np.ndarray
    feature_progress: np.ndarray  # (n_log, d)
    eta: float
    snapshots: list = field(default_factory=list)  # (step, ModelParams)
    checkpoint_steps: np.ndarray | None = None
    per_example_losses: np.ndarray | None = None  # (n_checkpoints, P)
    final_params: ModelParams | None = None
    loss_curve: np.ndarray | None = None  # training objective at every step 0..steps

    @property
    def step_losses(self) -> list[tuple[int, float]]:
        return list(zip(self.steps.tolist(), self.losses.tolist()))

    @property
    def feature_progress_series(self) -> list[tuple[int, np.ndarray]]:
        return list(zip(self.steps.tolist(), self.feature_progress))

    @property
    def times(self) -> np.ndarray:
        return self.steps * self.eta

    @property
    def d(self) -> int:
        return int(self.feature_progress.shape[1])

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"] + [f"m_{i + 1}" for i in range(self.d)] + ["test_loss"])
        for s, l, m, tl in zip(self.steps, self.losses, self.feature_progress, self.test_losses):
            w.writerow([int(s), repr(float(l))] + [repr(float(x)) for x in m] + [repr(float(tl))])
        return buf.getvalue()

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.csv_text())

    def snapshots_json(self) -> str:
        return json.dumps(
            [{"step": int(s), "params": p.to_dict()} for s, p in self.snapshots], indent=2
        )


def read_trace_csv(path, eta: float = 1.0) -> TrainingTrace:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trace file")
    header = rows[0]
    if header[:2] != ["step", "loss"]:
        raise ValueError(f"{path}: expected header starting with step,loss")
    m_cols = [i for i, h in enumerate(header) if h.startswith("m_")]
    if not m_cols:
        raise ValueError(f"{path}: trace has no feature progress columns")
    t_col = header.index("test_loss") if "test_loss" in header else 1
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return TrainingTrace(
        steps=data[:, 0].astype(int),
        losses=data[:, 1],
        test_losses=data[:, t_col],
        feature_progress=data[:, m_cols],
        eta=eta,
    )


# -- the loop ----------------------------------------------------------------


class _Objective:
    """Gradient oracle on raw (v, k, q) arrays, avoiding per-step object churn."""

    def __init__(self, spec, n_ctx, grad_mode, dataset=None, weights=None, batch_size=None, rng=None):
        self.spec = spec
        self.n_ctx = n_ctx
        self.d = spec.d
        self.mode = grad_mode
        self.lam = spec.eigenvalues
        self.a = expected_sample_cov_sq_eigs(spec, n_ctx)
        if grad_mode == "empirical":
            self.Mflat = dataset.M.reshape(len(dataset), -1)
            self.y = dataset.query_labels
            w = np.ones(len(dataset)) if weights is None else np.asarray(weights, dtype=float)
            if w.shape != (len(dataset),) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be non-negative, one per example, positive sum")
            self.w = w / w.sum()
            self.batch_size = batch_size
            self.rng = rng

    def loss(self, v, k, q) -> float:
        A = (v[:, None] * k).T @ q
        if self.mode == "population":
            return float(
                np.einsum("i,ij,j->", self.a, A**2, self.lam) - 2.0 * np.sum(self.lam**2 * np.diag(A)) + self.lam.sum()
            )
        r = self.Mflat @ A.reshape(-1) - self.y
        return float(self.w @ r**2)

    def grad(self, v, k, q, idx=None):
        """Gradients plus the full objective at ``(v, k, q)`` (``None`` on a minibatch)."""
        A = (v[:, None] * k).T @ q
        if self.mode == "population":
            D = -2.0 * (np.diag(self.lam**2) - self.a[:, None] * A * self.lam[None, :])
            loss = float(
                np.einsum("i,ij,j->", self.a, A**2, self.lam) - 2.0 * np.sum(self.lam**2 * np.diag(A)) + self.lam.sum()
            )
        else:
            if idx is None:
                Mf, y, w = self.Mflat, self.y, self.w
            else:
                Mf, y, w = self.Mflat[idx], self.y[idx], self.w[idx]
                w = w / w.sum()
            r = Mf @ A.reshape(-1) - y
            D = ((2.0 * w * r) @ Mf).reshape(self.d, self.d)
            loss = float(w @ r**2) if idx is None else None
        Dq = q @ D.T
        DTk = k @ D
        return np.einsum("hi,hi->h", k, Dq), v[:, None] * Dq, v[:, None] * DTk, loss

    def minibatch(self):
        if self.mode != "empirical" or self.batch_size is None or self.batch_size >= self.y.size:
            return None
        return self.rng.choice(self.y.size, size=self.batch_size, replace=False, p=None)


def evaluation_set(spec: CovarianceSpec, n_ctx: int, size: int, seed: int, sampler=None) -> TaskBatch:
    rng = np.random.default_rng(seed)
    if sampler is None:
        return sample_tasks(spec, n_ctx, size, rng)
    return sampler(spec, n_ctx, size, rng)


def train(
    init: ModelParams,
    spec: CovarianceSpec,
    n_ctx: int,
    cfg: OptimizerConfig,
    dataset=None,
    weights=None,
    rng: np.random.Generator | None = None,
    eval_set: TaskBatch | None = None,
    checkpoint_steps=None,
) -> TrainingTrace:
    """Run ``cfg.steps`` optimiser steps from ``init``.

    Population mode descends the exact population loss; empirical mode the
    (importance-weighted) mean loss over ``dataset``.  ``loss`` in the trace is
    the training objective, ``test_losses`` the mean squared error on a fixed
    evaluation set.  ``checkpoint_steps`` records every dataset example's loss
    at those steps (empirical mode only).
    """
    if init.d != spec.d:
        raise ValueError("init dimension does not match spectrum")
    if cfg.grad_mode == "empirical":
        if dataset is None:
            raise ValueError("empirical mode needs a dataset")
        dataset = as_batch(dataset)
    elif dataset is not None:
        raise ValueError("population mode does not take a dataset")
    if rng is None:
        rng = np.random.default_rng(0)
    if eval_set is None:
        eval_set = evaluation_set(spec, n_ctx, cfg.eval_size, cfg.eval_seed)
    eval_M = eval_set.M.reshape(len(eval_set), -1)
    eval_y = eval_set.query_labels

    obj = _Objective(spec, n_ctx, cfg.grad_mode, dataset, weights, cfg.batch_size, rng)
    v, k, q = init.v.copy(), init.k.copy(), init.q.copy()
    ckpts = sorted(set(int(s) for s in checkpoint_steps)) if checkpoint_steps is not None else []
    if ckpts and cfg.grad_mode != "empirical":
        raise ValueError("per-example checkpoints need a dataset")
    ckpt_set = set(ckpts)
    per_example = []

    steps_log, losses, tests, prog, snaps = [], [], [], [], []

    def record(t):
        A = (v[:, None] * k).T @ q
        loss = obj.loss(v, k, q)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise TrainingDiverged(f"loss {loss:.3g} at step {t} (kind={cfg.kind}, eta={cfg.learning_rate})")
        steps_log.append(t)
        losses.append(loss)
        tests.append(float(np.mean((eval_M @ A.reshape(-1) - eval_y) ** 2)))
        prog.append(np.einsum("h,hi,hi->i", v, k, q))

    def per_example_record():
        A = (v[:, None] * k).T @ q
        per_example.append((obj.Mflat @ A.reshape(-1) - obj.y) ** 2)

    eta, rho = cfg.learning_rate, cfg.rho
    d = spec.d
    record(0)
    if 0 in ckpt_set:
        per_example_record()
    if cfg.snapshot_every:
        snaps.append((0, ModelParams(v, k, q)))

    curve = np.empty(cfg.steps + 1)
    for t in range(1, cfg.steps + 1):
        idx = obj.minibatch()
        gv, gk, gq, cur = obj.grad(v, k, q, idx)
        curve[t - 1] = cur if cur is not None else obj.loss(v, k, q)
        if cfg.kind == "sam_exact" and rho > 0:
            norm = np.sqrt(gv @ gv + np.sum(gk * gk) + np.sum(gq * gq))
            if norm >= GRAD_NORM_FLOOR:
                s = rho / norm
                gv, gk, gq, _ = obj.grad(v + s * gv, k + s * gk, q + s * gq, idx)
        elif cfg.kind == "sam_first_order" and rho > 0:
            p = ModelParams(v, k, q)
            g = sam_gradient_first_order(p, GradientSet(gv, gk, gq), spec, n_ctx, rho)
            gv, gk, gq = g.v, g.k, g.q
        v = v - eta * gv
        k = k - eta * gk
        q = q - eta * gq
        if t % cfg.log_every == 0 or t == cfg.steps:
            record(t)
        if t in ckpt_set:
            per_example_record()
        if cfg.snapshot_every and (t % cfg.snapshot_every == 0 or t == cfg.steps):
            snaps.append((t, ModelParams(v, k, q)))
    curve[cfg.steps] = losses[-1]

    return TrainingTrace(
        steps=np.array(steps_log, dtype=int),
        losses=np.array(losses),
        test_losses=np.array(tests),
        feature_progress=np.array(prog).reshape(-1, d),
        eta=eta,
        snapshots=snaps,
        checkpoint_steps=np.array(ckpts, dtype=int) if ckpts else None,
        per_example_losses=np.array(per_example) if per_example else None,
        final_params=ModelParams(v, k, q),
        loss_curve=curve,
    )
