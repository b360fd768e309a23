"""Empirical learning times and simplicity-bias entropy for simulated runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .optimizers import TrainingTrace
from .spectra import CovarianceSpec, fixed_point_m_target
from .theory_ode import TimeSequence, entropy

DEFAULT_THETA = 0.9
DEFAULT_WINDOW = 101
DEFAULT_DROP_RATIO = 0.25
DEFAULT_MIN_DROP = 0.01


@dataclass(frozen=True)
class LearningTimes:
    """Continuous learning time per feature; ``nan`` marks a feature never learned."""

    times: np.ndarray
    steps: np.ndarray  # -1 when not learned
    method: str

    @property
    def learned(self) -> np.ndarray:
        return self.steps >= 0

    @property
    def n_learned(self) -> int:
        return int(self.learned.sum())

    def to_dict(self) -> dict:
        return {
            "times": [None if np.isnan(t) else float(t) for t in self.times],
            "steps": [int(s) for s in self.steps],
            "method": self.method,
        }


@dataclass(frozen=True)
class EntropyReport:
    times: np.ndarray  # learned features only, feature order
    features: np.ndarray  # 1-based indices of the learned features
    masses: np.ndarray
    entropy: float
    M: int
    method: str

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "features": [int(i) for i in self.features],
            "masses": [float(p) for p in self.masses],
            "entropy": float(self.entropy),
            "M": int(self.M),
            "method": self.method,
        }


def detect_learning_times(
    trace: TrainingTrace, spec: CovarianceSpec, n_ctx: int, theta: float = DEFAULT_THETA
) -> LearningTimes:
    """Feature ``i`` counts as learned at the first logged step where
    ``m_i >= theta * target_i``; once crossed it stays learned."""
    if trace.feature_progress is None or len(trace.feature_progress) == 0:
        raise ValueError("trace carries no feature progress series")
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    target = fixed_point_m_target(spec, n_ctx)
    prog = np.asarray(trace.feature_progress)
    if prog.shape[1] != spec.d:
        raise ValueError("trace dimension does not match spectrum")
    crossed = prog >= theta * target[None, :]
    steps = np.full(spec.d, -1, dtype=int)
    times = np.full(spec.d, np.nan)
    for i in range(spec.d):
        hits = np.flatnonzero(crossed[:, i])
        if hits.size:
            steps[i] = int(trace.steps[hits[0]])
            times[i] = steps[i] * trace.eta
    return LearningTimes(times, steps, f"threshold(theta={theta})")


def smooth(losses, window: int) -> np.ndarray:
    if window < 1:
        raise ValueError("smoothing window must be >= 1")
    x = np.asarray(losses, dtype=float)
    if window == 1 or x.size == 0:
        return x.copy()
    return uniform_filter1d(x, size=min(window, x.size), mode="nearest")


def detect_loss_drops(
    losses,
    smoothing_window: int = DEFAULT_WINDOW,
    drop_ratio: float = DEFAULT_DROP_RATIO,
    min_drop: float = DEFAULT_MIN_DROP,
) -> np.ndarray:
    """Indices of abrupt drops in a loss curve.

    The curve is smoothed with a moving average, then the decrease across one
    window, ``s[t - w/2] - s[t + w/2]``, is scanned for peaks.  A peak counts as
    a drop when that decrease is at least ``drop_ratio`` of the remaining gap
    ``s[t - w/2] - s[-1]`` and at least ``min_drop`` of the curve's total range
    (this keeps the convergence tail, where the gap goes to zero, from
    qualifying).  Peaks closer than one window are merged.
    """
    s = smooth(losses, smoothing_window)
    n = s.size
    if n < 3:
        return np.array([], dtype=int)
    half = max(1, smoothing_window // 2)
    idx = np.arange(n)
    before = s[np.clip(idx - half, 0, n - 1)]
    after = s[np.clip(idx + half, 0, n - 1)]
    decrease = before - after
    gap = before - s[-1]
    scale = max(float(np.max(np.abs(s))), 1e-300)
    floor = max(1e-12 * scale, min_drop * float(np.max(s) - s[-1]))
    ok = (decrease > floor) & (decrease >= drop_ratio * gap)
    signal = np.where(ok, decrease, 0.0)
    # pad so a drop at the very start still forms a peak
    padded = np.concatenate([[0.0], signal, [0.0]])
    peaks, _ = find_peaks(padded, height=1e-12 * scale, distance=max(1, smoothing_window))
    return np.sort(peaks - 1).astype(int)


def entropy_report(times: LearningTimes) -> EntropyReport:
    mask = times.learned
    if not mask.any():
        raise ValueError("no features learned; cannot normalize")
    t = np.asarray(times.times)[mask]
    ts = TimeSequence(t)
    return EntropyReport(
        times=t,
        features=np.flatnonzero(mask) + 1,
        masses=ts.normalized,
        entropy=entropy(ts),
        M=int(mask.sum()),
        method=times.method,
    )


def head_alignment_at_drops(trace: TrainingTrace, drop_steps, features=None) -> np.ndarray:
    """|cos| between the newly active head's key (and query) and ``e_i`` after each drop.

    Drop ``j`` is matched to feature ``features[j]`` (1-based; default j+1).  The
    active head is the one carrying the largest ``|v_h k_hi q_hi|`` at the first
    snapshot at or after the drop.  Returns the smaller of the key and query
    cosines per drop.
    """
    if not trace.snapshots:
        raise ValueError("alignment needs parameter snapshots")
    snap_steps = np.array([s for s, _ in trace.snapshots])
    out = []
    for j, step in enumerate(drop_steps):
        i = (features[j] if features is not None else j + 1) - 1
        pos = min(int(np.searchsorted(snap_steps, step)), len(snap_steps) - 1)
        p = trace.snapshots[pos][1]
        contrib = np.abs(p.v * p.k[:, i] * p.q[:, i])
        h = int(np.argmax(contrib))
        cos_k = abs(p.k[h, i]) / max(np.linalg.norm(p.k[h]), 1e-300)
        cos_q = abs(p.q[h, i]) / max(np.linalg.norm(p.q[h]), 1e-300)
        out.append(min(cos_k, cos_q))
    return np.array(out)
