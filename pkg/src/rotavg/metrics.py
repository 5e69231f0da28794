"""Evaluation quantities for rotation-averaging runs.

All errors are reported in degrees.  Under the edge convention
R(q_i_j) R_j = R_i the averaging objective is unchanged when every
estimate is post-multiplied by one constant rotation; pairwise and
relative errors are invariant under that gauge, and absolute errors first
resolve it with a chordal-L2 alignment.  Everything here is a pure
function of its snapshot arguments, computed single-threaded with numpy's
pairwise summation, so results do not depend on any reduction order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotmath

_POLAR_TOL = 1e-12
_POLAR_MAX_ITERS = 100
_RANK_TOL = 1e-9


class DegenerateAlignment(RuntimeError):
    """The gauge-alignment accumulator is rank deficient; S is ambiguous."""


@dataclass
class TraceRecord:
    """Metric snapshot at one checkpoint.

    Fields needing ground truth (ape_*, abs_*) are None when the
    environment has none.
    """

    step: int
    ape_mean_deg: float | None
    ape_median_deg: float | None
    rel_mean_deg: float
    rel_median_deg: float
    abs_mean_deg: float | None = None
    abs_median_deg: float | None = None


@dataclass
class ConvergenceSummary:
    """Headline numbers of one run: first checkpoint under 5 degrees (None
    if never reached), normalized area under the mean-pairwise-error
    curve, and the final mean pairwise error."""

    steps_to_5deg: int | None
    nauc: float | None
    final_ape_deg: float | None


def _as_matrices(estimates) -> np.ndarray:
    if hasattr(estimates, "to_matrices"):
        return estimates.to_matrices()
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 3 or est.shape[-2:] != (3, 3):
        raise ValueError("estimates must be an EstimateSet or an (N, 3, 3) array")
    return est


def _angles_deg_from_traces(traces) -> np.ndarray:
    cos = np.clip((traces - 1.0) / 2.0, -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def avg_pairwise_error(estimates, ground_truth) -> tuple[float, float]:
    """Mean and median, over all unordered pairs, of the angle between the
    estimated and true relative rotation of the pair.

    Gauge-invariant by construction: each term compares Rhat_i Rhat_j^T
    with R_i R_j^T, and a global gauge rotation cancels inside every
    pair product.
    """
    est = _as_matrices(estimates)
    gt = np.asarray(ground_truth, dtype=float)
    n = est.shape[0]
    if gt.shape != (n, 3, 3):
        raise ValueError("ground truth shape does not match estimates")
    # G_i = Rhat_i^T R_i; pair angle ij has cos = (<G_i, G_j>_F - 1) / 2
    g = (np.swapaxes(est, -1, -2) @ gt).reshape(n, 9)
    traces = g @ g.T
    iu, ju = np.triu_indices(n, 1)
    ang = _angles_deg_from_traces(traces[iu, ju])
    return float(np.mean(ang)), float(np.median(ang))


def relative_edge_error(estimates, env) -> tuple[float, float]:
    """Mean and median angle d(Rhat_i, R(q_i_j) Rhat_j) over the stored
    directed edges (each measured constraint exactly once)."""
    est = _as_matrices(estimates)
    i = env.edge_index[:, 0]
    j = env.edge_index[:, 1]
    target = rotmath.quat_to_matrix(env.edge_quats) @ est[j]
    traces = np.einsum("eab,eab->e", est[i], target)
    ang = _angles_deg_from_traces(traces)
    return float(np.mean(ang)), float(np.median(ang))


def align_gauge(estimates, ground_truth) -> np.ndarray:
    """Rotation S minimizing sum_i ||R_i - Rhat_i S||_F^2.

    S acts on the right because that is the residual freedom of the
    averaging objective under the edge convention R(q_i_j) R_j = R_i: a
    converged estimate set satisfies Rhat_i = R_i G for one global G, so
    the chordal-optimal S recovers G^-1 and zeroes the per-node error.
    Computed as the special-orthogonal polar factor of
    M = sum Rhat_i^T R_i via Newton iteration X <- (X + X^-T) / 2 with
    determinant scaling; if the orthogonal factor is a reflection the
    singular direction with the smallest stretch is flipped.  Raises
    DegenerateAlignment when M is rank deficient beyond tolerance and S
    is ambiguous.
    """
    est = _as_matrices(estimates)
    gt = np.asarray(ground_truth, dtype=float)
    if gt.shape != est.shape:
        raise ValueError("ground truth shape does not match estimates")
    m = np.einsum("nba,nbc->ac", est, gt)

    scale = np.linalg.norm(m)
    if not scale > 0.0:
        raise DegenerateAlignment("alignment accumulator is zero")
    m = m / scale
    sq = np.linalg.eigvalsh(m.T @ m)
    if np.sqrt(max(sq[0], 0.0)) <= _RANK_TOL * np.sqrt(sq[-1]):
        raise DegenerateAlignment("alignment accumulator is rank deficient")

    x = m
    for _ in range(_POLAR_MAX_ITERS):
        det = abs(np.linalg.det(x))
        if det == 0.0:
            raise DegenerateAlignment("alignment accumulator is singular")
        mu = det ** (-1.0 / 3.0)
        xs = mu * x
        x_next = 0.5 * (xs + np.linalg.inv(xs).T)
        if np.linalg.norm(x_next - x) < _POLAR_TOL:
            x = x_next
            break
        x = x_next
    else:
        raise DegenerateAlignment("polar iteration did not converge")

    if np.linalg.det(x) < 0.0:
        # nearest rotation flips the weakest singular direction
        h = x.T @ m
        _, vecs = np.linalg.eigh(0.5 * (h + h.T))
        v = vecs[:, 0]
        x = x @ (np.eye(3) - 2.0 * np.outer(v, v))
    return x


def absolute_error(estimates, ground_truth) -> tuple[float, float]:
    """Mean and median per-node angle after optimal gauge alignment.

    Falls back to S = I when the alignment is degenerate.
    """
    est = _as_matrices(estimates)
    gt = np.asarray(ground_truth, dtype=float)
    try:
        s = align_gauge(est, gt)
    except DegenerateAlignment:
        s = np.eye(3)
    traces = np.einsum("nab,nab->n", est @ s, gt)
    ang = _angles_deg_from_traces(traces)
    return float(np.mean(ang)), float(np.median(ang))


def nauc(trace) -> float:
    """Area under the mean-pairwise-error curve over normalized steps.

    Trapezoidal integration of ape_mean_deg against step / max(step) on
    [0, 1]; a single-checkpoint trace integrates as a constant curve.
    """
    if len(trace) == 0:
        raise ValueError("nauc needs at least one checkpoint")
    errs = [r.ape_mean_deg for r in trace]
    if any(e is None for e in errs):
        raise ValueError("nauc needs ground-truth pairwise errors")
    if len(trace) == 1 or trace[-1].step == 0:
        return float(errs[0])
    steps = np.array([r.step for r in trace], dtype=float)
    return float(np.trapezoid(np.array(errs), steps / steps[-1]))


def steps_to_threshold(trace, threshold_deg: float = 5.0) -> int | None:
    """Step of the first checkpoint with mean pairwise error below the
    threshold; None when no checkpoint qualifies."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    for rec in trace:
        if rec.ape_mean_deg is not None and rec.ape_mean_deg < threshold_deg:
            return rec.step
    return None


def evaluate(estimates, env, step: int) -> TraceRecord:
    """TraceRecord for the current estimates of an environment."""
    est = _as_matrices(estimates)
    rel_mean, rel_median = relative_edge_error(est, env)
    if env.ground_truth is None:
        return TraceRecord(step, None, None, rel_mean, rel_median)
    ape_mean, ape_median = avg_pairwise_error(est, env.ground_truth)
    abs_mean, abs_median = absolute_error(est, env.ground_truth)
    return TraceRecord(
        step, ape_mean, ape_median, rel_mean, rel_median, abs_mean, abs_median
    )


def summarize(trace) -> ConvergenceSummary:
    """Convergence summary of a completed trace."""
    final = trace[-1].ape_mean_deg if trace else None
    try:
        area = nauc(trace)
    except ValueError:
        area = None
    return ConvergenceSummary(
        steps_to_5deg=steps_to_threshold(trace) if trace else None,
        nauc=area,
        final_ape_deg=final,
    )
