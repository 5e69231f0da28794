"""Stochastic iterative rotation averaging.

Three interchangeable algorithms estimate per-node orientations from
relative-rotation edges:

- ``so3``: tangent-space updates R_i <- R_i expm(gamma * r), with
  r = logm(R_i^T R(q_i_j) R_j) the displacement toward the pair target.
- ``quaternion``: ambient R^4 descent on 1 - <q_i, q_i_j x q_j>^2
  followed by renormalization.
- ``mrp``: descent on the squared distance in the stereographically
  projected space, choosing per pair whichever antipode of the target
  projects nearer, with the step norm clamped to ``eta``.

A batch step samples ``batch_size`` distinct nodes, one uniformly random
neighbor each, computes every update from the pre-step state, and applies
them together; the neighbor values are anchors and never receive
gradients.  The so3 and quaternion baselines mean-reduce over the batch
(each sampled node moves by gamma / batch_size times its pair gradient,
standard SGD batching); the mrp algorithm applies its per-sample rule at
full strength, clamping each pair gradient to eta and scaling by gamma,
since the clamp bounds per-update motion in the distorted projective
space and its calibration is per sample.  At batch_size 1 all three
reduce to the plain per-sample algorithms.  Runs are deterministic given
the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics, rotmath

ALGORITHMS = ("so3", "quaternion", "mrp")

# Runs draw from the stream family (seed, _RUN_STREAM) so a run seeded s
# on an environment generated with the same integer s never starts from
# the environment's own ground-truth draw.
_RUN_STREAM = 0x524F5441
PARAMETERIZATIONS = ("so3_matrix", "quaternion", "mrp")
PARAM_FOR_ALGORITHM = {
    "so3": "so3_matrix",
    "quaternion": "quaternion",
    "mrp": "mrp",
}
INIT_MODES = ("identity", "haar")


@dataclass
class OptimizerConfig:
    """Knobs for one optimization run.

    gamma is the learning rate; eta caps the norm of an MRP pair gradient
    before it is scaled by gamma (clamp first, then scale).  ``init``
    selects identity or Haar-random initial estimates; the Haar draw
    comes from the run seed unless ``init_seed`` is given.
    """

    algorithm: str
    gamma: float = 0.5
    eta: float = 0.1
    batch_size: int = 8
    max_iters: int = 300_000
    seed: int = 0
    checkpoint_every: int = 1000
    init: str = "haar"
    init_seed: int | None = None

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not self.gamma > 0.0:
            raise ValueError("gamma must be > 0")
        if not self.eta > 0.0:
            raise ValueError("eta must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init!r}")


@dataclass
class StepReport:
    """What one batch step did: sampled pairs, per-pair losses, and the
    update vector applied to each sampled node.

    ``updates`` is the actual increment in the algorithm's own space: the
    applied tangent vector for so3, the R^4 delta added before
    renormalization for quaternion, and the clamped, gamma-scaled MRP
    delta.  ``antipodes`` is only populated by the mrp step.
    """

    pairs: np.ndarray
    losses: np.ndarray
    updates: np.ndarray
    antipodes: np.ndarray | None = None


class EstimateSet:
    """Per-node orientation estimates in one parameterization.

    ``values`` has shape (N, 3, 3) for so3_matrix, (N, 4) for quaternion
    ([w, x, y, z]), or (N, 3) for mrp.  Batch steps mutate it in place.
    """

    def __init__(self, parameterization: str, values):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {parameterization!r}")
        values = np.array(values, dtype=float, copy=True)
        n = values.shape[0]
        expected = {"so3_matrix": (n, 3, 3), "quaternion": (n, 4), "mrp": (n, 3)}
        if values.shape != expected[parameterization]:
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{parameterization} (want {expected[parameterization]})"
            )
        self.parameterization = parameterization
        self.values = values

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @classmethod
    def identity(cls, n: int, parameterization: str) -> "EstimateSet":
        if parameterization == "so3_matrix":
            vals = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        elif parameterization == "quaternion":
            vals = np.zeros((n, 4))
            vals[:, 0] = 1.0
        else:
            vals = np.zeros((n, 3))
        return cls(parameterization, vals)

    @classmethod
    def from_quaternions(cls, quats, parameterization: str) -> "EstimateSet":
        quats = rotmath.quat_normalize(np.atleast_2d(quats))
        if parameterization == "so3_matrix":
            return cls(parameterization, rotmath.quat_to_matrix(quats))
        if parameterization == "quaternion":
            return cls(parameterization, quats)
        # keep MRPs inside the unit ball (and off the south pole) by
        # projecting the w >= 0 antipode
        canon = quats * np.where(quats[:, :1] < 0.0, -1.0, 1.0)
        return cls(parameterization, rotmath.mrp_project(canon))

    def to_quaternions(self) -> np.ndarray:
        if self.parameterization == "so3_matrix":
            return rotmath.matrix_to_quat(self.values)
        if self.parameterization == "quaternion":
            return rotmath.quat_normalize(self.values)
        return rotmath.mrp_unproject(self.values)

    def to_matrices(self) -> np.ndarray:
        if self.parameterization == "so3_matrix":
            return self.values.copy()
        return rotmath.quat_to_matrix(self.to_quaternions())

    def reparameterize(self, parameterization: str) -> "EstimateSet":
        if parameterization == self.parameterization:
            return self.copy()
        return EstimateSet.from_quaternions(self.to_quaternions(), parameterization)

    def copy(self) -> "EstimateSet":
        return EstimateSet(self.parameterization, self.values)


def target_quaternion(q_ij, qhat_j) -> np.ndarray:
    """Where the sampled node should sit relative to its anchor neighbor:
    q_i_j x qhat_j (unit)."""
    return rotmath.quat_mul(q_ij, qhat_j)


def _mrp_pair_grads(psi_i, psi_j, q_ij):
    """Vectorized per-pair MRP loss/gradient with antipode selection.

    Projects the target q_i_j x phi^-1(psi_j) under both signs, keeps the
    candidate nearer to psi_i (an antipode inside the south-pole guard
    band is never selected), and returns (loss, grad, sign) where
    grad = psi_i - phi(sign * target); the constant factor 2 of the true
    gradient is folded into the learning rate.
    """
    target = rotmath.quat_mul(q_ij, rotmath.mrp_unproject(psi_j))
    w = target[..., 0]
    v = target[..., 1:]

    plus_ok = w > -1.0 + rotmath.SOUTH_POLE_TOL
    minus_ok = w < 1.0 - rotmath.SOUTH_POLE_TOL
    psi_plus = v / np.where(plus_ok, 1.0 + w, 1.0)[..., None]
    psi_minus = -v / np.where(minus_ok, 1.0 - w, 1.0)[..., None]

    d_plus = psi_i - psi_plus
    d_minus = psi_i - psi_minus
    loss_plus = np.where(plus_ok, np.sum(d_plus * d_plus, axis=-1), np.inf)
    loss_minus = np.where(minus_ok, np.sum(d_minus * d_minus, axis=-1), np.inf)

    use_plus = loss_plus < loss_minus
    loss = np.where(use_plus, loss_plus, loss_minus)
    grad = np.where(use_plus[..., None], d_plus, d_minus)
    sign = np.where(use_plus, 1, -1)
    return loss, grad, sign


def mrp_loss_and_grad(psi_i, psi_j, q_ij):
    """Single-pair MRP loss, gradient, and selected antipode sign."""
    loss, grad, sign = _mrp_pair_grads(
        np.asarray(psi_i, dtype=float),
        np.asarray(psi_j, dtype=float),
        np.asarray(q_ij, dtype=float),
    )
    return float(loss), grad, int(sign)


def _sample_batch(env, batch_size, rng):
    """Distinct nodes plus one uniform neighbor slot each."""
    idx = rng.permutation(env.n_nodes)[:batch_size]
    slot = (rng.random(batch_size) * env.nbr_counts[idx]).astype(np.int64)
    sel = env.nbr_offsets[idx] + slot
    return idx, env.nbr_ids[sel], sel


def mrp_step(estimates: EstimateSet, env, cfg: OptimizerConfig, rng) -> StepReport:
    """One synchronous batch update in MRP space.

    Each sampled node applies the per-sample rule at full strength: its
    pair gradient is clamped to norm eta, then scaled by gamma, so the
    applied step never exceeds gamma * eta regardless of batch size.  The
    clamp is what keeps steps sane where the projection distorts scale,
    and its calibration is tied to the per-sample rate.
    """
    if estimates.parameterization != "mrp":
        raise ValueError("mrp_step requires mrp-parameterized estimates")
    idx, j, sel = _sample_batch(env, cfg.batch_size, rng)
    psi = estimates.values
    loss, grad, sign = _mrp_pair_grads(psi[idx], psi[j], env.nbr_quats[sel])

    norms = np.linalg.norm(grad, axis=-1)
    over = norms > cfg.eta
    scale = np.where(over, cfg.eta / np.where(over, norms, 1.0), 1.0)
    applied = (-cfg.gamma) * scale[:, None] * grad

    psi[idx] += applied
    return StepReport(
        pairs=np.stack([idx, j], axis=1),
        losses=loss,
        updates=applied,
        antipodes=sign,
    )


def so3_step(estimates: EstimateSet, env, cfg: OptimizerConfig, rng) -> StepReport:
    """One synchronous batch update on the rotation-matrix manifold."""
    if estimates.parameterization != "so3_matrix":
        raise ValueError("so3_step requires so3_matrix-parameterized estimates")
    idx, j, sel = _sample_batch(env, cfg.batch_size, rng)
    mats = estimates.values
    r_i = mats[idx]
    r_j = mats[j]
    rel = env.nbr_mats[sel]
    r_delta = rotmath.log_so3(np.swapaxes(r_i, -1, -2) @ rel @ r_j)
    applied = (cfg.gamma / cfg.batch_size) * r_delta

    mats[idx] = r_i @ rotmath.exp_so3(applied)
    return StepReport(
        pairs=np.stack([idx, j], axis=1),
        losses=np.sum(r_delta * r_delta, axis=-1),
        updates=applied,
    )


def quaternion_step(estimates: EstimateSet, env, cfg: OptimizerConfig, rng) -> StepReport:
    """One synchronous batch update on quaternions in ambient R^4."""
    if estimates.parameterization != "quaternion":
        raise ValueError("quaternion_step requires quaternion-parameterized estimates")
    idx, j, sel = _sample_batch(env, cfg.batch_size, rng)
    quats = estimates.values
    q_i = quats[idx]
    q_t = rotmath.quat_mul(env.nbr_quats[sel], quats[j])
    dot = np.sum(q_i * q_t, axis=-1)
    grad = (-2.0 * dot)[:, None] * q_t
    applied = (-cfg.gamma / cfg.batch_size) * grad

    quats[idx] = rotmath.quat_normalize(q_i + applied)
    return StepReport(
        pairs=np.stack([idx, j], axis=1),
        losses=1.0 - dot * dot,
        updates=applied,
    )


STEP_FUNCTIONS = {
    "so3": so3_step,
    "quaternion": quaternion_step,
    "mrp": mrp_step,
}


def initial_estimates(env, cfg: OptimizerConfig, rng=None) -> EstimateSet:
    """Initial EstimateSet in the algorithm's parameterization.

    Haar draws come from ``init_seed`` when set, else from the supplied
    generator (the run stream), else from a fresh generator on cfg.seed.
    """
    param = PARAM_FOR_ALGORITHM[cfg.algorithm]
    if cfg.init == "identity":
        return EstimateSet.identity(env.n_nodes, param)
    if cfg.init_seed is not None:
        rng = np.random.default_rng([cfg.init_seed, _RUN_STREAM])
    elif rng is None:
        rng = np.random.default_rng([cfg.seed, _RUN_STREAM])
    quats = rotmath.sample_uniform_rotation(rng, env.n_nodes)
    return EstimateSet.from_quaternions(quats, param)


def run_averaging(env, cfg: OptimizerConfig):
    """Run one optimization: init, max_iters batch steps, periodic metrics.

    Returns (final EstimateSet, trace).  The trace holds a TraceRecord at
    step 0, at every checkpoint_every steps, and at the final step.
    """
    cfg.validate()
    if cfg.batch_size > env.n_nodes:
        raise ValueError(
            f"batch_size {cfg.batch_size} exceeds node count {env.n_nodes}"
        )
    rng = np.random.default_rng([cfg.seed, _RUN_STREAM])
    estimates = initial_estimates(env, cfg, rng)

    step_fn = STEP_FUNCTIONS[cfg.algorithm]
    trace = [metrics.evaluate(estimates, env, 0)]
    for t in range(1, cfg.max_iters + 1):
        step_fn(estimates, env, cfg, rng)
        if t % cfg.checkpoint_every == 0 or t == cfg.max_iters:
            trace.append(metrics.evaluate(estimates, env, t))
    return estimates, trace


def expected_update(estimates: EstimateSet, env, i: int, algorithm: str) -> np.ndarray:
    """Exact expectation of node i's raw update over its neighbors.

    Averages the unclamped, unscaled per-pair gradient direction under
    uniform neighbor sampling, in the algorithm's tangent/ambient space.
    Zero norm here means the node sits at a critical point of the
    stochastic scheme.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    lo, hi = env.nbr_offsets[i], env.nbr_offsets[i + 1]
    if hi == lo:
        raise ValueError(f"node {i} has no neighbors")
    js = env.nbr_ids[lo:hi]
    q_ij = env.nbr_quats[lo:hi]

    if algorithm == "so3":
        mats = estimates.values if estimates.parameterization == "so3_matrix" \
            else estimates.to_matrices()
        rel = rotmath.quat_to_matrix(q_ij)
        r = rotmath.log_so3(np.swapaxes(mats[i], -1, -2)[None] @ rel @ mats[js])
        return r.mean(axis=0)
    if algorithm == "quaternion":
        quats = estimates.values if estimates.parameterization == "quaternion" \
            else estimates.to_quaternions()
        q_t = rotmath.quat_mul(q_ij, quats[js])
        dot = np.sum(quats[i][None] * q_t, axis=-1)
        return ((-2.0 * dot)[:, None] * q_t).mean(axis=0)
    psi = estimates.values if estimates.parameterization == "mrp" \
        else estimates.reparameterize("mrp").values
    _, grad, _ = _mrp_pair_grads(psi[i][None], psi[js], q_ij)
    return grad.mean(axis=0)
