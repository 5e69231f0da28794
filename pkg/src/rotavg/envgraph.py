"""Rotation-averaging problem instances.

A :class:`RotationEnvironment` holds N nodes, a set of relative-rotation
edges, per-node neighborhoods derived from those edges, and (optionally)
ground-truth orientations.  Stored edges are directed records
``(i, j, q_i_j)`` with the convention ``R(q_i_j) @ R_j = R_i``; the
neighborhood structure is the symmetrized view, so node ``j`` sees node
``i`` through the conjugate quaternion.

Environments are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotmath

# Seed derivation for connectivity retries: seed' = seed * GOLDEN + attempt.
_GOLDEN = 0x9E3779B9
_MAX_CONNECTIVITY_ATTEMPTS = 100


class ConnectivityFailure(RuntimeError):
    """Generation could not produce a single-component graph."""


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters for synthetic uniform-rotation environments."""

    n_nodes: int
    k_neighbors: int = 3
    seed: int = 0
    neighborhood_mode: str = "knn"  # "knn" or "epsilon"
    epsilon: float = 0.0            # ball radius in radians (epsilon mode)

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise ValueError("n_nodes must be >= 2")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.neighborhood_mode not in ("knn", "epsilon"):
            raise ValueError(f"unknown neighborhood_mode {self.neighborhood_mode!r}")
        if self.neighborhood_mode == "epsilon" and not self.epsilon > 0.0:
            raise ValueError("epsilon mode requires epsilon > 0")


def _union_find_labels(n: int, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Component label per node (smallest member id), vectorized union-find."""
    parent = np.arange(n, dtype=np.int64)
    while True:
        ps, pd = parent[src], parent[dst]
        hi = np.maximum(ps, pd)
        lo = np.minimum(ps, pd)
        if np.all(hi == lo):
            break
        np.minimum.at(parent, hi, lo)
        while True:
            pp = parent[parent]
            if np.array_equal(pp, parent):
                break
            parent = pp
    return parent


class RotationEnvironment:
    """Nodes, relative-rotation edges, neighborhoods, optional ground truth.

    Parameters
    ----------
    n_nodes : int
        Node count N (>= 2).
    edge_index : (E, 2) int array
        Directed edge endpoints (i, j); no self loops, one record per
        unordered pair.
    edge_quats : (E, 4) float array
        Relative rotations q_i_j as [w, x, y, z], unit within 1e-6.
    ground_truth : optional, (N, 4) quaternions or (N, 3, 3) matrices
        Reference orientations R_i.

    The edge graph must form a single connected component.
    """

    def __init__(self, n_nodes, edge_index, edge_quats, ground_truth=None):
        n = int(n_nodes)
        if n < 2:
            raise ValueError("an environment needs at least 2 nodes")
        edge_index = np.array(edge_index, dtype=np.int64, copy=True)
        edge_quats = np.array(edge_quats, dtype=float, copy=True)
        if edge_index.ndim != 2 or edge_index.shape[1] != 2:
            raise ValueError("edge_index must have shape (E, 2)")
        if edge_quats.shape != (edge_index.shape[0], 4):
            raise ValueError("edge_quats must have shape (E, 4)")
        if edge_index.shape[0] == 0:
            raise ValueError("an environment needs at least one edge")

        i, j = edge_index[:, 0], edge_index[:, 1]
        if i.min() < 0 or j.min() < 0 or i.max() >= n or j.max() >= n:
            raise ValueError("edge endpoint out of range")
        if np.any(i == j):
            raise ValueError("self loops are not allowed")
        key = np.minimum(i, j) * n + np.maximum(i, j)
        if np.unique(key).size != key.size:
            raise ValueError("duplicate edge for an unordered node pair")
        norms = np.linalg.norm(edge_quats, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("non-unit edge quaternion")

        labels = _union_find_labels(n, i, j)
        if np.unique(labels).size != 1:
            raise ValueError("environment graph is not connected")

        self.n_nodes = n
        self.edge_index = edge_index
        self.edge_quats = edge_quats

        self._gt_quats = None
        self.ground_truth = None
        if ground_truth is not None:
            gt = np.array(ground_truth, dtype=float, copy=True)
            if gt.shape == (n, 4):
                self._gt_quats = gt
            elif gt.shape == (n, 3, 3):
                self._gt_quats = rotmath.matrix_to_quat(gt)
            else:
                raise ValueError("ground_truth must be (N, 4) or (N, 3, 3)")
            if np.any(np.abs(np.linalg.norm(self._gt_quats, axis=-1) - 1.0) > 1e-6):
                raise ValueError("non-unit ground-truth quaternion")
            self.ground_truth = rotmath.quat_to_matrix(self._gt_quats)

        # Symmetrized CSR neighborhoods: node i sees j through q_i_j,
        # node j sees i through its conjugate.
        src = np.concatenate([i, j])
        dst = np.concatenate([j, i])
        qs = np.concatenate([edge_quats, rotmath.quat_conjugate(edge_quats)])
        order = np.lexsort((dst, src))
        self.nbr_ids = dst[order]
        self.nbr_quats = qs[order]
        self.nbr_counts = np.bincount(src, minlength=n)
        self.nbr_offsets = np.concatenate([[0], np.cumsum(self.nbr_counts)])

        for arr in (self.edge_index, self.edge_quats, self.nbr_ids,
                    self.nbr_quats, self.nbr_counts, self.nbr_offsets):
            arr.setflags(write=False)
        if self.ground_truth is not None:
            self._gt_quats.setflags(write=False)
            self.ground_truth.setflags(write=False)

        self._nbr_mats = None

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    @property
    def ground_truth_quats(self):
        return self._gt_quats

    @property
    def nbr_mats(self) -> np.ndarray:
        """Neighborhood relative rotations as matrices, computed once."""
        if self._nbr_mats is None:
            mats = rotmath.quat_to_matrix(self.nbr_quats)
            mats.setflags(write=False)
            self._nbr_mats = mats
        return self._nbr_mats


def neighborhood_of(env: RotationEnvironment, i: int) -> list[tuple[int, np.ndarray]]:
    """Neighbors of node i as (j, q_i_j) pairs, sorted by j."""
    if not 0 <= i < env.n_nodes:
        raise IndexError(f"node id {i} out of range")
    lo, hi = env.nbr_offsets[i], env.nbr_offsets[i + 1]
    return [(int(j), q) for j, q in zip(env.nbr_ids[lo:hi], env.nbr_quats[lo:hi])]


def _pairwise_geodesic(mats: np.ndarray) -> np.ndarray:
    flat = mats.reshape(len(mats), 9)
    cos = np.clip((flat @ flat.T - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(cos)


def generate_uniform_env(cfg: GeneratorConfig) -> RotationEnvironment:
    """Synthetic environment with Haar-uniform ground truth and exact edges.

    Neighborhoods are the k nearest rotations by geodesic distance (union
    over both directions), or all pairs within `epsilon` radians in epsilon
    mode.  If the resulting graph is disconnected the sample is discarded
    and regenerated from a derived seed; after 100 attempts the config is
    considered pathological and ConnectivityFailure is raised.
    """
    cfg.validate()
    n = cfg.n_nodes
    k = min(cfg.k_neighbors, n - 1)

    for attempt in range(_MAX_CONNECTIVITY_ATTEMPTS):
        derived = (cfg.seed * _GOLDEN + attempt) % (1 << 64)
        rng = np.random.default_rng(derived)
        quats = rotmath.sample_uniform_rotation(rng, n)
        mats = rotmath.quat_to_matrix(quats)
        dist = _pairwise_geodesic(mats)
        np.fill_diagonal(dist, np.inf)

        if cfg.neighborhood_mode == "knn":
            nearest = np.argpartition(dist, k - 1, axis=1)[:, :k]
            rows = np.repeat(np.arange(n), k)
            cols = nearest.reshape(-1)
        else:
            rows, cols = np.nonzero(dist < cfg.epsilon)
        lo = np.minimum(rows, cols)
        hi = np.maximum(rows, cols)
        pairs = np.unique(lo * n + hi)
        i = pairs // n
        j = pairs % n
        if i.size == 0:
            continue

        labels = _union_find_labels(n, i, j)
        if np.unique(labels).size != 1:
            continue

        rel = rotmath.matrix_to_quat(mats[i] @ np.swapaxes(mats[j], -1, -2))
        return RotationEnvironment(
            n, np.stack([i, j], axis=1), rel, ground_truth=quats
        )

    raise ConnectivityFailure(
        f"no connected graph after {_MAX_CONNECTIVITY_ATTEMPTS} attempts "
        f"(n_nodes={cfg.n_nodes}, k_neighbors={cfg.k_neighbors}, "
        f"mode={cfg.neighborhood_mode}); the config is likely too sparse"
    )


def evenly_spaced_rotations(omega0, theta0: float, n: int = 3) -> np.ndarray:
    """Rotations exp((theta0 - i*2pi/n) * omega0) for i = 0..n-1."""
    omega0 = np.asarray(omega0, dtype=float)
    omega0 = omega0 / np.linalg.norm(omega0)
    angles = theta0 - np.arange(n) * 2.0 * np.pi / n
    return rotmath.exp_so3(angles[:, None] * omega0)


def build_critical_env(omega0, theta0: float, r0, ground_truth, n_nodes: int = 3):
    """Fully connected environment plus the phased initial estimates.

    Ground truth is taken as given; the initial estimate of node i is
    R_i @ r0 @ exp((theta0 + i*2pi/n) * omega0), i.e. a constant offset r0
    followed by an extra rotation about omega0 whose angle advances by
    2pi/n per node.  Returns (environment, EstimateSet) with the estimates
    in the so3_matrix parameterization.
    """
    from .averaging import EstimateSet

    gt = np.asarray(ground_truth, dtype=float)
    n = int(n_nodes)
    if gt.shape != (n, 3, 3):
        raise ValueError(f"ground_truth must have shape ({n}, 3, 3)")
    omega0 = np.asarray(omega0, dtype=float)
    omega0 = omega0 / np.linalg.norm(omega0)
    r0 = np.asarray(r0, dtype=float)

    ii, jj = np.triu_indices(n, 1)
    rel = rotmath.matrix_to_quat(gt[ii] @ np.swapaxes(gt[jj], -1, -2))
    env = RotationEnvironment(
        n, np.stack([ii, jj], axis=1), rel, ground_truth=gt
    )

    angles = theta0 + np.arange(n) * 2.0 * np.pi / n
    offsets = rotmath.exp_so3(angles[:, None] * omega0)
    estimates = EstimateSet("so3_matrix", gt @ r0 @ offsets)
    return env, estimates
