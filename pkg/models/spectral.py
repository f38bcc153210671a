"""Empirical Gram operator M = J J*, its eigensystem, and eigenbasis tracking.

All matrices live in the symmetrized weighted basis: with D = diag(w) the
operator is represented as D^{1/2} J Jᵀ D^{1/2}, so self-adjointness in
L²(w) is ordinary symmetry. Eigenvector columns ψ_u are stored in that basis;
the function values φ_u(x_i) = ψ_ui / √w_i are available on demand.
"""

from dataclasses import dataclass, field
from typing import List, Optional
import logging

import numpy as np
from scipy import linalg

from models.errors import ConfigError, DimensionError, DivergenceError
from models.netlab import NetworkState, SampleSet, jacobian

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10
DEFAULT_RANK_TOL = 1e-12
DEFAULT_OVERLAP_FLOOR = 0.5
DEFAULT_GAP_FLOOR = 1e-8


def _check_symmetric(matrix: np.ndarray, what: str):
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"{what} must be square, got shape {matrix.shape}")
    scale = max(np.abs(matrix).max(initial=0.0), np.finfo(float).tiny)
    asym = np.abs(matrix - matrix.T).max(initial=0.0)
    if asym > SYMMETRY_TOL * scale:
        raise DimensionError(f"{what} is not symmetric (max asymmetry {asym:.3e})")


@dataclass
class GramOperator:
    """M(t) in the symmetrized weighted basis."""
    matrix: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        _check_symmetric(self.matrix, 'GramOperator')

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass
class OperatorDerivative:
    """Ṁ(t), same basis as :class:`GramOperator`."""
    matrix: np.ndarray
    timestamp: float = 0.0
    method: str = 'central-diff'

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        _check_symmetric(self.matrix, 'OperatorDerivative')
        if self.method not in ('central-diff', 'directional'):
            raise ValueError(f"method must be 'central-diff' or 'directional', got {self.method!r}")


@dataclass
class SpectralSnapshot:
    """Retained eigenpairs of M(t) plus alignment metadata.

    ``permutation[k]`` is the column of the raw (descending) decomposition
    that now sits at position k; ``signs`` are the flips applied after
    permuting. A snapshot that failed the overlap floor is marked
    ``usable = False``.
    """
    timestamp: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    min_gap: float = np.inf
    permutation: Optional[np.ndarray] = None
    signs: Optional[np.ndarray] = None
    min_overlap: float = 1.0
    usable: bool = True
    clusters: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        self.eigenvectors = np.asarray(self.eigenvectors, dtype=float)
        if self.eigenvectors.ndim != 2 or self.eigenvectors.shape[1] != self.eigenvalues.size:
            raise DimensionError(
                f"eigenvectors shape {self.eigenvectors.shape} does not match "
                f"{self.eigenvalues.size} eigenvalues"
            )
        if self.permutation is None:
            self.permutation = np.arange(self.rank)
        if self.signs is None:
            self.signs = np.ones(self.rank)

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    @property
    def size(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues.max()) if self.rank else 0.0

    def function_values(self, weights: np.ndarray) -> np.ndarray:
        """φ_u(x_i), orthonormal in the weighted inner product."""
        return self.eigenvectors / np.sqrt(weights)[:, None]

    def reconstruct(self) -> np.ndarray:
        """Σ λ_u ψ_u ψ_uᵀ on the retained rank."""
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


def gram_operator(J: np.ndarray, weights: np.ndarray, t: float = 0.0) -> GramOperator:
    """Build D^{1/2} J Jᵀ D^{1/2} for an n × N Jacobian."""
    J = np.asarray(J, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if J.ndim != 2 or J.shape[0] != weights.size:
        raise DimensionError(f"Jacobian shape {J.shape} does not match {weights.size} weights")
    A = np.sqrt(weights)[:, None] * J
    M = A @ A.T
    return GramOperator(0.5 * (M + M.T), t)


def operator_at(net: NetworkState, samples: SampleSet, t: float = 0.0) -> GramOperator:
    return gram_operator(jacobian(net, samples), samples.weights, t)


def degenerate_clusters(eigenvalues: np.ndarray, gap_floor: float = DEFAULT_GAP_FLOOR) -> List[np.ndarray]:
    """Groups of indices whose eigenvalues sit closer than gap_floor·λ_max.

    Singletons are not reported. Works for any ordering of ``eigenvalues``.
    """
    if eigenvalues.size < 2:
        return []
    order = np.argsort(-eigenvalues, kind='stable')
    threshold = gap_floor * max(np.abs(eigenvalues).max(), np.finfo(float).tiny)
    clusters, current = [], [order[0]]
    for prev, idx in zip(order[:-1], order[1:]):
        if abs(eigenvalues[prev] - eigenvalues[idx]) < threshold:
            current.append(idx)
        else:
            if len(current) > 1:
                clusters.append(np.array(sorted(current)))
            current = [idx]
    if len(current) > 1:
        clusters.append(np.array(sorted(current)))
    return clusters


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    if vectors.size == 0:
        return vectors
    pivots = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def eigensystem(
    M: GramOperator,
    rank_tol: float = DEFAULT_RANK_TOL,
    gap_floor: float = DEFAULT_GAP_FLOOR,
) -> SpectralSnapshot:
    """Full symmetric eigendecomposition, truncated below rank_tol·λ_max.

    Raises:
        DivergenceError: the eigensolver did not converge
        DivergenceError: M has eigenvalues below −1e-10·λ_max
    """
    if rank_tol < 0:
        raise ConfigError(f"rank_tol must be nonnegative, got {rank_tol}")
    try:
        values, vectors = linalg.eigh(M.matrix)
    except linalg.LinAlgError as e:
        logger.error(f"Eigensolver failed at t={M.timestamp}: {e}")
        raise DivergenceError(f"eigensolver did not converge at t={M.timestamp}") from e

    values, vectors = values[::-1], vectors[:, ::-1]
    lam_max = max(values[0], 0.0) if values.size else 0.0
    if values.size and values[-1] < -PSD_TOL * lam_max:
        raise DivergenceError(
            f"operator at t={M.timestamp} is not positive semidefinite "
            f"(min eigenvalue {values[-1]:.3e}, max {lam_max:.3e})"
        )

    keep = values > rank_tol * lam_max if lam_max > 0 else np.zeros(values.size, dtype=bool)
    values, vectors = values[keep], _canonical_signs(vectors[:, keep])
    min_gap = float(np.min(np.abs(np.diff(values)))) if values.size > 1 else np.inf
    return SpectralSnapshot(
        timestamp=M.timestamp,
        eigenvalues=values,
        eigenvectors=vectors,
        min_gap=min_gap,
        clusters=degenerate_clusters(values, gap_floor),
    )


def _rotate_clusters(prev: SpectralSnapshot, cur: SpectralSnapshot) -> np.ndarray:
    """Rotate each degenerate cluster of ``cur`` onto the closest previous vectors."""
    vectors = cur.eigenvectors.copy()
    for cluster in cur.clusters:
        Q = vectors[:, cluster]
        weight = np.linalg.norm(prev.eigenvectors.T @ Q, axis=1)
        targets = np.sort(np.argsort(-weight, kind='stable')[:cluster.size])
        R, _ = linalg.orthogonal_procrustes(Q, prev.eigenvectors[:, targets])
        vectors[:, cluster] = Q @ R
    return vectors


def align_snapshots(
    prev: SpectralSnapshot,
    cur: SpectralSnapshot,
    overlap_floor: float = DEFAULT_OVERLAP_FLOOR,
) -> SpectralSnapshot:
    """Reorder and sign-flip ``cur`` so it continues ``prev``'s basis.

    Greedy matching on |⟨ψ_prev, ψ_cur⟩|: the largest remaining overlap is
    paired first. Degenerate clusters are first rotated (orthogonal
    Procrustes) toward the previous vectors they span. Unmatched columns,
    if the ranks differ, are appended in their original order.
    """
    if prev.size != cur.size:
        raise DimensionError(f"snapshots have different ambient sizes {prev.size} and {cur.size}")

    vectors = _rotate_clusters(prev, cur) if cur.clusters and prev.rank else cur.eigenvectors
    overlap = np.abs(prev.eigenvectors.T @ vectors)
    r_prev, r_cur = overlap.shape
    assignment = -np.ones(r_prev, dtype=int)
    taken_rows, taken_cols = np.zeros(r_prev, bool), np.zeros(r_cur, bool)
    for flat in np.argsort(-overlap, axis=None, kind='stable'):
        i, j = divmod(int(flat), r_cur)
        if taken_rows[i] or taken_cols[j]:
            continue
        assignment[i] = j
        taken_rows[i] = taken_cols[j] = True
        if taken_rows.all() or taken_cols.all():
            break

    matched = [j for j in assignment if j >= 0]
    permutation = np.array(matched + [j for j in range(r_cur) if not taken_cols[j]], dtype=int)
    new_vectors = vectors[:, permutation]
    new_values = cur.eigenvalues[permutation]

    signs = np.ones(r_cur)
    n_matched = len(matched)
    if n_matched:
        diag = np.einsum('ij,ij->j', prev.eigenvectors[:, assignment >= 0], new_vectors[:, :n_matched])
        signs[:n_matched] = np.where(diag < 0, -1.0, 1.0)
        min_overlap = float(np.abs(diag).min())
    else:
        min_overlap = 0.0 if r_cur else 1.0
    new_vectors = new_vectors * signs

    usable = min_overlap >= overlap_floor and r_prev == r_cur
    if not usable:
        logger.warning(
            f"Eigenbasis discontinuity at t={cur.timestamp}: min overlap {min_overlap:.3f} "
            f"(floor {overlap_floor}), ranks {r_prev}->{r_cur}"
        )

    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(r_cur)
    return SpectralSnapshot(
        timestamp=cur.timestamp,
        eigenvalues=new_values,
        eigenvectors=new_vectors,
        min_gap=cur.min_gap,
        permutation=permutation,
        signs=signs,
        min_overlap=min_overlap,
        usable=usable,
        clusters=[np.sort(inverse[c]) for c in cur.clusters],
    )


def operator_derivative(M_prev: GramOperator, M_next: GramOperator, dt: float) -> OperatorDerivative:
    """Central difference (M_next − M_prev) / 2dt at the midpoint time."""
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if M_prev.size != M_next.size:
        raise DimensionError(f"operators have different sizes {M_prev.size} and {M_next.size}")
    span = M_next.timestamp - M_prev.timestamp
    if abs(span - 2 * dt) > 1e-9 * max(1.0, abs(span)):
        raise DimensionError(f"timestamps differ by {span}, expected 2*dt = {2 * dt}")
    D = (M_next.matrix - M_prev.matrix) / (2 * dt)
    return OperatorDerivative(0.5 * (D + D.T), 0.5 * (M_prev.timestamp + M_next.timestamp))


def directional_derivative(
    net: NetworkState,
    samples: SampleSet,
    velocity: np.ndarray,
    t: float = 0.0,
    h: float = 1e-6,
) -> OperatorDerivative:
    """Ṁ along a parameter velocity θ̇: D^{1/2}(J̇Jᵀ + JJ̇ᵀ)D^{1/2}.

    J̇ is the central difference of the Jacobian along ``velocity`` with step h.
    """
    J = jacobian(net, samples)
    J_plus = jacobian(NetworkState(net.params + h * velocity, net.spec), samples)
    J_minus = jacobian(NetworkState(net.params - h * velocity, net.spec), samples)
    J_dot = (J_plus - J_minus) / (2 * h)
    s = np.sqrt(samples.weights)[:, None]
    cross = (s * J_dot) @ (s * J).T
    return OperatorDerivative(cross + cross.T, t, method='directional')
