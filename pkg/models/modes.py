"""Mode amplitudes, Kato coupling and the exact coupled mode ODE."""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence
import logging

import numpy as np

from models.errors import ConfigError, DegenerateDataError, DimensionError
from models.netlab import ErrorVector
from models.spectral import DEFAULT_GAP_FLOOR, OperatorDerivative, SpectralSnapshot

logger = logging.getLogger(__name__)

RESIDUAL_FLOOR = 1e-12
# modes below this fraction of λ_max carry eigenvector roundoff ~ eps·λ_max/gap
COND_FLOOR = 1e-4


@dataclass
class ModeState:
    """Amplitudes g_u = ⟨e, φ_u⟩_w, indexed like the aligned snapshot."""
    timestamp: float
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).ravel()

    @property
    def energy(self) -> float:
        return 0.5 * float(np.sum(self.amplitudes ** 2))


@dataclass
class CouplingMatrix:
    """entries[u, v] = Ω_{v→u}; masked pairs hold zero."""
    entries: np.ndarray
    gap_mask: np.ndarray
    timestamp: float = 0.0

    @property
    def masked_pairs(self) -> int:
        return int(np.triu(self.gap_mask, 1).sum())


@dataclass
class ResidualReport:
    """Mode-ODE residuals at the interior steps of a trajectory."""
    per_mode: np.ndarray
    max_relative: float
    rms_relative: float
    max_raw: float
    rms_raw: float
    usable_steps: int
    excluded_steps: int
    dt: float
    per_step_rms: List[float] = field(default_factory=list)
    rms_relative_all: float = float('nan')
    conditioned_modes: int = 0
    cond_floor: float = COND_FLOOR

    @property
    def usable_fraction(self) -> float:
        total = self.usable_steps + self.excluded_steps
        return self.usable_steps / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            'per_mode': [float(x) for x in self.per_mode],
            'max_relative': self.max_relative,
            'rms_relative': self.rms_relative,
            'max_raw': self.max_raw,
            'rms_raw': self.rms_raw,
            'usable_steps': self.usable_steps,
            'excluded_steps': self.excluded_steps,
            'usable_fraction': self.usable_fraction,
            'dt': self.dt,
            'rms_relative_all': self.rms_relative_all,
            'conditioned_modes': self.conditioned_modes,
            'cond_floor': self.cond_floor,
        }


class ModeRecord(NamedTuple):
    """One tracked timestep of a trajectory."""
    error: ErrorVector
    snapshot: SpectralSnapshot
    modes: ModeState
    coupling: Optional[CouplingMatrix]


def amplitudes(e: ErrorVector, snap: SpectralSnapshot, weights: np.ndarray) -> ModeState:
    """Project the error onto the retained eigenvectors (symmetrized basis)."""
    weights = np.asarray(weights, dtype=float)
    if e.values.size != snap.size or weights.size != snap.size:
        raise DimensionError(
            f"error length {e.values.size}, weights length {weights.size} and "
            f"snapshot size {snap.size} must agree"
        )
    g = snap.eigenvectors.T @ (np.sqrt(weights) * e.values)
    return ModeState(e.timestamp, g)


def coupling_matrix(
    snap: SpectralSnapshot,
    Mdot: OperatorDerivative,
    gap_floor: float = DEFAULT_GAP_FLOOR,
) -> CouplingMatrix:
    """Ω_{v→u} = ⟨φ_u, Ṁ φ_v⟩ / (λ_v − λ_u) with near-degenerate pairs masked.

    ``gap_floor`` is relative to λ_max. Only the upper triangle is evaluated;
    the lower triangle is its exact negative.
    Both inputs must sit at the same time.
    """
    if Mdot.matrix.shape[0] != snap.size:
        raise DimensionError(f"Mdot size {Mdot.matrix.shape[0]} != snapshot size {snap.size}")
    if abs(Mdot.timestamp - snap.timestamp) > 1e-9 * max(1.0, abs(snap.timestamp)):
        raise DimensionError(f"Mdot at t={Mdot.timestamp} does not match snapshot at t={snap.timestamp}")
    lam = snap.eigenvalues
    numer = snap.eigenvectors.T @ Mdot.matrix @ snap.eigenvectors
    gaps = lam[None, :] - lam[:, None]  # gaps[u, v] = λ_v − λ_u
    threshold = gap_floor * max(snap.lambda_max, np.finfo(float).tiny)
    mask = np.abs(gaps) < threshold
    np.fill_diagonal(mask, True)

    upper = np.triu(np.ones_like(mask), 1) & ~mask
    entries = np.zeros_like(numer)
    entries[upper] = numer[upper] / gaps[upper]
    entries = entries - entries.T
    np.fill_diagonal(mask, False)
    return CouplingMatrix(entries, mask, snap.timestamp)


def mode_ode_rhs(g: ModeState, snap: SpectralSnapshot, omega: CouplingMatrix) -> np.ndarray:
    """∂_t g_u = −λ_u g_u − Σ_{v≠u} g_v Ω_{v→u}."""
    return -snap.eigenvalues * g.amplitudes - omega.entries @ g.amplitudes


def eigenvalue_velocity(snap: SpectralSnapshot, Mdot: OperatorDerivative) -> np.ndarray:
    """First-order eigenvalue drift dλ_u/dt = ⟨φ_u, Ṁ φ_u⟩.

    Degenerate clusters report the cluster mean, the only basis-independent value.
    """
    velocity = np.einsum('iu,ij,ju->u', snap.eigenvectors, Mdot.matrix, snap.eigenvectors)
    for cluster in snap.clusters:
        velocity[cluster] = velocity[cluster].mean()
    return velocity


def step_usable(records: Sequence[ModeRecord], k: int) -> bool:
    window = records[k - 1:k + 2]
    ranks = {r.snapshot.rank for r in window}
    return all(r.snapshot.usable for r in window) and len(ranks) == 1 and records[k].coupling is not None


def ode_residual(
    trajectory: Sequence[ModeRecord],
    dt: float,
    floor: float = RESIDUAL_FLOOR,
    cond_floor: float = COND_FLOOR,
) -> ResidualReport:
    """Compare central-difference dg/dt with the mode ODE at interior steps.

    The relative residual of mode u is
    |dg_u/dt − rhs_u| / (|λ_u g_u| + ‖g‖·‖Ω_{u,·}‖ + floor).

    The aggregates (max, rms, per-step rms) cover the conditioned modes,
    λ_u >= cond_floor·λ_max; ``per_mode`` and ``rms_relative_all`` cover
    every retained mode.

    Raises:
        DegenerateDataError: fewer than three records or no usable interior step
    """
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if not 0 <= cond_floor < 1:
        raise ConfigError(f"cond_floor must lie in [0, 1), got {cond_floor}")
    if len(trajectory) < 3:
        raise DegenerateDataError(f"ode_residual needs >= 3 timesteps, got {len(trajectory)}")

    relative, raw, conditioned, per_step = [], [], [], []
    kept_modes = None
    excluded = 0
    for k in range(1, len(trajectory) - 1):
        if not step_usable(trajectory, k):
            excluded += 1
            continue
        rec = trajectory[k]
        dg = (trajectory[k + 1].modes.amplitudes - trajectory[k - 1].modes.amplitudes) / (2 * dt)
        rhs = mode_ode_rhs(rec.modes, rec.snapshot, rec.coupling)
        g = rec.modes.amplitudes
        scale = (np.abs(rec.snapshot.eigenvalues * g)
                 + np.linalg.norm(g) * np.linalg.norm(rec.coupling.entries, axis=1)
                 + floor)
        diff = np.abs(dg - rhs)
        keep = rec.snapshot.eigenvalues >= cond_floor * rec.snapshot.lambda_max
        kept_modes = int(keep.sum()) if kept_modes is None else min(kept_modes, int(keep.sum()))
        raw.append(np.where(keep, diff, np.nan))
        relative.append(diff / scale)
        conditioned.append(np.where(keep, diff / scale, np.nan))
        per_step.append(float(np.sqrt(np.mean((diff[keep] / scale[keep]) ** 2))) if keep.any() else 0.0)

    if not relative:
        logger.error(f"All {excluded} interior steps were excluded from the residual")
        raise DegenerateDataError("no usable interior steps for the mode-ODE residual")

    # rank may change between usable steps; pad short rows with nan
    width = max(r.size for r in relative)
    if width == 0:
        relative, raw, conditioned, width = [np.zeros(1)], [np.zeros(1)], [np.zeros(1)], 1
    relative = np.vstack([np.pad(r, (0, width - r.size), constant_values=np.nan) for r in relative])
    raw = np.vstack([np.pad(r, (0, width - r.size), constant_values=np.nan) for r in raw])
    conditioned = np.vstack([np.pad(r, (0, width - r.size), constant_values=np.nan) for r in conditioned])
    if excluded:
        logger.info(f"Mode-ODE residual: excluded {excluded} steps failing alignment/gap filters")
    return ResidualReport(
        per_mode=np.nanmax(relative, axis=0),
        max_relative=float(np.nanmax(conditioned)),
        rms_relative=float(np.sqrt(np.nanmean(conditioned ** 2))),
        max_raw=float(np.nanmax(raw)),
        rms_raw=float(np.sqrt(np.nanmean(raw ** 2))),
        usable_steps=len(per_step),
        excluded_steps=excluded,
        dt=dt,
        per_step_rms=per_step,
        rms_relative_all=float(np.sqrt(np.nanmean(relative ** 2))),
        conditioned_modes=kept_modes or 0,
        cond_floor=cond_floor,
    )
