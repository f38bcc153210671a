"""Logarithmic spectral shells and exact quadratic-energy bookkeeping.

Shell α collects the modes with λ_u ∈ [λ_0 q^α, λ_0 q^{α+1}). Per shell the
ledger tracks the energy E_α = ½Σg_u², the dissipation D_α = Σλ_u g_u²,
the pairwise inter-shell fluxes F_{β→α} and the cumulative boundary flux
J_{≤α}. Along a trajectory these satisfy

    dE_α/dt = −D_α + Σ_{β≠α} F_{β→α}

exactly while shell membership is fixed.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from models.errors import ConfigError, DegenerateDataError, DimensionError
from models.modes import CouplingMatrix, ModeState
from models.spectral import SpectralSnapshot

logger = logging.getLogger(__name__)

DEFAULT_Q = 2.0


@dataclass
class ShellPartition:
    """Boundaries λ_α = λ_0 q^α for α in [alpha_min, alpha_max]."""
    lambda0: float
    q: float = DEFAULT_Q
    alpha_min: int = 0
    alpha_max: int = 0

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ValueError(f"lambda0 must be positive, got {self.lambda0}")
        if not self.q > 1:
            raise ValueError(f"q must exceed 1, got {self.q}")
        if self.alpha_max < self.alpha_min:
            raise ValueError(f"alpha range [{self.alpha_min}, {self.alpha_max}] is empty")

    @property
    def alphas(self) -> np.ndarray:
        return np.arange(self.alpha_min, self.alpha_max + 1)

    @property
    def boundaries(self) -> np.ndarray:
        """λ_α for α_min..α_max+1 (lower edges plus the top edge)."""
        return self.lambda0 * self.q ** np.arange(self.alpha_min, self.alpha_max + 2, dtype=float)

    def shell_index(self, lambdas: np.ndarray) -> np.ndarray:
        """α = floor(log(λ/λ_0) / log q), corrected to the half-open convention."""
        lambdas = np.asarray(lambdas, dtype=float)
        alpha = np.floor(np.log(lambdas / self.lambda0) / np.log(self.q)).astype(int)
        alpha = np.where(self.lambda0 * self.q ** (alpha + 1.0) <= lambdas, alpha + 1, alpha)
        alpha = np.where(self.lambda0 * self.q ** alpha.astype(float) > lambdas, alpha - 1, alpha)
        return alpha

    def widened(self, alpha_min: int, alpha_max: int) -> 'ShellPartition':
        return ShellPartition(self.lambda0, self.q, min(self.alpha_min, alpha_min), max(self.alpha_max, alpha_max))

    def to_dict(self) -> dict:
        return {'lambda0': self.lambda0, 'q': self.q,
                'alpha_min': self.alpha_min, 'alpha_max': self.alpha_max}


@dataclass
class ShellLedger:
    """Per-shell bookkeeping at one timestep.

    ``flux[i, j]`` is F_{β→α} with α = alphas[i] and β = alphas[j].
    """
    timestamp: float
    alphas: np.ndarray
    energies: np.ndarray
    dissipations: np.ndarray
    flux: np.ndarray
    cumulative: np.ndarray
    membership: np.ndarray
    internal: np.ndarray = field(default_factory=lambda: np.zeros(0))
    internal_gross: np.ndarray = field(default_factory=lambda: np.zeros(0))
    usable: bool = True

    def __post_init__(self):
        if np.any(self.energies < 0):
            raise ValueError(f"negative shell energy at t={self.timestamp}")
        if np.any(self.dissipations < -1e-300):
            raise ValueError(f"negative shell dissipation at t={self.timestamp}")
        if not np.array_equal(self.flux, -self.flux.T):
            raise ValueError(f"flux matrix at t={self.timestamp} is not antisymmetric")

    @property
    def total_energy(self) -> float:
        return float(self.energies.sum())

    @property
    def net_flux(self) -> np.ndarray:
        """Σ_{β≠α} F_{β→α} per shell."""
        return self.flux.sum(axis=1)

    def position(self, alpha: int) -> int:
        hits = np.flatnonzero(self.alphas == alpha)
        if not hits.size:
            raise DegenerateDataError(f"shell {alpha} not in ledger range {self.alphas[0]}..{self.alphas[-1]}")
        return int(hits[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'alpha': self.alphas,
            'E': self.energies,
            'D': self.dissipations,
            'J_le': self.cumulative,
        })

    def flux_triplets(self) -> pd.DataFrame:
        """Nonzero F_{β→α} as sparse (beta, alpha, F) rows."""
        rows, cols = np.nonzero(self.flux)
        return pd.DataFrame({
            'beta': self.alphas[cols],
            'alpha': self.alphas[rows],
            'F': self.flux[rows, cols],
        })


@dataclass
class BalanceReport:
    """Residuals of the shell balance law on unflagged stencils."""
    alphas: np.ndarray
    times: np.ndarray
    residuals: np.ndarray  # steps × shells
    dissipations: np.ndarray  # steps × shells, at the stencil centre
    crossing_times: List[float]
    excluded_steps: int

    @property
    def max_residual(self) -> float:
        return float(np.abs(self.residuals).max()) if self.residuals.size else 0.0

    @property
    def rms_residual(self) -> float:
        return float(np.sqrt(np.mean(self.residuals ** 2))) if self.residuals.size else 0.0

    @property
    def max_dissipation(self) -> float:
        return float(self.dissipations.max()) if self.dissipations.size else 0.0

    def remainder_ratio(self, floor: float = 1e-300) -> np.ndarray:
        """Mean |R_α| / D_α per shell over the audited steps."""
        return np.mean(np.abs(self.residuals) / np.maximum(self.dissipations, floor), axis=0)

    def to_dict(self) -> dict:
        return {
            'alphas': [int(a) for a in self.alphas],
            'max_residual': self.max_residual,
            'rms_residual': self.rms_residual,
            'max_dissipation': self.max_dissipation,
            'audited_steps': int(len(self.times)),
            'excluded_steps': self.excluded_steps,
            'crossing_times': [float(t) for t in self.crossing_times],
        }


def default_lambda0(snap: SpectralSnapshot, q: float = DEFAULT_Q) -> float:
    """Median retained eigenvalue rounded down onto the q^k grid."""
    positive = snap.eigenvalues[snap.eigenvalues > 0]
    if not positive.size:
        raise DegenerateDataError("no positive eigenvalues to anchor the shell grid")
    return float(q ** np.floor(np.log(np.median(positive)) / np.log(q)))


def partition(snap: SpectralSnapshot, lambda0: float, q: float = DEFAULT_Q) -> Tuple[ShellPartition, np.ndarray]:
    """Assign every retained mode to its logarithmic shell.

    Returns:
        (partition spanning the occupied shells, membership array of α per mode)
    """
    lam = snap.eigenvalues
    if np.any(lam <= 0):
        raise DegenerateDataError(f"nonpositive eigenvalue among retained modes at t={snap.timestamp}")
    unbounded = ShellPartition(lambda0, q)
    membership = unbounded.shell_index(lam)
    if not membership.size:
        return unbounded, membership
    return ShellPartition(lambda0, q, int(membership.min()), int(membership.max())), membership


def _alpha_axis(membership: np.ndarray, alphas: Optional[np.ndarray]) -> np.ndarray:
    if alphas is not None:
        return np.asarray(alphas, dtype=int)
    if not membership.size:
        return np.zeros(0, dtype=int)
    return np.arange(membership.min(), membership.max() + 1)


def _indicator(membership: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """S[a, u] = 1 when mode u sits in shell alphas[a]."""
    S = (alphas[:, None] == membership[None, :]).astype(float)
    if membership.size and not np.all(S.sum(axis=0) == 1):
        raise DimensionError("membership contains shells outside the requested alpha range")
    return S


def shell_energies(g: ModeState, membership: np.ndarray, alphas: Optional[np.ndarray] = None) -> np.ndarray:
    """E_α = ½ Σ_{u∈S_α} g_u²; empty shells report 0."""
    alphas = _alpha_axis(membership, alphas)
    return 0.5 * (_indicator(membership, alphas) @ g.amplitudes ** 2)


def dissipation(
    g: ModeState,
    snap: SpectralSnapshot,
    membership: np.ndarray,
    alphas: Optional[np.ndarray] = None,
) -> np.ndarray:
    """D_α = Σ_{u∈S_α} λ_u g_u²."""
    alphas = _alpha_axis(membership, alphas)
    return _indicator(membership, alphas) @ (snap.eigenvalues * g.amplitudes ** 2)


def _pair_terms(g: ModeState, omega: CouplingMatrix) -> np.ndarray:
    """P[u, v] = g_u g_v Ω_{v→u}."""
    a = g.amplitudes
    return a[:, None] * omega.entries * a[None, :]


def intershell_flux(
    g: ModeState,
    omega: CouplingMatrix,
    membership: np.ndarray,
    alphas: Optional[np.ndarray] = None,
) -> np.ndarray:
    """F_{β→α} = −Σ_{u∈S_α, v∈S_β} g_v g_u Ω_{v→u}; diagonal is zero.

    The result is antisymmetrized so F_{β→α} = −F_{α→β} holds bitwise.
    """
    alphas = _alpha_axis(membership, alphas)
    S = _indicator(membership, alphas)
    F = -(S @ _pair_terms(g, omega) @ S.T)
    F = 0.5 * (F - F.T)
    np.fill_diagonal(F, 0.0)
    return F


def internal_coupling_sum(
    g: ModeState,
    omega: CouplingMatrix,
    membership: np.ndarray,
    alphas: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Σ_{u,v∈S_α, v≠u} g_v g_u Ω_{v→u} per shell; vanishes identically."""
    alphas = _alpha_axis(membership, alphas)
    S = _indicator(membership, alphas)
    return np.einsum('au,uv,av->a', S, _pair_terms(g, omega), S)


def internal_coupling_gross(
    g: ModeState,
    omega: CouplingMatrix,
    membership: np.ndarray,
    alphas: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Σ |g_v g_u Ω_{v→u}| per shell, the scale the cancellation is judged against."""
    alphas = _alpha_axis(membership, alphas)
    S = _indicator(membership, alphas)
    return np.einsum('au,uv,av->a', S, np.abs(_pair_terms(g, omega)), S)


def cumulative_flux(flux: np.ndarray, alpha: int, alphas: Optional[np.ndarray] = None) -> float:
    """J_{≤α} = Σ_{β>α} Σ_{γ≤α} F_{β→γ}."""
    alphas = np.arange(flux.shape[0]) if alphas is None else np.asarray(alphas)
    low = alphas <= alpha
    high = alphas > alpha
    return float(flux[np.ix_(low, high)].sum())


def build_ledger(
    g: ModeState,
    snap: SpectralSnapshot,
    omega: Optional[CouplingMatrix],
    membership: np.ndarray,
    alphas: Optional[np.ndarray] = None,
) -> ShellLedger:
    """Assemble every per-shell quantity for one timestep.

    Without a coupling matrix (trajectory endpoints) fluxes are zero.
    """
    alphas = _alpha_axis(membership, alphas)
    if omega is None:
        flux = np.zeros((alphas.size, alphas.size))
        internal = gross = np.zeros(alphas.size)
    else:
        flux = intershell_flux(g, omega, membership, alphas)
        internal = internal_coupling_sum(g, omega, membership, alphas)
        gross = internal_coupling_gross(g, omega, membership, alphas)
    return ShellLedger(
        timestamp=g.timestamp,
        alphas=alphas,
        energies=shell_energies(g, membership, alphas),
        dissipations=dissipation(g, snap, membership, alphas),
        flux=flux,
        cumulative=np.array([cumulative_flux(flux, a, alphas) for a in alphas]),
        membership=np.asarray(membership, dtype=int),
        internal=internal,
        internal_gross=gross,
        usable=snap.usable and omega is not None,
    )


def _membership_stable(window: Sequence[ShellLedger]) -> bool:
    first = window[0].membership
    return all(l.membership.shape == first.shape and np.array_equal(l.membership, first) for l in window[1:])


def balance_audit(ledgers: Sequence[ShellLedger], dt: float) -> BalanceReport:
    """Residual dE_α/dt + D_α − Σ_{β≠α} F_{β→α} on stencils with fixed membership.

    Stencils where a mode changed shell are reported as crossings; stencils
    whose centre ledger has no coupling (alignment failure) are excluded.

    Raises:
        DegenerateDataError: every interior stencil was flagged
    """
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if len(ledgers) < 3:
        raise DegenerateDataError(f"balance_audit needs >= 3 ledgers, got {len(ledgers)}")
    alphas = ledgers[0].alphas
    if any(not np.array_equal(l.alphas, alphas) for l in ledgers):
        raise DimensionError("ledgers along a trajectory must share one alpha axis")

    residuals, dissipations, times, crossings = [], [], [], []
    excluded = 0
    for k in range(1, len(ledgers) - 1):
        window = ledgers[k - 1:k + 2]
        if not _membership_stable(window):
            crossings.append(ledgers[k].timestamp)
            excluded += 1
            continue
        if not ledgers[k].usable:
            excluded += 1
            continue
        dE = (ledgers[k + 1].energies - ledgers[k - 1].energies) / (2 * dt)
        residuals.append(dE + ledgers[k].dissipations - ledgers[k].net_flux)
        dissipations.append(ledgers[k].dissipations)
        times.append(ledgers[k].timestamp)

    if not residuals:
        logger.error(f"Balance audit: all {excluded} interior stencils flagged")
        raise DegenerateDataError("every balance-audit stencil was flagged")
    if crossings:
        logger.info(f"Balance audit: {len(crossings)} shell-crossing stencils skipped")
    return BalanceReport(
        alphas=alphas,
        times=np.array(times),
        residuals=np.vstack(residuals),
        dissipations=np.vstack(dissipations),
        crossing_times=crossings,
        excluded_steps=excluded,
    )


def renormalizability_ratio(
    ledgers: Sequence[ShellLedger],
    alpha: int,
    window: Optional[Tuple[float, float]] = None,
) -> float:
    """∫|J_{≤α}| dt / ∫D_α dt over a time window (trapezoid rule).

    Returns inf when the shell never dissipates inside the window.
    """
    selected = [l for l in ledgers
                if window is None or window[0] <= l.timestamp <= window[1]]
    if len(selected) < 2:
        raise DegenerateDataError(f"need >= 2 ledgers inside window {window}, got {len(selected)}")
    t = np.array([l.timestamp for l in selected])
    pos = selected[0].position(alpha)
    J = np.array([abs(l.cumulative[pos]) for l in selected])
    D = np.array([l.dissipations[pos] for l in selected])
    denom = trapezoid(D, t)
    return float(trapezoid(J, t) / denom) if denom > 0 else float('inf')


def total_energy_increases(ledgers: Sequence[ShellLedger]) -> np.ndarray:
    """Per-step increases of Σ_α E_α (zero where the total decreased)."""
    totals = np.array([l.total_energy for l in ledgers])
    return np.maximum(np.diff(totals), 0.0)


def coarsen(part: ShellPartition, membership: np.ndarray) -> Tuple[ShellPartition, np.ndarray]:
    """Re-partition with q → q²: shells 2α and 2α+1 merge into α."""
    merged = np.floor_divide(np.asarray(membership, dtype=int), 2)
    coarse = ShellPartition(
        part.lambda0, part.q ** 2,
        int(np.floor_divide(part.alpha_min, 2)), int(np.floor_divide(part.alpha_max, 2)),
    )
    return coarse, merged
