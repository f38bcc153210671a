"""Macroscopic transport–dissipation engine on a logarithmic λ grid.

The energy density ε(λ, t) obeys

    ∂_t ε + ∂_λ(v ε) = −2λ ε,   v(λ, t) = −c(t) λ^b

Marching uses the effective time τ = ∫c dt as the clock. In τ the drift
speed is −λ^b regardless of the schedule, and the dissipation of each step
is applied exactly as e^{−2λ Δt} with Δt the physical time the step spans.
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
import statsmodels.api as sm
import xarray as xr
from scipy import integrate, optimize

from models.errors import ConfigError, DegenerateDataError, DivergenceError

logger = logging.getLogger(__name__)

SCHEDULES = ('constant', 'power', 'off')
DENSITY_FLOOR = 1e-300
BOUNDARY_CELLS = 2
CENTRAL_FRACTION = 0.6
MIN_FIT_POINTS = 8


class Landing(Enum):
    HIT_FLOOR = 'hit-floor'


HIT_FLOOR = Landing.HIT_FLOOR


@dataclass
class DriftSpec:
    """Effective drift law v(λ, t) = −c(t) λ^b.

    ``schedule`` selects c(t): 'constant' (c0), 'power' (c0·t^(time_exponent−1))
    or 'off' (no drift; the effective clock is then physical time).
    """
    b: float = 2.0
    schedule: str = 'constant'
    c0: float = 1.0
    time_exponent: float = 1.0
    K: Optional[float] = None

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.b > 0:
            raise ValueError(f"drift exponent b must be positive, got {self.b}")
        if not self.c0 > 0:
            raise ValueError(f"c0 must be positive, got {self.c0}")
        if not self.time_exponent > 0:
            raise ValueError(f"time_exponent must be positive, got {self.time_exponent}")
        if self.K is not None and self.K < 0:
            raise ValueError(f"K must be nonnegative, got {self.K}")

    @property
    def enabled(self) -> bool:
        return self.schedule != 'off'

    @property
    def clock_exponent(self) -> float:
        """α in τ(t) = t^α L(t)."""
        return self.time_exponent if self.schedule == 'power' else 1.0

    def rate(self, t: float) -> float:
        """c(t)."""
        if self.schedule == 'power':
            if t <= 0:
                return 0.0 if self.time_exponent > 1 else np.inf
            return self.c0 * t ** (self.time_exponent - 1.0)
        if self.schedule == 'off':
            return 1.0
        return self.c0

    def velocity(self, lam: np.ndarray, t: float) -> np.ndarray:
        if not self.enabled:
            return np.zeros_like(np.asarray(lam, dtype=float))
        return -self.rate(t) * np.asarray(lam, dtype=float) ** self.b

    def with_K(self, K: float) -> 'DriftSpec':
        return DriftSpec(self.b, self.schedule, self.c0, self.time_exponent, K)

    def to_dict(self) -> dict:
        return {'b': self.b, 'schedule': self.schedule, 'c0': self.c0,
                'time_exponent': self.time_exponent, 'K': self.K}


@dataclass
class LogGrid:
    """Log-uniform cells between lam_min and lam_max."""
    lam_min: float = 1e-4
    lam_max: float = 10.0
    cells_per_decade: int = 64

    def __post_init__(self):
        if not 0 < self.lam_min < self.lam_max:
            raise ValueError(f"need 0 < lam_min < lam_max, got [{self.lam_min}, {self.lam_max}]")
        if self.cells_per_decade < 1:
            raise ValueError(f"cells_per_decade must be >= 1, got {self.cells_per_decade}")
        decades = np.log10(self.lam_max / self.lam_min)
        n = max(1, int(round(decades * self.cells_per_decade)))
        self.edges = self.lam_min * (self.lam_max / self.lam_min) ** (np.arange(n + 1) / n)
        self.edges[-1] = self.lam_max
        self.centers = np.sqrt(self.edges[:-1] * self.edges[1:])
        self.widths = np.diff(self.edges)

    @property
    def size(self) -> int:
        return self.centers.size

    @property
    def log_spacing(self) -> float:
        return float(np.log(self.edges[1] / self.edges[0]))

    def refined(self) -> 'LogGrid':
        return LogGrid(self.lam_min, self.lam_max, 2 * self.cells_per_decade)

    def cell_of(self, lam: float) -> int:
        return int(np.clip(np.searchsorted(self.edges, lam, side='right') - 1, 0, self.size - 1))

    def to_dict(self) -> dict:
        return {'lam_min': self.lam_min, 'lam_max': self.lam_max,
                'cells_per_decade': self.cells_per_decade}


@dataclass
class DensityField:
    """ε per cell at effective time tau (physical time t)."""
    grid: LogGrid
    values: np.ndarray
    tau: float = 0.0
    t: float = 0.0
    outflow: float = 0.0  # cumulative mass absorbed at lam_min

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError(f"values shape {self.values.shape} != grid size {self.grid.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"density at tau={self.tau} has non-finite values")
        if np.any(self.values < 0):
            raise ValueError(f"density at tau={self.tau} has negative values")

    @property
    def mass(self) -> float:
        return float(np.sum(self.values * self.grid.widths))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'tau': self.tau,
            'lambda_center': self.grid.centers,
            'epsilon': self.values,
        })


class PowerLawFit(NamedTuple):
    slope: float
    stderr: float
    intercept: float
    r2: float
    window: Tuple[float, float]
    n_points: int


class GrsdFit(NamedTuple):
    A: float
    K: float
    goodness: float
    window: Tuple[float, float]
    n_points: int


class DriftFit(NamedTuple):
    b: float
    c: float
    stderr: float
    r2: float


# --- effective time and characteristics -------------------------------------

def effective_time(drift: DriftSpec, t):
    """τ(t) = ∫₀ᵗ c(s) ds in closed form (scalar or array t)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ConfigError(f"t must be nonnegative, got {t}")
    if drift.schedule == 'power':
        a = drift.time_exponent
        tau = drift.c0 * t_arr ** a / a
    elif drift.schedule == 'off':
        tau = t_arr
    else:
        tau = drift.c0 * t_arr
    return float(tau) if tau.ndim == 0 else tau


def physical_time(drift: DriftSpec, tau: float) -> float:
    """Inverse of :func:`effective_time`."""
    if tau < 0:
        raise ConfigError(f"tau must be nonnegative, got {tau}")
    if drift.schedule == 'power':
        a = drift.time_exponent
        return (a * tau / drift.c0) ** (1.0 / a)
    if drift.schedule == 'off':
        return float(tau)
    return tau / drift.c0


def subcritical_hit_time(lambda0: float, b: float) -> float:
    """τ_hit = λ_0^{1−b} / (1−b), when a b<1 characteristic reaches λ = 0."""
    if not 0 < b < 1:
        raise ConfigError(f"subcritical hit time needs 0 < b < 1, got {b}")
    if not lambda0 > 0:
        raise ConfigError(f"lambda0 must be positive, got {lambda0}")
    return lambda0 ** (1.0 - b) / (1.0 - b)


def characteristic(lambda0: float, drift: DriftSpec, tau: float) -> Union[float, Landing]:
    """Position at effective time tau of the characteristic started at lambda0."""
    if not lambda0 > 0:
        raise ConfigError(f"lambda0 must be positive, got {lambda0}")
    if not drift.enabled:
        return float(lambda0)
    b = drift.b
    if b == 1.0:
        return float(lambda0 * np.exp(-tau))
    if b < 1.0 and tau >= subcritical_hit_time(lambda0, b):
        return HIT_FLOOR
    base = lambda0 ** (1.0 - b) + (b - 1.0) * tau
    return float(base ** (1.0 / (1.0 - b)))


def _lambda_along(lambda0: float, drift: DriftSpec, s: np.ndarray) -> np.ndarray:
    """λ(s) on a physical-time grid; zero once the floor is reached."""
    if not drift.enabled:
        return np.full_like(s, lambda0)
    tau = effective_time(drift, s)
    b = drift.b
    if b == 1.0:
        return lambda0 * np.exp(-tau)
    base = lambda0 ** (1.0 - b) + (b - 1.0) * tau
    return np.where(base > 0, np.maximum(base, np.finfo(float).tiny) ** (1.0 / (1.0 - b)), 0.0)


def _simpson(lambda0: float, drift: DriftSpec, t: float, n: int) -> float:
    s = np.linspace(0.0, t, n + 1)
    return float(integrate.simpson(2.0 * _lambda_along(lambda0, drift, s), x=s))


def dissipation_action(
    lambda0: float,
    drift: DriftSpec,
    t: float,
    steps: int = 128,
    rtol: float = 1e-10,
    max_doublings: int = 14,
) -> float:
    """Φ(t) = ∫₀ᵗ 2λ(s) ds along the characteristic.

    Composite Simpson with step doubling; once successive estimates agree to
    ``rtol`` the Richardson-extrapolated value is returned.
    """
    if steps < 100:
        raise ConfigError(f"steps must be >= 100, got {steps}")
    if t < 0:
        raise ConfigError(f"t must be nonnegative, got {t}")
    if t == 0:
        return 0.0
    n = steps + steps % 2
    coarse = _simpson(lambda0, drift, t, n)
    for _ in range(max_doublings):
        n *= 2
        fine = _simpson(lambda0, drift, t, n)
        if abs(fine - coarse) <= rtol * abs(fine):
            return fine + (fine - coarse) / 15.0
        coarse = fine
    logger.warning(f"dissipation_action did not reach rtol={rtol} after {max_doublings} doublings")
    return fine


# --- PDE solver --------------------------------------------------------------

def courant_number(grid: LogGrid, drift: DriftSpec, dtau: float) -> float:
    """max over faces of the log-space speed λ_face^{b−1}·dτ / Δlog λ."""
    if not drift.enabled:
        return 0.0
    return float(np.max(grid.edges[:-1] ** (drift.b - 1.0) * dtau / grid.log_spacing))


def evolve_density(
    init: DensityField,
    drift: DriftSpec,
    dtau: float,
    steps: int,
    dissipation: bool = True,
    record_every: int = 1,
    source: Optional[np.ndarray] = None,
) -> List[DensityField]:
    """March the transport–dissipation equation with first-order upwinding.

    Cells are upwinded in log λ, where the drift speed is λ^{b−1}: the flux
    through a face is λ_face^{b−1} times the mass of the cell above it per
    unit log λ. No energy enters through lam_max; what crosses lam_min is
    absorbed and tallied in ``outflow``. With drift off, dtau is a physical
    time step.

    Returns:
        Snapshots every ``record_every`` steps, the initial field first.

    Raises:
        DivergenceError: CFL number above 1 or a negative density
    """
    if not dtau > 0:
        raise ConfigError(f"dtau must be positive, got {dtau}")
    if steps < 0 or record_every < 1:
        raise ConfigError(f"invalid steps={steps} / record_every={record_every}")
    if source is not None:
        source = np.asarray(source, dtype=float)
        if source.shape != init.values.shape or np.any(source < 0):
            raise ConfigError(f"source must be a nonnegative array of shape {init.values.shape}")

    grid = init.grid
    cfl = courant_number(grid, drift, dtau)
    if cfl > 1.0:
        logger.error(f"CFL violation: Courant number {cfl:.3f} > 1 (dtau={dtau})")
        raise DivergenceError(f"CFL condition violated: Courant number {cfl:.3f} > 1")

    speed = grid.edges ** (drift.b - 1.0) if drift.enabled else np.zeros(grid.edges.size)
    eps = init.values.copy()
    tau, t, outflow = init.tau, init.t, init.outflow
    history = [DensityField(grid, eps.copy(), tau, t, outflow)]

    for step in range(1, steps + 1):
        if drift.enabled:
            # face_flux[i] is the leftward mass flux through edge i
            face_flux = np.zeros(grid.edges.size)
            face_flux[:-1] = speed[:-1] * eps * grid.widths / grid.log_spacing
            eps = eps + dtau / grid.widths * (face_flux[1:] - face_flux[:-1])
            outflow += dtau * face_flux[0]
        if source is not None:
            eps = eps + dtau * source
        tau_next = tau + dtau
        t_next = physical_time(drift, tau_next)
        if dissipation:
            eps = eps * np.exp(-2.0 * grid.centers * (t_next - t))
        tau, t = tau_next, t_next

        if np.any(eps < 0):
            logger.error(f"Negative density at step {step} (tau={tau:.4g})")
            raise DivergenceError(f"negative density at tau={tau}")
        if step % record_every == 0 or step == steps:
            history.append(DensityField(grid, eps.copy(), tau, t, outflow))

    logger.debug(f"evolve_density: {steps} steps to tau={tau:.4g}, CFL {cfl:.3f}, outflow {outflow:.3e}")
    return history


def density_history(fields: Sequence[DensityField]) -> xr.Dataset:
    """Stack snapshots into a (tau × lambda) dataset."""
    grid = fields[0].grid
    return xr.Dataset(
        {
            'epsilon': (('tau', 'lam'), np.vstack([f.values for f in fields])),
            't': (('tau',), np.array([f.t for f in fields])),
            'outflow': (('tau',), np.array([f.outflow for f in fields])),
        },
        coords={'tau': [f.tau for f in fields], 'lam': grid.centers, 'width': ('lam', grid.widths)},
    )


def pulse_center(field: DensityField) -> float:
    """Mass-weighted geometric mean of λ."""
    w = field.values * field.grid.widths
    if w.sum() <= 0:
        raise DegenerateDataError(f"empty density at tau={field.tau}")
    return float(np.exp(np.sum(w * np.log(field.grid.centers)) / w.sum()))


# --- templates and diagnostics ----------------------------------------------

def grsd_template(lam, A: float, drift: DriftSpec, tau: float):
    """ε = A·λ^{−b}·exp(−K·λ^{b−1}·τ)."""
    if drift.K is None:
        raise ConfigError("grsd_template needs a cutoff constant K in the drift spec")
    lam = np.asarray(lam, dtype=float)
    return A * lam ** (-drift.b) * np.exp(-drift.K * lam ** (drift.b - 1.0) * tau)


def grsd_template_rms(lam, A: float, drift: DriftSpec, tau: float):
    """g = √(2ε) = √(2A)·λ^{−b/2}·exp(−½K·λ^{b−1}·τ)."""
    return np.sqrt(2.0 * grsd_template(lam, A, drift, tau))


def rms_amplitude(field: DensityField) -> np.ndarray:
    return np.sqrt(2.0 * field.values)


def template_field(grid: LogGrid, A: float, drift: DriftSpec, tau: float) -> DensityField:
    return DensityField(grid, grsd_template(grid.centers, A, drift, tau), tau, physical_time(drift, tau))


def template_loss_oracle(A: float, drift: DriftSpec, tau: float, lam_min: float, lam_max: float) -> float:
    """Adaptive quadrature of the template over [lam_min, lam_max] (in log λ)."""
    value, _ = integrate.quad(
        lambda u: float(grsd_template(np.exp(u), A, drift, tau)) * np.exp(u),
        np.log(lam_min), np.log(lam_max),
        epsabs=0.0, epsrel=1e-12, limit=400,
    )
    return value


def loss_from_density(field: DensityField) -> float:
    """L = Σ ε_i Δλ_i."""
    return field.mass


def closed_form_loss_exponent(b: float) -> float:
    """−(b−2)/(b−1), the frontier-dominated prediction for the loss exponent."""
    if b == 1.0:
        raise ConfigError("closed-form loss exponent is undefined at b = 1")
    return -(b - 2.0) / (b - 1.0)


def frontier_exponent(b: float) -> float:
    """−1/(b−1): λ* ∝ τ^{−1/(b−1)}."""
    if b <= 1.0:
        raise ConfigError(f"no power-law frontier for b <= 1, got {b}")
    return -1.0 / (b - 1.0)


def action_frontier(drift: DriftSpec, tau: float, lam_max: float, drop: float = np.exp(-1.0)) -> float:
    """λ* where the exact cutoff factor e^{−Φ} along the characteristic equals ``drop``.

    Φ is :func:`dissipation_action` from the foot of the characteristic
    through (λ, τ). Nothing enters through lam_max, so density above the
    image of lam_max is zero and λ* never exceeds it.

    Raises:
        DegenerateDataError: the factor is below ``drop`` across the range
    """
    if not drift.enabled or drift.b <= 1.0:
        raise ConfigError(f"action frontier needs supercritical drift, got {drift.to_dict()}")
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if not 0 < drop < 1:
        raise ConfigError(f"drop must lie in (0, 1), got {drop}")
    b, t, target = drift.b, physical_time(drift, tau), -np.log(drop)
    top = characteristic(lam_max, drift, tau)

    def excess(log_lam: float) -> float:
        lam = np.exp(log_lam)
        base = max(lam ** (1.0 - b) - (b - 1.0) * tau, lam_max ** (1.0 - b))
        foot = base ** (1.0 / (1.0 - b))
        return dissipation_action(foot, drift, t) - target

    hi = np.log(top)
    if excess(hi) <= 0:
        return float(top)
    lo = hi - np.log(1e8)
    if excess(lo) > 0:
        raise DegenerateDataError(f"exact cutoff factor below {drop:.3g} down to lambda={np.exp(lo):.3g}")
    return float(np.exp(optimize.brentq(excess, lo, hi, xtol=1e-12, rtol=1e-10)))


# --- fitting -----------------------------------------------------------------

def _ols(x: np.ndarray, y: np.ndarray):
    return sm.OLS(y, sm.add_constant(x, has_constant='add')).fit()


def _r2(result) -> float:
    r2 = result.rsquared
    return float(r2) if np.isfinite(r2) else 1.0


def default_window(field: DensityField, floor: float = DENSITY_FLOOR) -> Tuple[float, float]:
    """Central 60% (in log λ) of the usable cells, two boundary cells dropped."""
    usable = np.flatnonzero(field.values > floor)
    if usable.size <= 2 * BOUNDARY_CELLS:
        raise DegenerateDataError(f"only {usable.size} usable cells at tau={field.tau}")
    lo = field.grid.centers[usable[BOUNDARY_CELLS]]
    hi = field.grid.centers[usable[-BOUNDARY_CELLS - 1]]
    span = np.log(hi / lo)
    trim = 0.5 * (1.0 - CENTRAL_FRACTION) * span
    return float(lo * np.exp(trim)), float(hi * np.exp(-trim))


def _window_cells(field: DensityField, window: Tuple[float, float], floor: float) -> np.ndarray:
    c = field.grid.centers
    inside = (c >= window[0] * (1 - 1e-12)) & (c <= window[1] * (1 + 1e-12)) & (field.values > floor)
    return np.flatnonzero(inside)


def fit_tail_exponent(
    field: DensityField,
    window: Optional[Tuple[float, float]] = None,
    floor: float = DENSITY_FLOOR,
) -> PowerLawFit:
    """Least-squares slope of log ε against log λ inside the window.

    Raises:
        DegenerateDataError: fewer than 8 cells above the density floor
    """
    if window is None:
        window = default_window(field, floor)
    cells = _window_cells(field, window, floor)
    if cells.size < MIN_FIT_POINTS:
        raise DegenerateDataError(
            f"tail fit needs >= {MIN_FIT_POINTS} cells in window {window}, got {cells.size}"
        )
    result = _ols(np.log(field.grid.centers[cells]), np.log(field.values[cells]))
    return PowerLawFit(
        slope=float(result.params[1]),
        stderr=float(result.bse[1]),
        intercept=float(result.params[0]),
        r2=_r2(result),
        window=tuple(window),
        n_points=int(cells.size),
    )


def _amplitude_below(field: DensityField, b: float, window: Tuple[float, float], floor: float) -> float:
    """A from the below-frontier window: intercept of log(ελ^b) vs λ^{b−1}."""
    cells = _window_cells(field, window, floor)
    if cells.size < 2:
        raise DegenerateDataError(f"no usable cells below the frontier in window {window}")
    lam = field.grid.centers[cells]
    y = np.log(field.values[cells]) + b * np.log(lam)
    if b == 1.0 or cells.size < 3:
        return float(np.exp(y.mean()))
    return float(np.exp(_ols(lam ** (b - 1.0), y).params[0]))


def frontier(
    field: DensityField,
    drop: float = np.exp(-1.0),
    b: Optional[float] = None,
    amplitude: Optional[float] = None,
    window: Optional[Tuple[float, float]] = None,
    floor: float = DENSITY_FLOOR,
) -> float:
    """Largest λ where the cutoff factor ε/(A·λ^{−b}) is still ≥ drop.

    ``b`` defaults to minus the fitted tail slope; ``A`` is estimated from
    the lower 30% (log λ) of the usable cells. The crossing is interpolated
    linearly in (log λ, log(−log factor)), exact for the GRSD template.
    Returns the grid top when nothing is suppressed.

    Raises:
        DegenerateDataError: the factor is below ``drop`` everywhere
    """
    if not 0 < drop < 1:
        raise ConfigError(f"drop must lie in (0, 1), got {drop}")
    grid = field.grid
    if b is None:
        b = -fit_tail_exponent(field, floor=floor).slope
    if amplitude is None:
        usable = np.flatnonzero(field.values > floor)
        if usable.size <= 2 * BOUNDARY_CELLS:
            raise DegenerateDataError(f"only {usable.size} usable cells at tau={field.tau}")
        lo = grid.centers[usable[BOUNDARY_CELLS]]
        hi = grid.centers[usable[-BOUNDARY_CELLS - 1]]
        window = window or (lo, lo * (hi / lo) ** 0.3)
        amplitude = _amplitude_below(field, b, window, floor)

    factor = field.values * grid.centers ** b / amplitude
    above = np.flatnonzero(factor >= drop)
    if not above.size:
        raise DegenerateDataError(f"cutoff factor below {drop:.3g} across the grid at tau={field.tau}")
    i = int(above[-1])
    if i == grid.size - 1:
        return float(grid.edges[-1])

    f_lo, f_hi = factor[i], factor[i + 1]
    x_lo, x_hi = np.log(grid.centers[i]), np.log(grid.centers[i + 1])
    if f_hi <= 0 or f_lo >= 1:
        return float(np.exp(0.5 * (x_lo + x_hi)))
    y_lo, y_hi = np.log(-np.log(f_lo)), np.log(-np.log(f_hi))
    y_star = np.log(-np.log(drop))
    x_star = x_lo + (y_star - y_lo) * (x_hi - x_lo) / (y_hi - y_lo)
    return float(np.exp(np.clip(x_star, x_lo, x_hi)))


def fit_scaling_exponent(
    series: Sequence[Tuple[float, float]],
    window: Optional[Tuple[float, float]] = None,
) -> PowerLawFit:
    """Log-log slope of value against tau.

    Raises:
        DegenerateDataError: fewer than 8 points in the window, or a
            nonpositive value inside it
    """
    data = np.asarray(series, dtype=float).reshape(-1, 2)
    tau, value = data[:, 0], data[:, 1]
    if window is None:
        positive_tau = tau[tau > 0]
        if not positive_tau.size:
            raise DegenerateDataError("no positive tau in series")
        window = (float(positive_tau.min()), float(positive_tau.max()))
    inside = (tau >= window[0]) & (tau <= window[1]) & (tau > 0)
    if inside.sum() < MIN_FIT_POINTS:
        raise DegenerateDataError(f"scaling fit needs >= {MIN_FIT_POINTS} points in {window}, got {inside.sum()}")
    if np.any(value[inside] <= 0):
        raise DegenerateDataError(f"nonpositive values inside scaling window {window}")
    result = _ols(np.log(tau[inside]), np.log(value[inside]))
    return PowerLawFit(
        slope=float(result.params[1]),
        stderr=float(result.bse[1]),
        intercept=float(result.params[0]),
        r2=_r2(result),
        window=tuple(window),
        n_points=int(inside.sum()),
    )


def fit_grsd(
    field: DensityField,
    b: float,
    window: Optional[Tuple[float, float]] = None,
    floor: float = DENSITY_FLOOR,
) -> GrsdFit:
    """Fit A and K of the template with b fixed.

    Regresses log ε + b·log λ on λ^{b−1}·τ: the intercept is log A and the
    slope is −K. Goodness is the R² of that regression.

    Raises:
        DegenerateDataError: b = 1, tau = 0, or too few cells in the window
    """
    if b == 1.0 or field.tau <= 0:
        raise DegenerateDataError(f"transformed coordinate is constant (b={b}, tau={field.tau})")
    if window is None:
        window = default_window(field, floor)
    cells = _window_cells(field, window, floor)
    if cells.size < 3:
        raise DegenerateDataError(f"GRSD fit needs >= 3 cells in window {window}, got {cells.size}")
    lam = field.grid.centers[cells]
    x = lam ** (b - 1.0) * field.tau
    y = np.log(field.values[cells]) + b * np.log(lam)
    result = _ols(x, y)
    return GrsdFit(
        A=float(np.exp(result.params[0])),
        K=float(-result.params[1]),
        goodness=_r2(result),
        window=tuple(window),
        n_points=int(cells.size),
    )


def fit_drift_exponent(lambdas: np.ndarray, velocities: np.ndarray) -> DriftFit:
    """Estimate v ≈ −c λ^b from per-mode eigenvalue velocities (v < 0 only)."""
    lambdas = np.asarray(lambdas, dtype=float)
    velocities = np.asarray(velocities, dtype=float)
    keep = (velocities < 0) & (lambdas > 0)
    if keep.sum() < 3:
        raise DegenerateDataError(f"drift fit needs >= 3 receding modes, got {keep.sum()}")
    result = _ols(np.log(lambdas[keep]), np.log(-velocities[keep]))
    return DriftFit(
        b=float(result.params[1]),
        c=float(np.exp(result.params[0])),
        stderr=float(result.bse[1]),
        r2=_r2(result),
    )


# --- regime diagnostics ------------------------------------------------------

def transport_ratio(drift: DriftSpec, lam, t: float):
    """|v|/λ = c(t)·λ^{b−1}; zero when drift is off."""
    lam = np.asarray(lam, dtype=float)
    if not drift.enabled:
        return np.zeros_like(lam)
    return drift.rate(t) * lam ** (drift.b - 1.0)


def classify_transport(ratio: float) -> str:
    if ratio < 0.1:
        return 'lazy'
    if ratio >= 1.0:
        return 'feature-learning'
    return 'mixed'


def slow_variation_ratio(drift: DriftSpec, t: float, k: float = 2.0) -> float:
    """L(kt)/L(t) with L(t) = τ(t)/t^α; tends to 1 for a regularly varying clock."""
    if t <= 0 or k <= 0:
        raise ConfigError(f"t and k must be positive, got t={t}, k={k}")
    a = drift.clock_exponent
    return (effective_time(drift, k * t) / (k * t) ** a) / (effective_time(drift, t) / t ** a)


def classify_regime(drift: Optional[DriftSpec]) -> str:
    if drift is None or not drift.enabled:
        return 'lazy'
    if np.isclose(drift.b, 1.0):
        return 'critical'
    return 'subcritical' if drift.b < 1.0 else 'supercritical'
