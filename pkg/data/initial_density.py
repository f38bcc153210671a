"""Initial energy-density fields for the transport solver."""

import logging

import numpy as np

from models.errors import ConfigError
from models.transport import DensityField, DriftSpec, LogGrid, grsd_template

logger = logging.getLogger(__name__)

SHAPES = ('pulse', 'power-law', 'flat', 'template')


def pulse(grid: LogGrid, center: float, width_decades: float = 0.05, mass: float = 1.0) -> DensityField:
    """Gaussian bump in log10 λ normalized to the requested mass."""
    if not grid.lam_min < center < grid.lam_max:
        raise ConfigError(f"pulse center {center} outside grid [{grid.lam_min}, {grid.lam_max}]")
    if not width_decades > 0:
        raise ConfigError(f"width_decades must be positive, got {width_decades}")
    profile = np.exp(-0.5 * ((np.log10(grid.centers) - np.log10(center)) / width_decades) ** 2)
    total = np.sum(profile * grid.widths)
    return DensityField(grid, mass * profile / total)


def power_law(grid: LogGrid, A: float = 1.0, b: float = 0.0) -> DensityField:
    """ε = A·λ^{−b}; b = 0 gives a flat field."""
    return DensityField(grid, A * grid.centers ** (-b))


def flat(grid: LogGrid, level: float = 1.0) -> DensityField:
    return DensityField(grid, np.full(grid.size, float(level)))


def from_template(grid: LogGrid, A: float, drift: DriftSpec, tau: float) -> DensityField:
    return DensityField(grid, grsd_template(grid.centers, A, drift, tau), tau)


def build(shape: str, grid: LogGrid, **params) -> DensityField:
    """Dispatch on a config shape name."""
    if shape == 'pulse':
        return pulse(grid, params.get('center', 1.0), params.get('width', 0.05), params.get('mass', 1.0))
    if shape == 'power-law':
        return power_law(grid, params.get('A', 1.0), params.get('b', 0.0))
    if shape == 'flat':
        return flat(grid, params.get('A', 1.0))
    if shape == 'template':
        return from_template(grid, params.get('A', 1.0), params['drift'], params.get('tau', 0.0))
    raise ConfigError(f"shape must be one of {SHAPES}, got {shape!r}")
