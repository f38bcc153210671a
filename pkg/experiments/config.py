"""Flat, typed experiment configuration.

A config file is a single JSON object whose keys are dotted paths
(``model.kind``, ``dynamics.dt``, ...). Every key must appear in
:attr:`ConfigLoader.DEFAULTS`; values are coerced to the default's type.
The fully resolved flat document is echoed into every run directory.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import json
import logging
import os

from dotenv import load_dotenv

from data.samples import DataSpec
from models.errors import ConfigError
from models.netlab import INTEGRATORS, ModelSpec
from models.transport import DriftSpec, LogGrid

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

EXPERIMENTS = ('ode-verify', 'shell-audit', 'pde-scaling', 'double-descent', 'regimes')
FORMATS = ('csv', 'json', 'plotdata')


def output_root() -> Path:
    return Path(os.getenv('SHELLFLOW_OUTPUT_DIR', './runs'))


def sweep_workers() -> int:
    raw = os.getenv('SHELLFLOW_THREADS', '1')
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"SHELLFLOW_THREADS must be an integer, got {raw!r}")
    if workers < 1:
        raise ConfigError(f"SHELLFLOW_THREADS must be >= 1, got {workers}")
    return workers


@dataclass
class DynamicsSpec:
    """Gradient-flow integration and spectral-tracking knobs."""
    dt: float = 1e-3
    steps: int = 2000
    stride: int = 1
    method: str = 'euler'
    rank_tol: float = 1e-12
    gap_floor: float = 1e-8
    overlap_floor: float = 0.5
    residual_floor: float = 1e-12
    cond_floor: float = 1e-4  # residual aggregates skip modes below cond_floor·λ_max
    refine: bool = True  # rerun at dt/2 to measure the residual order

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dynamics.dt must be positive, got {self.dt}")
        if self.steps < 2:
            raise ValueError(f"dynamics.steps must be >= 2, got {self.steps}")
        if self.stride < 1:
            raise ValueError(f"dynamics.stride must be >= 1, got {self.stride}")
        if self.method not in INTEGRATORS:
            raise ValueError(f"dynamics.method must be one of {INTEGRATORS}, got {self.method!r}")
        if not 0 < self.overlap_floor <= 1:
            raise ValueError(f"dynamics.overlap_floor must lie in (0, 1], got {self.overlap_floor}")
        if not 0 <= self.cond_floor < 1:
            raise ValueError(f"dynamics.cond_floor must lie in [0, 1), got {self.cond_floor}")

    @property
    def snapshot_dt(self) -> float:
        return self.dt * self.stride


@dataclass
class ShellSpec:
    lambda0: Optional[float] = None  # None: median eigenvalue at t=0 on the q grid
    q: float = 2.0
    tail_alpha: int = 0
    window_start: float = 0.0
    window_end: Optional[float] = None

    def __post_init__(self):
        if self.lambda0 is not None and not self.lambda0 > 0:
            raise ValueError(f"shells.lambda0 must be positive, got {self.lambda0}")
        if not self.q > 1:
            raise ValueError(f"shells.q must exceed 1, got {self.q}")

    @property
    def window(self) -> Tuple[float, float]:
        return (self.window_start, float('inf') if self.window_end is None else self.window_end)


@dataclass
class GridSpec:
    """PDE grid, march and initial condition."""
    lam_min: float = 1e-4
    lam_max: float = 10.0
    cells_per_decade: int = 64
    dtau: float = 1e-3
    tau_max: float = 10.0
    record_every: int = 100
    dissipation: bool = True
    init: str = 'power-law'
    init_A: float = 1.0
    init_b: float = 0.0
    pulse_center: float = 1.0
    pulse_width: float = 0.05
    injection_rate: float = 0.0  # mass per unit tau fed in as a pulse-shaped source
    fit_tau_min: float = 1.0
    fit_tau_max: Optional[float] = None

    def __post_init__(self):
        if not self.dtau > 0:
            raise ValueError(f"grid.dtau must be positive, got {self.dtau}")
        if not self.tau_max > 0:
            raise ValueError(f"grid.tau_max must be positive, got {self.tau_max}")
        if self.record_every < 1:
            raise ValueError(f"grid.record_every must be >= 1, got {self.record_every}")
        if self.injection_rate < 0:
            raise ValueError(f"grid.injection_rate must be nonnegative, got {self.injection_rate}")
        if not 0 <= self.fit_tau_min <= self.tau_max:
            raise ValueError(f"grid.fit_tau_min must lie in [0, tau_max], got {self.fit_tau_min}")
        if self.fit_tau_max is not None and not self.fit_tau_min < self.fit_tau_max <= self.tau_max:
            raise ValueError(
                f"grid.fit_tau_max must lie in (fit_tau_min, tau_max], got {self.fit_tau_max}")
        self.log_grid()

    def log_grid(self) -> LogGrid:
        return LogGrid(self.lam_min, self.lam_max, self.cells_per_decade)

    @property
    def steps(self) -> int:
        return int(round(self.tau_max / self.dtau))


@dataclass
class SweepSpec:
    b_values: List[float] = field(default_factory=lambda: [0.5, 1.0, 3.0])
    include_lazy: bool = True
    feature_ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])

    def __post_init__(self):
        if any(b <= 0 for b in self.b_values):
            raise ValueError(f"sweep.b_values must be positive, got {self.b_values}")
        if any(r <= 0 for r in self.feature_ratios):
            raise ValueError(f"sweep.feature_ratios must be positive, got {self.feature_ratios}")


@dataclass
class ExperimentConfig:
    experiment: str
    model: ModelSpec
    data: DataSpec
    dynamics: DynamicsSpec
    shells: ShellSpec
    drift: DriftSpec
    grid: GridSpec
    sweep: SweepSpec
    seeds: List[int]
    output_dir: Path
    format: str = 'csv'
    flat: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.format not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}, got {self.format!r}")
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if self.experiment == 'double-descent' and self.data.n_test < 1:
            raise ValueError(f"double-descent needs data.n_test >= 1, got {self.data.n_test}")
        if self.model.input_dim != self.data.input_dim:
            raise ValueError(
                f"model input dimension {self.model.input_dim} != data.input_dim {self.data.input_dim}"
            )

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        flat = dict(self.flat)
        flat['model.seed'] = seed
        flat['seeds'] = [seed]
        return ConfigLoader.build(flat)


class ConfigLoader:
    """Merge a flat JSON document over DEFAULTS and validate it."""

    DEFAULTS: Dict[str, Any] = {
        'experiment': 'ode-verify',
        'seeds': [0],
        'output_dir': None,
        'format': 'csv',

        'model.kind': 'mlp',
        'model.layer_widths': [1, 8, 1],
        'model.activation': 'tanh',
        'model.feature_count': 0,
        'model.init_scale': 1.0,
        'model.seed': 0,

        'data.distribution': 'uniform-box',
        'data.input_dim': 1,
        'data.box': 1.0,
        'data.n_train': 16,
        'data.n_test': 0,
        'data.teacher': 'random-net',
        'data.teacher_width': 16,
        'data.teacher_seed': 1234,
        'data.noise': 0.0,

        'dynamics.dt': 1e-3,
        'dynamics.steps': 2000,
        'dynamics.stride': 1,
        'dynamics.method': 'euler',
        'dynamics.rank_tol': 1e-12,
        'dynamics.gap_floor': 1e-8,
        'dynamics.overlap_floor': 0.5,
        'dynamics.residual_floor': 1e-12,
        'dynamics.cond_floor': 1e-4,
        'dynamics.refine': True,

        'shells.lambda0': None,
        'shells.q': 2.0,
        'shells.tail_alpha': 0,
        'shells.window_start': 0.0,
        'shells.window_end': None,

        'drift.b': 3.0,
        'drift.schedule': 'constant',
        'drift.c0': 1.0,
        'drift.time_exponent': 1.0,
        'drift.K': None,

        'grid.lam_min': 1e-4,
        'grid.lam_max': 10.0,
        'grid.cells_per_decade': 64,
        'grid.dtau': 1e-3,
        'grid.tau_max': 10.0,
        'grid.record_every': 100,
        'grid.dissipation': True,
        'grid.init': 'power-law',
        'grid.init_A': 1.0,
        'grid.init_b': 0.0,
        'grid.pulse_center': 1.0,
        'grid.pulse_width': 0.05,
        'grid.injection_rate': 0.0,
        'grid.fit_tau_min': 1.0,
        'grid.fit_tau_max': None,

        'sweep.b_values': [0.5, 1.0, 3.0],
        'sweep.include_lazy': True,
        'sweep.feature_ratios': [0.5, 1.0, 2.0],
    }

    # Keys whose default is None and the type a non-null value must have
    NULLABLE = {
        'output_dir': str,
        'shells.lambda0': float,
        'shells.window_end': float,
        'drift.K': float,
        'grid.fit_tau_max': float,
    }

    @classmethod
    def _coerce(cls, key: str, value: Any) -> Any:
        default = cls.DEFAULTS[key]
        if default is None:
            if value is None:
                return None
            return cls._coerce_scalar(key, value, cls.NULLABLE[key])
        if isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{key} must be a list, got {type(value).__name__}")
            kind = type(default[0]) if default else float
            return [cls._coerce_scalar(key, v, kind) for v in value]
        return cls._coerce_scalar(key, value, type(default))

    @staticmethod
    def _coerce_scalar(key: str, value: Any, kind: type) -> Any:
        if kind is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be a boolean, got {value!r}")
            return value
        if kind is int:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            return int(value)
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number, got {value!r}")
            return float(value)
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value

    @classmethod
    def resolve(cls, document: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """Merge document and overrides over DEFAULTS, coercing every value.

        ``model.seed`` follows ``seeds[0]``. A source that sets ``model.seed``
        alone seeds a one-entry list; one that sets both must agree.
        """
        merged = dict(cls.DEFAULTS)
        for source in (document, overrides or {}):
            unknown = sorted(set(source) - set(cls.DEFAULTS))
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            for key, value in source.items():
                merged[key] = cls._coerce(key, value)
            if 'model.seed' in source:
                if 'seeds' not in source:
                    merged['seeds'] = [merged['model.seed']]
                elif merged['seeds'][:1] != [merged['model.seed']]:
                    raise ConfigError(
                        f"model.seed={merged['model.seed']} disagrees with seeds={merged['seeds']}; "
                        f"runs take their seed from the seeds list"
                    )
        # every run draws its model from the seeds list
        if merged['seeds']:
            merged['model.seed'] = merged['seeds'][0]
        return merged

    @classmethod
    def build(cls, flat: Dict[str, Any]) -> ExperimentConfig:
        """Validate a resolved flat document into an ExperimentConfig."""
        def section(prefix: str) -> Dict[str, Any]:
            return {k[len(prefix) + 1:]: v for k, v in flat.items() if k.startswith(prefix + '.')}

        try:
            model = section('model')
            model['layer_widths'] = tuple(model['layer_widths'])
            config = ExperimentConfig(
                experiment=flat['experiment'],
                model=ModelSpec(**model),
                data=DataSpec(**section('data')),
                dynamics=DynamicsSpec(**section('dynamics')),
                shells=ShellSpec(**section('shells')),
                drift=DriftSpec(**section('drift')),
                grid=GridSpec(**section('grid')),
                sweep=SweepSpec(**section('sweep')),
                seeds=list(flat['seeds']),
                output_dir=Path(flat['output_dir']) if flat['output_dir'] else output_root() / flat['experiment'],
                format=flat['format'],
                flat=dict(flat),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        return config

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
        document: Dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            try:
                document = json.loads(path.read_text(encoding='utf-8'))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}")
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
            if not isinstance(document, dict):
                raise ConfigError(f"config file {path} must contain a JSON object")
            logger.info(f"Loaded config from {path}")
        return cls.build(cls.resolve(document, overrides))
