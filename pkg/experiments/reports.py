"""Deterministic, schema-versioned report files.

Every run directory gets ``config.resolved.json`` and ``report.json``. The
format switch adds tables: ``csv`` writes ``series.csv`` plus one CSV per
table (names may carry a subdirectory, e.g. ``ledger/energies``),
``plotdata`` writes gnuplot-ready ``plot/*.dat``, ``json`` embeds the
tables in ``report.json`` instead.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import json
import logging
import math

import numpy as np
import pandas as pd
from scipy import stats

from experiments import __version__
from models.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = '1'

REPORT_SCHEMA: Dict[str, type] = {
    'schema_version': str,
    'artifact_version': str,
    'experiment': str,
    'config': dict,
    'summary': dict,
    'checks': dict,
    'series_columns': list,
    'tables': list,
}


@dataclass
class RunResult:
    """Everything a recipe produced, ready to be written out.

    ``checks`` holds exact identities (a False fails the run); ``summary``
    holds measurements and gates that are reported only.
    """
    experiment: str
    config: Dict[str, Any]
    summary: Dict[str, Any] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    series: pd.DataFrame = field(default_factory=pd.DataFrame)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def failed_checks(self) -> List[str]:
        return sorted(name for name, ok in self.checks.items() if not ok)


@dataclass
class ScalingReport:
    """Loss/frontier series of one PDE run and the fits over its tau window."""
    series: pd.DataFrame
    tau_window: Tuple[float, float]
    frontier_fit: Optional[Dict[str, Any]] = None
    loss_fit: Optional[Dict[str, Any]] = None
    grsd_fit: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        lo, hi = self.tau_window
        if not 0 <= lo <= hi:
            raise ValueError(f"tau_window must satisfy 0 <= lo <= hi, got {self.tau_window}")
        for column in ('tau', 'loss', 'frontier'):
            if column not in self.series.columns:
                raise ValueError(f"ScalingReport series is missing column '{column}'")
        # accumulated tau can round just below tau_max
        if len(self.series) and lo > self.series['tau'].max() * (1 + 1e-9):
            raise ValueError(f"tau_window starts at {lo}, past the last snapshot {self.series['tau'].max()}")

    def to_result(self, config: Dict[str, Any], summary: Dict[str, Any], checks: Dict[str, bool],
                  tables: Dict[str, pd.DataFrame]) -> RunResult:
        summary = dict(summary, tau_window=list(self.tau_window))
        for name in ('frontier_fit', 'loss_fit', 'grsd_fit'):
            if getattr(self, name) is not None:
                summary[name] = getattr(self, name)
        return RunResult('pde-scaling', config, summary, checks, self.series, tables)


def _local_extrema(values: np.ndarray) -> Tuple[List[int], List[int]]:
    maxima, minima = [], []
    for k in range(1, len(values) - 1):
        if values[k] > values[k - 1] and values[k] > values[k + 1]:
            maxima.append(k)
        elif values[k] < values[k - 1] and values[k] < values[k + 1]:
            minima.append(k)
    return maxima, minima


@dataclass
class MismatchReport:
    """Train/test losses of one double-descent run.

    Each row carries the mismatch correction ½⟨e, Δe⟩ = L_te − L_tr and the
    tail-energy proxy of the training error.
    """
    seed: int
    ratio: float
    width: int
    series: pd.DataFrame
    identity_tol: float = 1e-12

    COLUMNS = ('t', 'L_tr', 'L_te', 'correction', 'tail_proxy')

    def __post_init__(self):
        missing = [c for c in self.COLUMNS if c not in self.series.columns]
        if missing:
            raise ValueError(f"MismatchReport series is missing columns {missing}")

    @property
    def identity_ok(self) -> bool:
        L_tr, L_te = self.series['L_tr'].to_numpy(), self.series['L_te'].to_numpy()
        scale = np.maximum(np.maximum(L_te, L_tr), 1e-300)
        return bool(np.all(np.abs(L_te - (L_tr + self.series['correction'].to_numpy())) <= self.identity_tol * scale))

    @property
    def train_monotone(self) -> bool:
        return bool(np.all(np.diff(self.series['L_tr'].to_numpy()) <= 1e-12))

    @property
    def proxy_correlation(self) -> float:
        proxy, corr = self.series['tail_proxy'].to_numpy(), self.series['correction'].to_numpy()
        if len(proxy) < 2 or proxy.std() == 0 or corr.std() == 0:
            return float('nan')
        return float(stats.pearsonr(proxy, corr)[0])

    def summary(self) -> Dict[str, Any]:
        L_te = self.series['L_te'].to_numpy()
        times = self.series['t'].to_numpy()
        maxima, minima = _local_extrema(L_te)
        return {
            'seed': self.seed,
            'ratio': self.ratio,
            'width': self.width,
            'train_monotone': self.train_monotone,
            'identity_ok': self.identity_ok,
            'local_maxima_t': [float(times[k]) for k in maxima],
            'local_minima_t': [float(times[k]) for k in minima],
            'rise_then_fall': any(L_te[-1] < L_te[k] for k in maxima),
            'final_L_tr': float(self.series['L_tr'].iloc[-1]),
            'final_L_te': float(L_te[-1]),
            'proxy_correlation': self.proxy_correlation,
        }


def _jsonable(value: Any) -> Any:
    """Plain-Python, finite-or-null version of a value for json.dumps."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def _dump_json(document: Dict[str, Any], path: Path):
    path.write_text(json.dumps(_jsonable(document), indent=2, sort_keys=True) + '\n', encoding='utf-8')


def _write_csv(frame: pd.DataFrame, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\n', float_format='%.17g')


def _write_plotdata(frame: pd.DataFrame, path: Path):
    """Whitespace columns with a '# col col ...' header line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ['# ' + ' '.join(str(c) for c in frame.columns)]
    for row in frame.itertuples(index=False):
        lines.append(' '.join(_plot_token(v) for v in row))
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def _plot_token(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else 'nan'
    if isinstance(value, (bool, np.bool_)):
        return '1' if value else '0'
    return str(value).replace(' ', '_')


def build_report(results: RunResult, embed_tables: bool = False) -> Dict[str, Any]:
    report = {
        'schema_version': SCHEMA_VERSION,
        'artifact_version': __version__,
        'experiment': results.experiment,
        'config': results.config,
        'summary': results.summary,
        'checks': results.checks,
        'series_columns': [str(c) for c in results.series.columns],
        'tables': sorted(results.tables),
    }
    if embed_tables:
        report['series'] = results.series.to_dict(orient='list')
        report['table_data'] = {name: frame.to_dict(orient='list') for name, frame in results.tables.items()}
    return report


def validate_report(document: Dict[str, Any]) -> None:
    """Check a loaded report.json against REPORT_SCHEMA.

    Raises:
        ValueError: a required key is missing or has the wrong type
    """
    for key, kind in REPORT_SCHEMA.items():
        if key not in document:
            raise ValueError(f"report is missing required key {key!r}")
        if not isinstance(document[key], kind):
            raise ValueError(f"report key {key!r} must be {kind.__name__}, got {type(document[key]).__name__}")
    if document['schema_version'] != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {document['schema_version']!r}")


def emit_report(results: RunResult, out_dir: Path, fmt: str = 'csv') -> List[Path]:
    """Write a run's files and return their paths in write order."""
    if fmt not in ('csv', 'json', 'plotdata'):
        raise ConfigError(f"format must be csv, json or plotdata, got {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / 'config.resolved.json'
    _dump_json(results.config, path)
    written.append(path)

    if fmt == 'csv':
        path = out_dir / 'series.csv'
        _write_csv(results.series, path)
        written.append(path)
        for name in sorted(results.tables):
            path = out_dir / f'{name}.csv'
            _write_csv(results.tables[name], path)
            written.append(path)
    elif fmt == 'plotdata':
        path = out_dir / 'plot' / 'series.dat'
        _write_plotdata(results.series, path)
        written.append(path)
        for name in sorted(results.tables):
            path = out_dir / 'plot' / f"{name.replace('/', '_')}.dat"
            _write_plotdata(results.tables[name], path)
            written.append(path)

    path = out_dir / 'report.json'
    _dump_json(build_report(results, embed_tables=(fmt == 'json')), path)
    written.append(path)
    logger.info(f"Wrote {len(written)} files to {out_dir}")
    return written
