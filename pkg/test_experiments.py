"""Tests for configuration, report emission, recipes and the CLI."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import shellflow
from data.samples import SampleGenerator
from experiments import recipes
from experiments.config import ConfigLoader, output_root, sweep_workers
from experiments.reports import (
    MismatchReport, RunResult, ScalingReport, build_report, emit_report, validate_report,
)
from models.errors import ConfigError
from models.netlab import init_network
from models.shells import balance_audit as shell_balance_audit
from models.spectral import eigensystem, operator_at

CONFIG_DIR = Path(__file__).parent / 'configs'

SMALL_TAIL = {
    'experiment': 'pde-scaling',
    'drift.b': 3.0,
    'grid.lam_min': 1e-3,
    'grid.lam_max': 1.0,
    'grid.cells_per_decade': 16,
    'grid.dtau': 0.01,
    'grid.tau_max': 1.0,
    'grid.record_every': 25,
    'grid.dissipation': False,
    'grid.init': 'power-law',
    'grid.init_b': 3.0,
}

SMALL_FROZEN = {
    'experiment': 'ode-verify',
    'model.kind': 'random-features',
    'model.layer_widths': [1, 1],
    'model.activation': 'relu',
    'model.feature_count': 32,
    'data.n_train': 8,
    'dynamics.dt': 1e-3,
    'dynamics.steps': 40,
    'dynamics.method': 'rk4',
    'dynamics.refine': False,
}


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv('SHELLFLOW_THREADS', '1')


def _write_config(tmp_path, document, name='config.json'):
    path = tmp_path / name
    path.write_text(json.dumps(document), encoding='utf-8')
    return path


def _load_report(directory):
    report = json.loads((Path(directory) / 'report.json').read_text(encoding='utf-8'))
    validate_report(report)
    return report


# --- configuration -----------------------------------------------------------------------------

def test_defaults_build():
    cfg = ConfigLoader.build(ConfigLoader.resolve({}))
    assert cfg.experiment == 'ode-verify'
    assert cfg.model.layer_widths == (1, 8, 1)
    assert cfg.seeds == [0]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match='unknown config keys: dynamics.stepz'):
        ConfigLoader.resolve({'dynamics.stepz': 10})


@pytest.mark.parametrize('key, value', [
    ('dynamics.steps', 'ten'),
    ('dynamics.steps', 2.5),
    ('dynamics.steps', True),
    ('dynamics.dt', '0.1'),
    ('dynamics.refine', 1),
    ('model.kind', 3),
    ('sweep.b_values', 3.0),
])
def test_mistyped_values_rejected(key, value):
    with pytest.raises(ConfigError):
        ConfigLoader.resolve({key: value})


def test_values_are_coerced():
    flat = ConfigLoader.resolve({'dynamics.steps': 10.0, 'drift.K': 1, 'sweep.b_values': [1, 2]})
    assert flat['dynamics.steps'] == 10 and isinstance(flat['dynamics.steps'], int)
    assert flat['drift.K'] == 1.0 and isinstance(flat['drift.K'], float)
    assert flat['sweep.b_values'] == [1.0, 2.0]


def test_semantic_errors_become_config_errors():
    with pytest.raises(ConfigError, match='n_test'):
        ConfigLoader.build(ConfigLoader.resolve({'experiment': 'double-descent', 'data.n_test': 0}))
    with pytest.raises(ConfigError):
        ConfigLoader.build(ConfigLoader.resolve({'grid.lam_min': 10.0, 'grid.lam_max': 1.0}))
    with pytest.raises(ConfigError):
        ConfigLoader.build(ConfigLoader.resolve({'experiment': 'bogus'}))
    with pytest.raises(ConfigError, match='fit_tau_max'):
        ConfigLoader.build(ConfigLoader.resolve({'grid.tau_max': 5.0, 'grid.fit_tau_max': 6.0}))


def test_load_rejects_bad_files(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        ConfigLoader.load(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"experiment": ', encoding='utf-8')
    with pytest.raises(ConfigError, match='not valid JSON'):
        ConfigLoader.load(bad)
    listed = _write_config(tmp_path, [1, 2], 'list.json')
    with pytest.raises(ConfigError, match='JSON object'):
        ConfigLoader.load(listed)


def test_overrides_and_seed_fanout(tmp_path):
    path = _write_config(tmp_path, {'seeds': [0, 1]})
    cfg = ConfigLoader.load(path, {'format': 'json', 'output_dir': str(tmp_path / 'out')})
    assert cfg.format == 'json'
    assert cfg.output_dir == tmp_path / 'out'
    seeded = cfg.with_seed(7)
    assert seeded.model.seed == 7
    assert seeded.seeds == [7]
    assert seeded.flat['format'] == 'json'


def test_model_seed_follows_seed_list(tmp_path):
    assert ConfigLoader.load(_write_config(tmp_path, {'seeds': [3, 4]})).model.seed == 3
    alone = ConfigLoader.load(_write_config(tmp_path, {'model.seed': 5}, 'alone.json'))
    assert alone.seeds == [5] and alone.model.seed == 5
    agreeing = ConfigLoader.load(_write_config(tmp_path, {'model.seed': 2, 'seeds': [2, 9]}, 'agree.json'))
    assert agreeing.model.seed == 2
    with pytest.raises(ConfigError, match='disagrees with seeds'):
        ConfigLoader.load(_write_config(tmp_path, {'model.seed': 7, 'seeds': [0, 1]}, 'clash.json'))
    # a --seed override replaces the document's list
    assert ConfigLoader.load(_write_config(tmp_path, {'model.seed': 5}, 'cli.json'), {'seeds': [8]}).model.seed == 8


def test_environment_settings(monkeypatch):
    monkeypatch.setenv('SHELLFLOW_OUTPUT_DIR', '/tmp/shellflow-runs')
    assert output_root() == Path('/tmp/shellflow-runs')
    cfg = ConfigLoader.build(ConfigLoader.resolve({'experiment': 'regimes'}))
    assert cfg.output_dir == Path('/tmp/shellflow-runs/regimes')
    monkeypatch.setenv('SHELLFLOW_THREADS', 'many')
    with pytest.raises(ConfigError):
        sweep_workers()
    monkeypatch.setenv('SHELLFLOW_THREADS', '0')
    with pytest.raises(ConfigError):
        sweep_workers()


@pytest.mark.parametrize('path', sorted(CONFIG_DIR.glob('*.json')), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = ConfigLoader.load(path)
    assert cfg.flat['experiment'] == cfg.experiment


# --- reports --------------------------------------------------------------------------------------

def _result(**kwargs):
    defaults = dict(
        experiment='regimes',
        config={'experiment': 'regimes', 'seeds': [0]},
        summary={'value': 0.1, 'ratio': float('inf'), 'nested': {'count': np.int64(3)}},
        checks={'identity': True},
        series=pd.DataFrame({'t': [0.0, 0.5], 'loss': [1.0, 1.0 / 3.0]}),
        tables={'ledger/flux': pd.DataFrame({'beta': [1], 'alpha': [0], 'F': [-0.25]})},
    )
    defaults.update(kwargs)
    return RunResult(**defaults)


def test_csv_report_files(tmp_path):
    written = emit_report(_result(), tmp_path, 'csv')
    names = [p.relative_to(tmp_path).as_posix() for p in written]
    assert names == ['config.resolved.json', 'series.csv', 'ledger/flux.csv', 'report.json']
    assert (tmp_path / 'series.csv').read_text().splitlines() == ['t,loss', '0,1', '0.5,0.33333333333333331']
    report = _load_report(tmp_path)
    assert report['summary']['ratio'] is None
    assert report['summary']['nested']['count'] == 3
    assert report['tables'] == ['ledger/flux']
    assert report['series_columns'] == ['t', 'loss']


def test_reports_are_byte_identical(tmp_path):
    first = emit_report(_result(), tmp_path / 'a', 'csv')
    second = emit_report(_result(), tmp_path / 'b', 'csv')
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


def test_empty_series_writes_header_only(tmp_path):
    emit_report(_result(series=pd.DataFrame(columns=['t', 'loss']), tables={}), tmp_path, 'csv')
    assert (tmp_path / 'series.csv').read_text() == 't,loss\n'


def test_json_format_embeds_tables(tmp_path):
    written = emit_report(_result(), tmp_path, 'json')
    assert [p.name for p in written] == ['config.resolved.json', 'report.json']
    report = _load_report(tmp_path)
    assert report['series']['loss'][0] == 1.0
    assert report['table_data']['ledger/flux']['F'] == [-0.25]


def test_plotdata_format(tmp_path):
    series = pd.DataFrame({'t': [0.0, 1.0], 'gap': [np.nan, 2.0], 'usable': [True, False]})
    emit_report(_result(series=series), tmp_path, 'plotdata')
    lines = (tmp_path / 'plot' / 'series.dat').read_text().splitlines()
    assert lines == ['# t gap usable', '0.0 nan 1', '1.0 2.0 0']
    assert (tmp_path / 'plot' / 'ledger_flux.dat').read_text().startswith('# beta alpha F\n')


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_report(_result(), tmp_path, 'xlsx')


def test_validate_report():
    report = build_report(_result())
    validate_report(report)
    with pytest.raises(ValueError, match='missing'):
        validate_report({k: v for k, v in report.items() if k != 'checks'})
    with pytest.raises(ValueError, match='must be'):
        validate_report(dict(report, tables='ledger/flux'))
    with pytest.raises(ValueError, match='schema_version'):
        validate_report(dict(report, schema_version='0'))


def test_failed_checks_sorted():
    result = _result(checks={'b': False, 'a': False, 'c': True})
    assert result.failed_checks == ['a', 'b']


def _mismatch_series():
    return pd.DataFrame({
        't': [0.0, 1.0, 2.0, 3.0],
        'L_tr': [4.0, 3.0, 2.0, 1.0],
        'L_te': [5.0, 6.0, 4.0, 3.0],
        'correction': [1.0, 3.0, 2.0, 2.0],
        'tail_proxy': [1.0, 2.0, 3.0, 4.0],
    })


def test_mismatch_report_summary():
    summary = MismatchReport(0, 1.0, 8, _mismatch_series()).summary()
    assert summary['identity_ok'] and summary['train_monotone']
    assert summary['local_maxima_t'] == [1.0]
    assert summary['local_minima_t'] == []
    assert summary['rise_then_fall']
    assert summary['final_L_te'] == 3.0
    assert summary['proxy_correlation'] == pytest.approx(1.0 / np.sqrt(10.0))


def test_mismatch_report_flags_broken_identity():
    series = _mismatch_series()
    series.loc[2, 'correction'] = 2.5
    assert not MismatchReport(0, 1.0, 8, series).identity_ok
    with pytest.raises(ValueError, match='tail_proxy'):
        MismatchReport(0, 1.0, 8, series.drop(columns='tail_proxy'))


def test_scaling_report_window_and_fits():
    series = pd.DataFrame({'tau': [0.0, 1.0, 2.0], 'loss': [1.0, 0.5, 0.25], 'frontier': [np.nan] * 3})
    result = ScalingReport(series, (1.0, 2.0), loss_fit={'slope': -1.0}).to_result({}, {'b': 3.0}, {}, {})
    assert result.experiment == 'pde-scaling'
    assert result.summary == {'b': 3.0, 'tau_window': [1.0, 2.0], 'loss_fit': {'slope': -1.0}}
    with pytest.raises(ValueError, match='lo <= hi'):
        ScalingReport(series, (2.0, 1.0))
    with pytest.raises(ValueError, match='past the last snapshot'):
        ScalingReport(series, (3.0, 4.0))


# --- recipes -------------------------------------------------------------------------------------

def test_ode_verify_on_frozen_features(tmp_path):
    cfg = ConfigLoader.build(ConfigLoader.resolve(SMALL_FROZEN, {'output_dir': str(tmp_path)}))
    result = recipes.run_ode_verify(cfg)
    assert all(result.checks.values())
    residual = result.summary['residual']
    assert residual['usable_fraction'] == 1.0
    assert result.summary['loss_increases'] == 0
    assert list(result.series.columns) == ['t', 'loss', 'rank', 'min_gap', 'min_overlap', 'usable', 'rms_residual']
    assert len(result.series) == 41
    assert np.all(np.diff(result.series['loss']) <= 0)


def test_shell_audit_on_frozen_features(tmp_path):
    document = dict(SMALL_FROZEN, experiment='shell-audit')
    cfg = ConfigLoader.build(ConfigLoader.resolve(document, {'output_dir': str(tmp_path)}))
    result = recipes.run_shell_audit(cfg)
    assert all(result.checks.values())
    assert set(result.checks) == {
        'coarsen_exactness', 'internal_cancellation', 'flux_antisymmetry',
        'global_conservation', 'partition_exactness',
    }
    # a frozen eigenbasis carries no inter-shell flux; empty shells never dissipate
    assert all(r in (0.0, float('inf')) for r in result.summary['renormalizability_ratio'].values())
    assert result.summary['gate_energy_monotone']
    assert set(result.tables) == {'ledger/energies', 'ledger/flux', 'ledger/balance'}


def test_pde_tail_run_conserves_mass(tmp_path):
    cfg = ConfigLoader.build(ConfigLoader.resolve(SMALL_TAIL, {'output_dir': str(tmp_path)}))
    written = recipes.run_experiment(cfg)
    assert [p.name for p in written] == ['config.resolved.json', 'series.csv', 'density.csv', 'report.json']
    report = _load_report(tmp_path)
    assert report['checks'] == {'mass_conservation': True}
    assert report['summary']['regime'] == 'supercritical'
    assert report['summary']['courant'] <= 1.0
    series = pd.read_csv(tmp_path / 'series.csv')
    assert len(series) == 5
    density = pd.read_csv(tmp_path / 'density.csv')
    assert list(density.columns) == ['tau', 'lambda_center', 'epsilon']
    assert len(density) == 5 * 48


def test_injected_pulse_builds_the_transport_tail(tmp_path):
    document = {
        'experiment': 'pde-scaling',
        'drift.b': 3.0,
        'grid.lam_min': 1e-3,
        'grid.lam_max': 6.0,
        'grid.cells_per_decade': 32,
        'grid.dtau': 0.001,
        'grid.tau_max': 50.0,
        'grid.record_every': 10000,
        'grid.dissipation': False,
        'grid.init': 'flat',
        'grid.init_A': 0.0,
        'grid.pulse_center': 3.0,
        'grid.injection_rate': 1.0,
        'output_dir': str(tmp_path),
    }
    result = recipes.run_pde_scaling(ConfigLoader.build(ConfigLoader.resolve(document)))
    summary = result.summary
    assert result.checks == {'mass_conservation': True}
    assert summary['injected_mass'] == pytest.approx(50.0, rel=1e-9)
    lo, hi = summary['tail_window']
    # front of the injected flux sits at (1/9 + 2·50)^(−1/2) ≈ 0.0999
    assert lo == pytest.approx(0.0999 * 10 ** 0.3, rel=1e-3)
    assert hi < 3.0
    assert summary['tail_fit']['slope'] == pytest.approx(-3.0, abs=0.3)
    assert summary['gate_tail']


def test_lazy_regime_decays_exactly(tmp_path):
    document = {
        'experiment': 'regimes',
        'grid.lam_min': 0.01,
        'grid.lam_max': 10.0,
        'grid.cells_per_decade': 8,
        'grid.dtau': 0.01,
        'grid.tau_max': 1.0,
        'grid.record_every': 10,
        'sweep.b_values': [],
        'sweep.include_lazy': True,
    }
    cfg = ConfigLoader.build(ConfigLoader.resolve(document, {'output_dir': str(tmp_path)}))
    result = recipes.run_regimes(cfg)
    assert result.checks == {'lazy_decay_exact': True}
    assert [r['regime'] for r in result.summary['regimes']] == ['lazy']
    assert np.allclose(result.series['measured'], result.series['predicted'], rtol=1e-8)


def test_double_descent_small_sweep(tmp_path):
    document = {
        'experiment': 'double-descent',
        'seeds': [0],
        'model.kind': 'random-features',
        'model.layer_widths': [1, 1],
        'model.activation': 'relu',
        'model.feature_count': 8,
        'data.n_train': 8,
        'data.n_test': 16,
        'data.noise': 0.1,
        'dynamics.dt': 0.05,
        'dynamics.steps': 40,
        'dynamics.stride': 10,
        'sweep.feature_ratios': [0.5, 1.0],
    }
    cfg = ConfigLoader.build(ConfigLoader.resolve(document, {'output_dir': str(tmp_path)}))
    result = recipes.run_double_descent(cfg)
    assert result.checks == {'train_monotone': True, 'mismatch_identity': True}
    assert [r['width'] for r in result.summary['runs']] == [4, 8]
    assert result.summary['threshold_runs'] == 1
    assert 'gate_rise_then_fall' not in result.summary
    assert len(result.series) == 2 * 5
    assert {'L_tr', 'L_te', 'correction', 'tail_proxy'} <= set(result.series.columns)


def test_threshold_peak_needs_both_neighbours():
    runs = [
        {'seed': 0, 'ratio': 0.5, 'final_L_te': 0.4},
        {'seed': 0, 'ratio': 1.0, 'final_L_te': 2.0},
        {'seed': 0, 'ratio': 2.0, 'final_L_te': 0.5},
        {'seed': 1, 'ratio': 0.5, 'final_L_te': 0.4},
        {'seed': 1, 'ratio': 1.0, 'final_L_te': 0.3},
        {'seed': 1, 'ratio': 2.0, 'final_L_te': 0.5},
        {'seed': 2, 'ratio': 0.5, 'final_L_te': 0.4},
        {'seed': 2, 'ratio': 1.0, 'final_L_te': 2.0},
    ]
    assert recipes._threshold_peaks(runs) == {0: True, 1: False}


def test_model_and_data_dimensions_must_agree(tmp_path):
    with pytest.raises(ConfigError, match='input dimension'):
        ConfigLoader.build(ConfigLoader.resolve({
            'experiment': 'double-descent',
            'model.kind': 'random-features',
            'model.layer_widths': [16, 1],
            'model.feature_count': 8,
        }, {'output_dir': str(tmp_path)}))


def test_frozen_features_follow_closed_form_decay(tmp_path):
    cfg = ConfigLoader.build(ConfigLoader.resolve(
        {**SMALL_FROZEN, 'experiment': 'shell-audit', 'model.feature_count': 64, 'data.n_train': 16},
        {'output_dir': str(tmp_path)},
    ))
    train, _ = SampleGenerator(cfg.data).train_test(0)
    net = init_network(cfg.model)
    lam_max = eigensystem(operator_at(net, train)).lambda_max
    steps = 500
    run = recipes.track_run(net, train, cfg, dt=5.0 / lam_max / steps, steps=steps)
    g0 = run.records[0].modes.amplitudes
    lam = run.records[0].snapshot.eigenvalues
    assert run.records[-1].modes.timestamp == pytest.approx(5.0 / lam_max)
    for record in run.records[::50]:
        expected = g0 * np.exp(-lam * record.modes.timestamp)
        assert np.allclose(record.modes.amplitudes, expected, rtol=1e-6, atol=1e-6 * np.abs(g0).max())

    # a short fine-step run resolves the shell balance
    short = recipes.track_run(net, train, cfg, dt=1e-5 / lam_max, steps=20)
    ledgers, _ = recipes._ledgers(short, cfg)
    balance = shell_balance_audit(ledgers, short.snapshot_dt)
    assert balance.excluded_steps == 0
    assert balance.max_residual <= 1e-8 * balance.max_dissipation


# --- command line ---------------------------------------------------------------------------------

def test_cli_success(tmp_path):
    path = _write_config(tmp_path, SMALL_TAIL)
    out = tmp_path / 'run'
    assert shellflow.main(['pde-scaling', '--config', str(path), '--out', str(out), '--format', 'json']) == 0
    report = _load_report(out)
    assert report['config']['format'] == 'json'
    assert not (out / 'series.csv').exists()


def test_cli_config_error_exit_code(tmp_path):
    path = _write_config(tmp_path, {'grid.spacing': 2})
    assert shellflow.main(['pde-scaling', '--config', str(path), '--out', str(tmp_path / 'run')]) == 2
    assert shellflow.main(['pde-scaling', '--config', str(tmp_path / 'absent.json')]) == 2


def test_cli_divergence_exit_code(tmp_path):
    path = _write_config(tmp_path, dict(SMALL_TAIL, **{'grid.dtau': 1.0}))
    assert shellflow.main(['pde-scaling', '--config', str(path), '--out', str(tmp_path / 'run')]) == 3


def test_cli_check_failure_still_writes_reports(tmp_path, monkeypatch):
    def broken(cfg, seed=None):
        return RunResult('regimes', cfg.flat, {}, {'lazy_decay_exact': False})

    monkeypatch.setitem(recipes.RECIPES, 'regimes', broken)
    path = _write_config(tmp_path, {})
    out = tmp_path / 'run'
    assert shellflow.main(['regimes', '--config', str(path), '--out', str(out)]) == 4
    assert _load_report(out)['checks'] == {'lazy_decay_exact': False}


def test_cli_rejects_unknown_experiment(tmp_path):
    with pytest.raises(SystemExit):
        shellflow.main(['bogus', '--config', str(tmp_path / 'c.json')])


# --- acceptance-scale runs of the shipped configs ----------------------------------------------------

SHIPPED_GATES = {
    'ode-verify': ['gate_order_ratio', 'gate_usable_fraction'],
    'shell-audit': ['gate_balance', 'gate_energy_monotone'],
    'pde-tail': ['gate_tail'],
    'pde-scaling': ['gate_grsd_goodness', 'gate_K_stable', 'gate_loss_oracle', 'gate_frontier_action'],
    'pde-frontier-b2': ['gate_frontier'],
    'double-descent': ['gate_rise_then_fall'],
}


@pytest.mark.slow
@pytest.mark.parametrize('name', [
    'ode-verify', 'shell-audit', 'frozen-features', 'pde-tail', 'pde-critical', 'pde-scaling', 'pde-frontier-b2',
    'regimes', 'double-descent',
])
def test_shipped_config_runs(name, tmp_path):
    cfg = ConfigLoader.load(CONFIG_DIR / f'{name}.json', {'output_dir': str(tmp_path)})
    recipes.run_experiment(cfg)
    report = _load_report(tmp_path)
    assert all(report['checks'].values())
    summary = report['summary']
    for gate in SHIPPED_GATES.get(name, []):
        assert summary[gate], gate
    if name == 'regimes':
        by_regime = {r['regime']: r for r in summary['regimes']}
        assert by_regime['subcritical']['gate_arrival']
        assert by_regime['critical']['gate_tracking']

