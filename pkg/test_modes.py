"""Tests for mode amplitudes, Kato coupling and the mode-ODE residual."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import solve_ivp

from models.errors import ConfigError, DegenerateDataError, DimensionError
from models.modes import (
    CouplingMatrix, ModeRecord, ModeState, amplitudes, coupling_matrix, eigenvalue_velocity,
    mode_ode_rhs, ode_residual,
)
from models.netlab import ErrorVector
from models.spectral import (
    GramOperator, OperatorDerivative, SpectralSnapshot, align_snapshots, eigensystem, operator_derivative,
)


def _coordinate_snapshot(eigenvalues, t=0.0):
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    return SpectralSnapshot(t, eigenvalues, np.eye(eigenvalues.size))


# --- amplitudes ----------------------------------------------------------------------

def test_amplitudes_pick_out_a_mode():
    w = np.array([0.2, 0.3, 0.5])
    M = GramOperator(np.diag([3.0, 2.0, 1.0]) + 0.1 * np.ones((3, 3)))
    snap = eigensystem(M)
    phi = snap.function_values(w)
    g = amplitudes(ErrorVector(3.0 * phi[:, 1], 0.5), snap, w)
    assert g.timestamp == 0.5
    assert np.allclose(g.amplitudes, [0.0, 3.0, 0.0], atol=1e-12)


def test_amplitudes_vanish_outside_retained_span():
    w = np.full(3, 1.0 / 3.0)
    snap = SpectralSnapshot(0.0, np.array([1.0]), np.array([[1.0], [0.0], [0.0]]))
    g = amplitudes(ErrorVector(np.array([0.0, 2.0, -1.0])), snap, w)
    assert np.array_equal(g.amplitudes, [0.0])


def test_amplitudes_dimension_mismatch():
    snap = _coordinate_snapshot([2.0, 1.0])
    with pytest.raises(DimensionError):
        amplitudes(ErrorVector(np.ones(3)), snap, np.full(3, 1.0 / 3.0))


def test_mode_state_energy():
    assert ModeState(0.0, np.array([3.0, 4.0])).energy == pytest.approx(12.5)


# --- coupling ----------------------------------------------------------------------------

def test_coupling_two_by_two_hand_case():
    snap = _coordinate_snapshot([2.0, 1.0])
    Mdot = OperatorDerivative(np.array([[0.0, 1.0], [1.0, 0.0]]))
    omega = coupling_matrix(snap, Mdot)
    # entries[u, v] = Ω_{v→u}
    assert omega.entries[0, 1] == -1.0
    assert omega.entries[1, 0] == 1.0
    assert np.all(np.diag(omega.entries) == 0.0)


def test_zero_derivative_gives_zero_coupling():
    snap = _coordinate_snapshot([3.0, 2.0, 1.0])
    omega = coupling_matrix(snap, OperatorDerivative(np.zeros((3, 3))))
    assert np.all(omega.entries == 0.0)


@settings(max_examples=100, deadline=None)
@given(
    spectrum=arrays(np.float64, (6,), elements=st.floats(1e-3, 1e3), unique=True),
    raw=arrays(np.float64, (6, 6), elements=st.floats(-10.0, 10.0, allow_nan=False, allow_subnormal=False)),
    seed=st.integers(0, 2 ** 16),
)
def test_coupling_is_exactly_antisymmetric(spectrum, raw, seed):
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((6, 6)))
    snap = SpectralSnapshot(0.0, np.sort(spectrum)[::-1], Q)
    omega = coupling_matrix(snap, OperatorDerivative(raw + raw.T))
    assert np.array_equal(omega.entries, -omega.entries.T)
    assert np.all(np.diag(omega.entries) == 0.0)


def test_near_degenerate_pairs_are_masked():
    snap = _coordinate_snapshot([2.0, 1.0, 1.0 + 1e-12])
    Mdot = OperatorDerivative(np.ones((3, 3)))
    omega = coupling_matrix(snap, Mdot, gap_floor=1e-8)
    assert omega.masked_pairs == 1
    assert omega.gap_mask[1, 2] and omega.gap_mask[2, 1]
    assert omega.entries[1, 2] == 0.0 and omega.entries[2, 1] == 0.0
    assert omega.entries[0, 1] == pytest.approx(1.0 / (1.0 - 2.0))


def test_coupling_dimension_mismatch():
    with pytest.raises(DimensionError):
        coupling_matrix(_coordinate_snapshot([2.0, 1.0]), OperatorDerivative(np.zeros((3, 3))))


def test_coupling_requires_shared_timestamp():
    snap = _coordinate_snapshot([2.0, 1.0])
    with pytest.raises(DimensionError, match="does not match"):
        coupling_matrix(snap, OperatorDerivative(np.zeros((2, 2)), timestamp=0.5))


# --- mode ODE --------------------------------------------------------------------------------

def test_rhs_worked_example():
    snap = _coordinate_snapshot([2.0, 1.0])
    omega = coupling_matrix(snap, OperatorDerivative(np.array([[0.0, 1.0], [1.0, 0.0]])))
    rhs = mode_ode_rhs(ModeState(0.0, np.array([1.0, 1.0])), snap, omega)
    assert np.allclose(rhs, [-1.0, -2.0])


def test_rhs_without_coupling_is_pure_dissipation():
    snap = _coordinate_snapshot([3.0, 0.5])
    omega = CouplingMatrix(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    g = ModeState(0.0, np.array([2.0, -4.0]))
    assert np.array_equal(mode_ode_rhs(g, snap, omega), [-6.0, 2.0])
    assert np.array_equal(mode_ode_rhs(ModeState(0.0, np.zeros(2)), snap, omega), [0.0, 0.0])


def test_energy_identity_of_rhs():
    rng = np.random.default_rng(4)
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    snap = SpectralSnapshot(0.0, np.array([5.0, 4.0, 2.5, 1.0, 0.1]), Q)
    B = rng.standard_normal((5, 5))
    omega = coupling_matrix(snap, OperatorDerivative(B + B.T))
    g = ModeState(0.0, rng.standard_normal(5))
    rhs = mode_ode_rhs(g, snap, omega)
    dissipated = np.sum(snap.eigenvalues * g.amplitudes ** 2)
    assert g.amplitudes @ rhs == pytest.approx(-dissipated, rel=1e-12)


def test_eigenvalue_velocity_is_diagonal_with_cluster_mean():
    snap = eigensystem(GramOperator(np.diag([3.0, 1.0, 1.0])))
    Mdot = OperatorDerivative(np.diag([0.5, 1.0, 3.0]))
    velocity = eigenvalue_velocity(snap, Mdot)
    assert velocity[0] == pytest.approx(0.5)
    assert np.allclose(velocity[1:], 2.0)


# --- residual -----------------------------------------------------------------------------------

def _frozen_records(eigenvalues, g0, h, steps):
    snap = _coordinate_snapshot(eigenvalues)
    zero = CouplingMatrix(np.zeros((len(g0),) * 2), np.zeros((len(g0),) * 2, dtype=bool))
    records = []
    for k in range(steps + 1):
        t = k * h
        g = g0 * np.exp(-np.asarray(eigenvalues) * t)
        coupling = zero if 0 < k < steps else None
        records.append(ModeRecord(ErrorVector(g, t), snap, ModeState(t, g), coupling))
    return records


def test_residual_of_closed_form_decay_is_second_order():
    lam = np.array([4.0, 1.0, 0.25])
    g0 = np.array([1.0, -2.0, 0.5])
    coarse = ode_residual(_frozen_records(lam, g0, 1e-3, 100), 1e-3)
    fine = ode_residual(_frozen_records(lam, g0, 5e-4, 200), 5e-4)
    assert coarse.usable_steps == 99
    assert coarse.excluded_steps == 0
    assert coarse.max_relative < 1e-5
    assert coarse.rms_relative / fine.rms_relative == pytest.approx(4.0, rel=0.05)


def _with_roundoff_on_last_mode(records, size, seed):
    noise = np.random.default_rng(seed).standard_normal(len(records)) * size
    out = []
    for r, eps in zip(records, noise):
        g = r.modes.amplitudes.copy()
        g[-1] += eps
        out.append(r._replace(modes=ModeState(r.modes.timestamp, g)))
    return out


def test_residual_aggregates_skip_ill_conditioned_modes():
    # the 1e-9 mode carries amplitude roundoff that central differences amplify
    lam = np.array([4.0, 1.0, 1e-9])
    g0 = np.array([1.0, -2.0, 1.0])
    coarse_records = _with_roundoff_on_last_mode(_frozen_records(lam, g0, 1e-3, 100), 1e-12, 0)
    fine_records = _with_roundoff_on_last_mode(_frozen_records(lam, g0, 5e-4, 200), 1e-12, 1)

    coarse, fine = ode_residual(coarse_records, 1e-3), ode_residual(fine_records, 5e-4)
    assert coarse.conditioned_modes == 2
    assert coarse.rms_relative / fine.rms_relative == pytest.approx(4.0, rel=0.05)
    assert coarse.rms_relative_all > 100 * coarse.rms_relative
    assert coarse.per_mode.size == 3

    everything = ode_residual(coarse_records, 1e-3, cond_floor=0.0)
    assert everything.conditioned_modes == 3
    assert everything.rms_relative / ode_residual(fine_records, 5e-4, cond_floor=0.0).rms_relative < 3.5
    with pytest.raises(ConfigError):
        ode_residual(coarse_records, 1e-3, cond_floor=1.0)


def test_residual_is_zero_for_constant_error_and_zero_operator():
    snap = SpectralSnapshot(0.0, np.zeros(0), np.zeros((3, 0)))
    omega = coupling_matrix(snap, OperatorDerivative(np.zeros((3, 3))))
    e = np.array([1.0, -1.0, 2.0])
    records = [
        ModeRecord(ErrorVector(e, t), snap, amplitudes(ErrorVector(e, t), snap, np.full(3, 1 / 3)), omega)
        for t in (0.0, 0.1, 0.2, 0.3)
    ]
    report = ode_residual(records, 0.1)
    assert report.max_relative == 0.0
    assert report.usable_steps == 2


def test_residual_of_rotating_eigenbasis():
    """ė = −M(t)e with M(t) rotating at a constant rate; the mode ODE must hold."""
    lam, rate, h, steps = np.array([2.0, 1.0]), 0.5, 1e-3, 200
    w = np.array([0.5, 0.5])

    def operator(t):
        c, s = np.cos(rate * t), np.sin(rate * t)
        Q = np.array([[c, -s], [s, c]])
        return (Q * lam) @ Q.T

    times = np.arange(steps + 1) * h
    solution = solve_ivp(lambda t, y: -operator(t) @ y, (0.0, times[-1]), [1.0, 0.3],
                         t_eval=times, rtol=1e-12, atol=1e-14, method='DOP853')
    ops = [GramOperator(operator(t), t) for t in times]
    snaps = [eigensystem(ops[0])]
    for M in ops[1:]:
        snaps.append(align_snapshots(snaps[-1], eigensystem(M)))

    records = []
    for k, t in enumerate(times):
        e = ErrorVector(solution.y[:, k] / np.sqrt(w), t)
        omega = None
        if 0 < k < steps:
            omega = coupling_matrix(snaps[k], operator_derivative(ops[k - 1], ops[k + 1], h))
        records.append(ModeRecord(e, snaps[k], amplitudes(e, snaps[k], w), omega))

    report = ode_residual(records, h)
    assert report.usable_fraction == 1.0
    assert report.rms_relative < 1e-5


def test_residual_needs_three_records():
    records = _frozen_records(np.array([1.0]), np.array([1.0]), 0.1, 1)
    with pytest.raises(DegenerateDataError):
        ode_residual(records, 0.1)


def test_residual_excludes_unusable_steps():
    records = _frozen_records(np.array([2.0, 1.0]), np.array([1.0, 1.0]), 1e-3, 10)
    bad = records[5]
    records[5] = bad._replace(snapshot=SpectralSnapshot(
        bad.snapshot.timestamp, bad.snapshot.eigenvalues, bad.snapshot.eigenvectors, usable=False))
    report = ode_residual(records, 1e-3)
    assert report.excluded_steps == 3
    assert report.usable_steps == 6


def test_residual_all_excluded_raises():
    records = _frozen_records(np.array([1.0]), np.array([1.0]), 0.1, 4)
    records = [r._replace(coupling=None) for r in records]
    with pytest.raises(DegenerateDataError):
        ode_residual(records, 0.1)
