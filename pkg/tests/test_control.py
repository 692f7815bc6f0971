import csv

import numpy as np
import pytest
from scipy import stats

from modalbench.core import FrequencyGrid, GridError
from modalbench.control import (ControlState, ConvergenceWarning, ForcePath, LoopConfig,
                                TargetSpectrum, drive_signal, initial_state, make_target,
                                periodogram_lines, ramp_power_factor, ramped_profile, run_loop,
                                save_psds, update_transfer, write_history_csv)
from modalbench.oracle import linear_ramp

FS, N = 512.0, 4096
GRID = FrequencyGrid.for_record(N, FS)


def band_target(seed=0, level=1.0, kind="random_phase"):
    return make_target(kind, GRID, ramped_profile(10.0, 200.0, 5.0, level), seed=seed)


def test_odd_phase_zeroes_alternate_lines():
    t = make_target("odd_phase", GRID, 2.0, seed=4)
    # 1-based odd positions are the even 0-based indices
    assert not np.any(t.magnitude[0::2]) and not np.any(t.phase[0::2])
    assert np.all(t.magnitude[1::2] == 2.0)


def test_target_determinism_and_profile():
    a, b = band_target(seed=9), band_target(seed=9)
    np.testing.assert_array_equal(a.phase, b.phase)
    np.testing.assert_array_equal(a.magnitude, b.magnitude)
    assert not np.array_equal(a.phase, band_target(seed=10).phase)
    f = GRID.values
    assert np.all(a.magnitude[(f < 10) | (f > 200)] == 0)
    assert np.all(a.magnitude[(f >= 15) & (f <= 195)] == 1.0)
    assert a.magnitude[np.searchsorted(f, 12.5)] == pytest.approx(0.5)


def test_target_validation():
    with pytest.raises(ValueError):
        make_target("chirp", GRID)
    with pytest.raises(ValueError):
        TargetSpectrum(GRID, -np.ones(len(GRID)), np.zeros(len(GRID)))


def test_phases_are_uniform():
    grid = FrequencyGrid.from_range(0.0, 99_999.0, 1.0)
    phase = make_target("random_phase", grid, seed=123).phase
    assert phase.min() >= 0 and phase.max() < 2 * np.pi
    counts, _ = np.histogram(phase, bins=50, range=(0, 2 * np.pi))
    assert stats.chisquare(counts).pvalue > 0.01


def test_single_line_drive_is_ramped_sine():
    target = make_target("random_phase", GRID, 0.0, seed=2)
    mag = np.zeros(len(GRID))
    line = 80
    mag[line] = 1.0
    target = TargetSpectrum(GRID, mag, target.phase)
    config = LoopConfig()
    x = drive_signal(initial_state(target), target, config, N, FS)
    t = np.arange(N) / FS
    df = FS / N
    expected = np.sqrt(2 * df) * np.sin(2 * np.pi * GRID.values[line] * t + target.phase[line])
    np.testing.assert_allclose(x.samples, expected * linear_ramp(N, config.ramp_fraction),
                               atol=1e-12)
    assert x.units == "V"


def test_zero_drive_is_silent():
    target = band_target()
    state = ControlState(np.ones(len(GRID)), np.zeros(len(GRID)))
    assert not np.any(drive_signal(state, target, LoopConfig(), N, FS).samples)


def test_parseval_with_ramp_loss():
    target = band_target(seed=5)
    config = LoopConfig(ramp_fraction=0.05)
    x = drive_signal(initial_state(target), target, config, N, FS).samples
    integrated = np.sum(target.magnitude) * FS / N
    assert np.mean(x ** 2) == pytest.approx(integrated * ramp_power_factor(0.05), rel=0.02)


def test_grid_mismatch():
    target = band_target()
    with pytest.raises(GridError):
        drive_signal(initial_state(target), target, LoopConfig(), N // 2 + 1, FS)
    with pytest.raises(GridError):
        periodogram_lines(drive_signal(initial_state(target), target, LoopConfig(), N, FS),
                          FrequencyGrid([1.0 / 3.0]))


def test_exact_measurement_converges():
    target = band_target()
    state = update_transfer(initial_state(target), target.magnitude, target, LoopConfig())
    assert state.error == 0.0 and state.converged
    np.testing.assert_array_equal(state.drive_psd, target.magnitude)


def test_update_fixed_point():
    target = band_target()
    rng = np.random.default_rng(0)
    h = rng.uniform(0.5, 2.0, len(GRID))
    drive = np.where(target.active, target.magnitude / h ** 2, 0.0)
    state = ControlState(h, drive, iteration=4)
    new = update_transfer(state, target.magnitude, target, LoopConfig(alpha=0.6))
    np.testing.assert_allclose(new.transfer_estimate, h, rtol=1e-12)
    np.testing.assert_allclose(new.drive_psd, drive, rtol=1e-12)
    assert new.iteration == 5


def test_alpha_zero_freezes_estimate():
    with pytest.warns(ConvergenceWarning):
        config = LoopConfig(alpha=0.0)
    target = band_target()
    state = update_transfer(initial_state(target), 4 * target.magnitude, target, config)
    np.testing.assert_array_equal(state.transfer_estimate, np.ones(len(GRID)))
    assert not state.converged


def test_zero_measurement_is_floored():
    target = band_target()
    measured = target.magnitude.copy()
    measured[100] = 0.0
    state = update_transfer(initial_state(target), measured, target, LoopConfig())
    assert state.floored_lines == (100,)
    assert np.all(np.isfinite(state.drive_psd)) and np.all(state.transfer_estimate > 0)


def test_config_validation():
    for kwargs in ({"alpha": 1.5}, {"alpha": -0.1}, {"target_error": 0.0},
                   {"max_iterations": 0}, {"ramp_fraction": 0.5}):
        with pytest.raises(ValueError):
            LoopConfig(**kwargs)


def test_unity_plant_converges_at_once():
    result = run_loop(ForcePath(), band_target(), LoopConfig(), N, FS)
    assert result.iterations == 1 and result.converged
    assert result.final.error <= 1e-20


def test_constant_gain_plant():
    result = run_loop(ForcePath(gain=2.0), band_target(), LoopConfig(alpha=0.8), N, FS)
    assert result.converged and result.iterations <= 10
    errors = [s.error for s in result.history]
    assert all(b < a for a, b in zip(errors, errors[1:]))


def test_full_step_on_static_plant():
    target = band_target()
    result = run_loop(ForcePath(gain=2.0), target, LoopConfig(alpha=1.0), N, FS)
    assert result.iterations == 2 and result.converged
    np.testing.assert_allclose(result.final.measured_psd, target.magnitude, atol=1e-12)


def test_resonant_plant_with_noise():
    plant = ForcePath.from_modes([60.0], [0.05], noise_level=0.01)
    wins = 0
    for seed in range(100):
        res = run_loop(plant, band_target(seed=seed), LoopConfig(max_iterations=20), N, FS,
                       seed=seed)
        wins += res.converged and res.final.error < 0.01
    assert wins >= 95


def test_homogeneity():
    plant = ForcePath.from_modes([60.0], [0.05])
    one = run_loop(plant, band_target(), LoopConfig(), N, FS)
    two = run_loop(plant, band_target(level=2.0), LoopConfig(target_error=4 * 0.01), N, FS)
    assert one.iterations == two.iterations
    np.testing.assert_allclose(two.final.drive_psd, 2 * one.final.drive_psd, rtol=1e-9, atol=1e-15)


def test_zero_target_lines_stay_silent():
    plant = ForcePath.from_modes([60.0], [0.05], noise_level=0.05)
    target = band_target(kind="odd_phase")
    result = run_loop(plant, target, LoopConfig(max_iterations=6, target_error=1e-9), N, FS)
    for psd in list(result.drive_psds) + [s.drive_psd for s in result.history]:
        assert not np.any(psd[~target.active])


def test_timeout_keeps_best_state():
    plant = ForcePath.from_modes([60.0], [0.05], noise_level=0.05)
    result = run_loop(plant, band_target(), LoopConfig(max_iterations=3, target_error=1e-12),
                      N, FS)
    assert result.timed_out and result.iterations == 3
    assert result.best.error == min(s.error for s in result.history)
    history, drive = result
    assert len(history) == 3 and len(drive) == N


def test_exports(tmp_path):
    result = run_loop(ForcePath(gain=2.0), band_target(), LoopConfig(), N, FS)
    write_history_csv(result, tmp_path / "history.csv")
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == list(range(1, result.iterations + 1))
    assert float(rows[-1]["epsilon"]) == result.final.error
    assert rows[-1]["converged"] == "1"
    paths = save_psds(result, tmp_path / "psds")
    assert len(paths) == 2 + 2 * result.iterations
    np.testing.assert_array_equal(np.load(tmp_path / "psds" / "target_psd.npy"),
                                  result.target.magnitude)
