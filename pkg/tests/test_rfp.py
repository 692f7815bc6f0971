import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modalbench.core import ConditioningError, FrequencyGrid, Frf, GridError, ModalParameterSet
from modalbench.oracle import SyntheticSystem, frf_from_modal
from modalbench.rfp import (REFERENCE_BANDS, Band, EmptyBandError, RfpConfig, RfpResult,
                            design_matrices, evaluate, fit_banded, fit_error, fit_global,
                            modal_table, normal_equations, objective, read_band_table,
                            reconstruct_frf, write_band_table)

TWO_PI = 2 * np.pi


def synthetic(freqs, zetas, spacing=0.0625, top=50.0, noise=0.0, seed=0, shapes=None):
    grid = FrequencyGrid.from_range(0.0, top, spacing)
    system = SyntheticSystem.from_modes(freqs, zetas, shapes, noise_level=noise)
    return frf_from_modal(system, grid, seed=seed)


def test_single_mode_recovery():
    frf = synthetic([10.0], [0.02])
    res = fit_global(frf, RfpConfig(n_modes=1))
    assert len(res.modal) == 1
    assert res.modal[0].frequency_hz == pytest.approx(10.0, rel=1e-3)
    assert res.modal[0].damping_ratio == pytest.approx(0.02, rel=0.02)
    assert res.denominator_coeffs[-1] == 1.0
    assert res.fit_residual >= 0


def test_exact_rational_coefficients_recovered():
    # H = N/D with D monic of order 2 and N of order 2 + 2 extra terms, in jw (rad/s)
    wr, z = TWO_PI * 12.0, 0.03
    b = np.array([wr ** 2, 2 * z * wr, 1.0])
    a = np.array([3.0e3, -20.0, 1.5, 0.01, 2e-4])
    grid = FrequencyGrid.from_range(0.5, 40.0, 0.25)
    s = 1j * grid.omega
    h = np.polyval(a[::-1], s) / np.polyval(b[::-1], s)
    res = fit_global(Frf(grid, h), RfpConfig(n_modes=1, extra_numerator_terms=2))
    np.testing.assert_allclose(res.denominator_coeffs, b, rtol=1e-8)
    # compare per coefficient after scaling each power to the fit band
    scale = res.scale ** np.arange(a.size)
    np.testing.assert_allclose(res.numerator_coeffs * scale, a * scale,
                               atol=1e-8 * np.max(np.abs(a * scale)))


def test_too_few_lines():
    frf = Frf(FrequencyGrid.from_range(1.0, 5.0, 1.0), np.ones(5, complex))
    with pytest.raises(GridError):
        fit_global(frf, RfpConfig(n_modes=2, extra_numerator_terms=2))


def test_zero_frf_is_ill_conditioned():
    frf = Frf(FrequencyGrid.from_range(1.0, 20.0, 0.5), np.zeros(39, complex))
    with pytest.raises(ConditioningError) as info:
        fit_global(frf, RfpConfig(n_modes=1, extra_numerator_terms=0))
    assert info.value.condition > 1e8


def test_no_admissible_roots_warns(caplog):
    # two real poles: overdamped, nothing oscillatory to keep
    grid = FrequencyGrid.from_range(0.5, 30.0, 0.25)
    s = 1j * grid.omega
    h = 1.0 / ((s + 20.0) * (s + 90.0))
    with caplog.at_level(logging.WARNING):
        res = fit_global(Frf(grid, h), RfpConfig(n_modes=1, extra_numerator_terms=0))
    assert len(res.modal) == 0
    assert res.warnings
    assert "no admissible" in caplog.text


def test_config_validation():
    with pytest.raises(ValueError):
        RfpConfig(n_modes=0)
    with pytest.raises(ValueError):
        RfpConfig(bands=((5.0, 9.0, 0),))
    with pytest.raises(ValueError):
        RfpConfig(bands=((5.0, 9.0, 1), (8.0, 12.0, 1)))
    with pytest.raises(ValueError):
        RfpConfig(bands=((15.0, 19.0, 1), (5.0, 9.0, 1)))
    RfpConfig(bands=REFERENCE_BANDS)


def test_band_outside_grid_and_empty_band():
    frf = synthetic([10.0], [0.02], spacing=1.0)
    with pytest.raises(GridError):
        fit_banded(frf, RfpConfig(bands=((40.0, 60.0, 1),)))
    with pytest.raises(EmptyBandError):
        fit_banded(frf, RfpConfig(bands=((10.2, 10.7, 1),)))


def test_banded_beats_global_in_each_band():
    grid = FrequencyGrid.from_range(0.0, 200.0, 0.0625)
    system = SyntheticSystem.from_modes([20.0, 60.0, 110.0], [0.02, 0.01, 0.015],
                                        noise_level=0.01)
    noisy = frf_from_modal(system, grid, seed=3)
    glob = fit_global(noisy, RfpConfig(n_modes=3))
    bands = ((15.0, 25.0, 1), (55.0, 65.0, 1), (100.0, 120.0, 1))
    banded = fit_banded(noisy, RfpConfig(n_modes=1, bands=bands))
    assert len(banded) == 3
    for res, (lo, hi, _) in zip(banded, bands):
        sub = noisy.band(lo, hi)
        e_band = np.sum(np.abs(evaluate(res, sub.frequencies) - sub.values) ** 2)
        e_glob = np.sum(np.abs(evaluate(glob, sub.frequencies) - sub.values) ** 2)
        assert e_band <= e_glob
        assert all(lo <= m.frequency_hz <= hi for m in res.modal)


def test_residual_reproduced_on_fit_lines():
    frf = synthetic([10.0, 30.0], [0.02, 0.01], noise=0.02, seed=1)
    res = fit_global(frf, RfpConfig(n_modes=2))
    assert fit_error(res, frf) == pytest.approx(res.fit_residual, rel=1e-10)


def test_identity_rational_function():
    res = RfpResult(ModalParameterSet(), np.array([1.0]), np.array([1.0]), 0.0)
    grid = FrequencyGrid.from_range(0.0, 100.0, 5.0)
    np.testing.assert_array_equal(reconstruct_frf(res, grid).values, np.ones(len(grid)))


def test_reconstruction_overlays_oracle():
    frf = synthetic([10.0, 30.0], [0.02, 0.01])
    res = fit_global(frf, RfpConfig(n_modes=2))
    rebuilt = reconstruct_frf(res, frf.grid)
    lines = frf.frequencies > 0
    rel = np.abs(rebuilt.values[lines] / frf.values[lines] - 1)
    assert rel.max() < 0.005


def _system_matrices(seed):
    frf = synthetic([10.0, 30.0], [0.02, 0.01], noise=0.05, seed=seed)
    res = fit_global(frf, RfpConfig(n_modes=2, extra_numerator_terms=2))
    a_n, b_n = res.normalised_coeffs()
    s = 1j * frf.grid.omega / res.scale
    p, t, w = design_matrices(s, frf.values, a_n.size - 1, b_n.size - 1)
    return p, t, w, a_n, b_n[:-1]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_normal_equations_symmetric_psd(seed):
    p, t, w, _, _ = _system_matrices(seed)
    m, _ = normal_equations(p, t, w)
    assert np.max(np.abs(m - m.T)) <= 1e-10 * np.max(np.abs(m))
    eig = np.linalg.eigvalsh((m + m.T) / 2)
    assert eig.min() >= -1e-8 * eig.max()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_solution_is_locally_optimal(seed):
    p, t, w, a, b = _system_matrices(seed)
    j0 = objective(p, t, w, a, b)
    rng = np.random.default_rng(seed)
    for _ in range(20):
        d = rng.standard_normal(a.size + b.size)
        d *= 1e-3 / np.linalg.norm(d)
        assert objective(p, t, w, a + d[:a.size], b + d[a.size:]) >= j0 * (1 - 1e-12)


def test_retained_poles_have_conjugate_partners():
    frf = synthetic([8.0, 21.0, 35.0], [0.02, 0.03, 0.01], noise=0.02, seed=2)
    res = fit_global(frf, RfpConfig(n_modes=3))
    raw = np.roots(res.denominator_coeffs[::-1])
    assert res.poles
    for pole in res.poles:
        assert np.min(np.abs(raw - np.conj(pole))) <= 1e-8 * abs(pole)


def test_frequency_weighting_bias():
    shapes = [[1.0], [np.sqrt(0.001 / 0.03)]]
    grid = FrequencyGrid.from_range(0.0, 200.0, 0.0625)
    clean = frf_from_modal(SyntheticSystem.from_modes([5.0, 150.0], [0.03, 0.001], shapes), grid)
    noisy = frf_from_modal(SyntheticSystem.from_modes([5.0, 150.0], [0.03, 0.001], shapes,
                                                      noise_level=0.01), grid, seed=0)
    glob = fit_global(noisy, RfpConfig(n_modes=2))

    def err(res, lo, hi):
        sub = clean.band(lo, hi)
        return np.linalg.norm(evaluate(res, sub.frequencies) - sub.values) / np.linalg.norm(sub.values)

    assert err(glob, 148.5, 151.5) <= err(glob, 3.5, 6.5)


def test_band_table_roundtrip(tmp_path):
    path = tmp_path / "bands.csv"
    write_band_table(path, REFERENCE_BANDS)
    assert read_band_table(path) == tuple(Band(*b) for b in REFERENCE_BANDS)
    path.write_text("# lower upper modes\n5 9 1\n\n15 19 1  # second\n")
    assert read_band_table(path) == (Band(5.0, 9.0, 1), Band(15.0, 19.0, 1))
    path.write_text("5 9 1\n15 nineteen 1\n")
    with pytest.raises(ValueError):
        read_band_table(path)


def test_modal_table_labels_bands():
    frf = synthetic([10.0, 30.0], [0.02, 0.01])
    results = fit_banded(frf, RfpConfig(bands=((7.0, 13.0, 1), (26.0, 34.0, 1))))
    rows = modal_table(results)
    assert [r["band_lower_hz"] for r in rows] == [7.0, 26.0]
    assert rows[1]["frequency_hz"] == pytest.approx(30.0, rel=1e-4)
