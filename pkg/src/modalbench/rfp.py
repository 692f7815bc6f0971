"""Rational fraction polynomial (RFP) curve fitting of accelerance FRFs.

The FRF is modelled as ``N(jw) / D(jw)`` with a monic denominator of order
``2 * n_modes``.  Coefficients minimise the linearised error
``e = N(jw) - D(jw) H(w)``, which is a real linear least-squares problem in the
unknown coefficients.  Poles of the fitted denominator give natural
frequencies and damping ratios.

To keep the monomial bases well conditioned the fit is carried out in the
normalised variable ``s = jw / c`` with ``c`` the largest angular frequency in
the fitted lines; coefficients and poles are mapped back afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (TWO_PI, ConditioningError, FrequencyGrid, Frf, GridError,
                   ModalParameterSet, is_oscillatory, poles_to_modal)

log = logging.getLogger(__name__)

DEFAULT_EXTRA_TERMS = 6

# Identification bands (lower Hz, upper Hz, modes) used for the published LTC-05 FRF.
REFERENCE_BANDS = (
    (5.0, 9.0, 1), (12.0, 14.0, 1), (15.0, 19.0, 1), (22.0, 24.0, 2),
    (26.0, 30.0, 1), (30.5, 31.0, 1), (35.0, 37.0, 1), (40.5, 44.0, 2),
    (48.5, 54.0, 2), (86.0, 90.0, 1), (92.0, 100.0, 1), (112.0, 118.5, 1),
    (119.5, 122.0, 1), (122.0, 125.0, 1), (135.0, 138.0, 1), (154.0, 162.0, 1),
)


class EmptyBandError(GridError):
    pass


@dataclass(frozen=True)
class Band:
    lower: float
    upper: float
    modes: int = 1

    def __post_init__(self):
        if not 0 <= self.lower < self.upper:
            raise ValueError(f"band [{self.lower}, {self.upper}] must satisfy 0 <= lower < upper")
        if self.modes < 1:
            raise ValueError("a band must contain at least one mode")

    def contains(self, frequency_hz: float) -> bool:
        return self.lower <= frequency_hz <= self.upper


@dataclass(frozen=True)
class RfpConfig:
    n_modes: int = 1
    extra_numerator_terms: int = DEFAULT_EXTRA_TERMS
    bands: Optional[tuple] = None

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.extra_numerator_terms < 0:
            raise ValueError("extra_numerator_terms must be >= 0")
        if self.bands is not None:
            bands = tuple(b if isinstance(b, Band) else Band(*b) for b in self.bands)
            for prev, nxt in zip(bands, bands[1:]):
                if nxt.lower < prev.upper:
                    raise ValueError(
                        f"bands must be ascending and non-overlapping: {prev} then {nxt}")
            object.__setattr__(self, "bands", bands)

    @property
    def denominator_order(self) -> int:
        return 2 * self.n_modes

    @property
    def numerator_order(self) -> int:
        return 2 * self.n_modes + self.extra_numerator_terms


@dataclass(frozen=True)
class RfpResult:
    """Fitted rational model.

    Coefficients are in ascending powers of ``jw`` (w in rad/s); the last
    denominator coefficient is exactly 1.
    """

    modal: ModalParameterSet
    numerator_coeffs: np.ndarray
    denominator_coeffs: np.ndarray
    fit_residual: float
    band: Optional[tuple] = None
    scale: float = 1.0
    poles: tuple = ()
    computational_poles: tuple = ()
    condition: float = 1.0
    warnings: tuple = field(default=())

    @property
    def numerator_order(self) -> int:
        return self.numerator_coeffs.size - 1

    @property
    def denominator_order(self) -> int:
        return self.denominator_coeffs.size - 1

    def normalised_coeffs(self) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients in the scaled variable ``s = jw / scale``."""
        n = self.denominator_order
        a = self.numerator_coeffs / self.scale ** (n - np.arange(self.numerator_coeffs.size))
        b = self.denominator_coeffs / self.scale ** (n - np.arange(n + 1))
        return a, b


def _vander(s, order):
    return np.vander(s, order + 1, increasing=True)


def design_matrices(s, h, numerator_order: int, denominator_order: int):
    """``P``, ``T`` and ``w`` of the linearised error ``e = P a - (w + T b)``."""
    p = _vander(s, numerator_order)
    t = _vander(s, denominator_order - 1) * h[:, None] if denominator_order else np.zeros((s.size, 0))
    w = s ** denominator_order * h
    return p, t, w


def normal_equations(p, t, w):
    """Real block system ``M [a; b] = r`` obtained by zeroing the gradient of J."""
    ph, th = p.conj().T, t.conj().T
    m = np.real(np.block([[ph @ p, -ph @ t], [-th @ p, th @ t]]))
    r = np.real(np.concatenate([ph @ w, -th @ w]))
    return m, r


def objective(p, t, w, a, b) -> float:
    e = p @ a - (w + t @ b)
    return float(np.real(np.vdot(e, e)))


def _solve(p, t, w):
    """Minimise ``|P a - T b - w|`` over real ``a``, ``b`` by column-equilibrated
    QR/SVD least squares, which solves the normal equations without forming them."""
    g = np.hstack([p, -t])
    g_real = np.vstack([g.real, g.imag])
    w_real = np.concatenate([w.real, w.imag])
    norms = np.linalg.norm(g_real, axis=0)
    norms[norms == 0] = 1.0
    sol, _, rank, sv = np.linalg.lstsq(g_real / norms, w_real, rcond=None)
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if rank < g_real.shape[1]:
        raise ConditioningError("RFP normal equations are rank deficient", condition)
    x = sol / norms
    return x[:p.shape[1]], x[p.shape[1]:], condition


def _fit(frf: Frf, n_modes: int, extra_terms: int, band=None) -> RfpResult:
    n = 2 * n_modes
    m = n + extra_terms
    n_lines = len(frf.grid)
    if n_lines < n + extra_terms + 2:
        raise GridError(
            f"{n_lines} frequency lines cannot determine a fit with {n_modes} modes and "
            f"{extra_terms} extra numerator terms (need >= {n + extra_terms + 2})")
    omega = frf.grid.omega
    scale = float(omega.max())
    if scale <= 0:
        raise GridError("cannot fit an FRF sampled only at 0 Hz")
    s = 1j * omega / scale
    h = np.asarray(frf.values)
    p, t, w = design_matrices(s, h, m, n)
    a_n, b_n, condition = _solve(p, t, w)

    powers = n - np.arange(m + 1)
    numerator = a_n * scale ** powers
    b_full = np.append(b_n, 1.0)
    denominator = b_full * scale ** (n - np.arange(n + 1))
    denominator[-1] = 1.0
    residual = scale ** (2 * n) * objective(p, t, w, a_n, b_n)

    roots = [complex(r) for r in scale * np.roots(b_full[::-1])]
    kept = [r for r in roots if is_oscillatory(r)]
    if band is not None:
        lo, hi = band
        kept = [r for r in kept if lo <= abs(r) / TWO_PI <= hi]
    rejected = [r for r in roots if r not in kept]
    modal, _ = poles_to_modal(kept)
    if rejected:
        log.debug("discarded computational poles: %s", rejected)
    warnings = () if len(modal) else ("no admissible poles",)
    if warnings:
        log.warning("RFP fit%s found no admissible poles",
                    "" if band is None else f" in band {band}")
    kept.sort(key=abs)
    return RfpResult(modal, numerator, denominator, residual, band, scale,
                     tuple(kept), tuple(rejected), condition, warnings)


def fit_global(frf: Frf, config: RfpConfig) -> RfpResult:
    """Fit all lines of ``frf`` with ``config.n_modes`` modes."""
    return _fit(frf, config.n_modes, config.extra_numerator_terms)


def fit_banded(frf: Frf, config: RfpConfig) -> list[RfpResult]:
    """Independent fits over each band of ``config.bands``.

    Only poles whose natural frequency falls inside their band are reported.
    """
    if not config.bands:
        raise ValueError("fit_banded needs a configuration with bands")
    f = frf.frequencies
    results = []
    for band in config.bands:
        if band.lower < f[0] - 1e-9 or band.upper > f[-1] + 1e-9:
            raise GridError(f"band [{band.lower}, {band.upper}] Hz lies outside the FRF grid")
        try:
            sub = frf.band(band.lower, band.upper)
        except GridError as exc:
            raise EmptyBandError(str(exc)) from None
        results.append(_fit(sub, band.modes, config.extra_numerator_terms,
                            (band.lower, band.upper)))
    return results


def evaluate(result: RfpResult, frequencies_hz) -> np.ndarray:
    a, b = result.normalised_coeffs()
    s = 1j * TWO_PI * np.asarray(frequencies_hz, float) / result.scale
    return np.polyval(a[::-1], s) / np.polyval(b[::-1], s)


def reconstruct_frf(result: RfpResult, grid: FrequencyGrid) -> Frf:
    """Fitted rational function evaluated on ``grid``."""
    return Frf(grid, evaluate(result, grid.values), input_channel="rfp",
               output_channel="rfp")


def fit_error(result: RfpResult, frf: Frf) -> float:
    """Linearised objective ``sum |D(jw)|^2 |H_fit - H|^2`` on the lines of ``frf``.

    On the lines used for the fit this reproduces ``result.fit_residual``.
    """
    _, b = result.normalised_coeffs()
    s = 1j * frf.grid.omega / result.scale
    d = np.polyval(b[::-1], s)
    diff = evaluate(result, frf.frequencies) - frf.values
    return float(result.scale ** (2 * result.denominator_order) * np.sum(np.abs(d * diff) ** 2))


def modal_table(results: Sequence[RfpResult]) -> list[dict]:
    rows = []
    for r in results:
        lo, hi = r.band if r.band is not None else (np.nan, np.nan)
        for mode in r.modal:
            rows.append({"band_lower_hz": lo, "band_upper_hz": hi,
                         "frequency_hz": mode.frequency_hz,
                         "damping_ratio": mode.damping_ratio})
    return rows


def read_band_table(path) -> tuple:
    """Read ``lower_hz upper_hz modes`` rows (comma or whitespace separated).

    Blank lines, ``#`` comments and a non-numeric header row are skipped.
    """
    text = Path(path).read_text()
    bands = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            lo, hi, modes = float(parts[0]), float(parts[1]), parts[2]
        except (ValueError, IndexError):
            if not bands:
                continue
            raise ValueError(f"{path}:{lineno}: malformed band row {line!r}") from None
        bands.append(Band(lo, hi, int(float(modes))))
    if not bands:
        raise ValueError(f"{path}: no band rows found")
    return tuple(bands)


def write_band_table(path, bands) -> None:
    lines = ["lower_hz,upper_hz,modes"]
    for b in bands:
        b = b if isinstance(b, Band) else Band(*b)
        lines.append(f"{b.lower!r},{b.upper!r},{b.modes}")
    Path(path).write_text("\n".join(lines) + "\n")
