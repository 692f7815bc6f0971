"""Shared domain types and pole/modal-parameter conversions.

Frequencies cross every public boundary in Hz.  Angular frequency (rad/s)
only appears inside numerical kernels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

UNITS = ("g", "N", "V")


class ModalBenchError(Exception):
    """Base class for all package errors."""


class DegeneratePoleError(ModalBenchError, ValueError):
    pass


class GridError(ModalBenchError, ValueError):
    pass


class AlignmentError(ModalBenchError, ValueError):
    """Inputs that must share a shape, length or sample rate do not."""


class ConditioningError(ModalBenchError, ArithmeticError):
    """A linear system was too ill-conditioned to solve reliably."""

    def __init__(self, message: str, condition: float = float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FrequencyGrid:
    """Uniform, strictly increasing, non-negative frequency lines in Hz."""

    values: np.ndarray
    spacing: float = field(init=False)

    def __post_init__(self):
        values = _frozen_array(self.values)
        if values.ndim != 1 or values.size == 0:
            raise GridError("frequency grid must be a non-empty 1-D sequence")
        if np.any(values < 0):
            raise GridError("frequency grid values must be >= 0")
        if values.size == 1:
            spacing = 0.0
        else:
            steps = np.diff(values)
            spacing = float(np.mean(steps))
            if spacing <= 0 or np.any(steps <= 0):
                raise GridError("frequency grid must be strictly increasing")
            if np.max(np.abs(steps - spacing)) > 1e-9 * max(spacing, values[-1]):
                raise GridError("frequency grid must be uniformly spaced")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def from_range(cls, start: float, stop: float, spacing: float) -> "FrequencyGrid":
        """Grid from ``start`` to ``stop`` inclusive (when commensurate)."""
        n = int(np.floor((stop - start) / spacing + 1e-9)) + 1
        return cls(start + spacing * np.arange(n))

    @classmethod
    def for_record(cls, n_samples: int, sample_rate: float) -> "FrequencyGrid":
        """One-sided DFT lines of a record of ``n_samples`` at ``sample_rate``."""
        return cls(np.fft.rfftfreq(n_samples, d=1.0 / sample_rate))

    def __len__(self) -> int:
        return self.values.size

    @property
    def omega(self) -> np.ndarray:
        return TWO_PI * self.values

    def restrict(self, lower: float, upper: float) -> tuple["FrequencyGrid", np.ndarray]:
        """Sub-grid of lines within ``[lower, upper]`` and the boolean mask used."""
        tol = 1e-9 * max(self.spacing, 1.0)
        mask = (self.values >= lower - tol) & (self.values <= upper + tol)
        if not mask.any():
            raise GridError(f"no frequency lines in [{lower}, {upper}] Hz")
        return FrequencyGrid(self.values[mask]), mask


@dataclass(frozen=True)
class Frf:
    """Complex frequency response samples on a grid, optionally with coherence."""

    grid: FrequencyGrid
    values: np.ndarray
    coherence: Optional[np.ndarray] = None
    input_channel: str = "in"
    output_channel: str = "out"

    def __post_init__(self):
        values = _frozen_array(self.values, complex)
        if values.shape != (len(self.grid),):
            raise AlignmentError(
                f"FRF has {values.size} values for a grid of {len(self.grid)} lines")
        object.__setattr__(self, "values", values)
        if self.coherence is not None:
            coh = _frozen_array(self.coherence)
            if coh.shape != values.shape:
                raise AlignmentError("coherence length differs from FRF length")
            if np.any(coh < 0) or np.any(coh > 1):
                raise ValueError("coherence must lie in [0, 1]")
            object.__setattr__(self, "coherence", coh)

    @property
    def frequencies(self) -> np.ndarray:
        return self.grid.values

    def band(self, lower: float, upper: float) -> "Frf":
        sub, mask = self.grid.restrict(lower, upper)
        coh = None if self.coherence is None else self.coherence[mask]
        return Frf(sub, self.values[mask], coh, self.input_channel, self.output_channel)

    def scaled(self, factor: float) -> "Frf":
        return Frf(self.grid, self.values * factor, self.coherence,
                   self.input_channel, self.output_channel)


@dataclass(frozen=True)
class Mode:
    """One real normal mode.

    ``shape`` holds modeshape ordinates at the measured locations; the residue
    of an input/output pair is the product of two ordinates.  Identified modes
    carry no shape.
    """

    frequency_hz: float
    damping_ratio: float
    shape: Optional[tuple] = None

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise ValueError(f"natural frequency must be > 0, got {self.frequency_hz}")
        if not 0 <= self.damping_ratio < 1:
            raise ValueError(f"damping ratio must lie in [0, 1), got {self.damping_ratio}")
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(float(v) for v in self.shape))

    @property
    def omega(self) -> float:
        return TWO_PI * self.frequency_hz

    def residue(self, input_index: int, output_index: int) -> float:
        if self.shape is None:
            raise ValueError("mode has no modeshape; residue undefined")
        return self.shape[input_index] * self.shape[output_index]

    @property
    def pole(self) -> complex:
        return modal_to_pole(self.frequency_hz, self.damping_ratio)


@dataclass(frozen=True)
class ModalParameterSet:
    """Modes sorted ascending by natural frequency."""

    modes: tuple = ()

    def __post_init__(self):
        modes = tuple(self.modes)
        freqs = [m.frequency_hz for m in modes]
        if any(b < a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("modes must be sorted ascending by natural frequency")
        object.__setattr__(self, "modes", modes)

    @classmethod
    def from_arrays(cls, frequencies_hz, damping_ratios, shapes=None) -> "ModalParameterSet":
        frequencies_hz = np.atleast_1d(np.asarray(frequencies_hz, float))
        damping_ratios = np.broadcast_to(np.asarray(damping_ratios, float), frequencies_hz.shape)
        order = np.argsort(frequencies_hz, kind="stable")
        modes = []
        for i in order:
            shape = None if shapes is None else tuple(np.atleast_1d(shapes[i]))
            modes.append(Mode(float(frequencies_hz[i]), float(damping_ratios[i]), shape))
        return cls(tuple(modes))

    def __len__(self) -> int:
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    def __getitem__(self, i) -> Mode:
        return self.modes[i]

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([m.frequency_hz for m in self.modes])

    @property
    def damping(self) -> np.ndarray:
        return np.array([m.damping_ratio for m in self.modes])

    def in_band(self, lower: float, upper: float) -> "ModalParameterSet":
        return ModalParameterSet(tuple(m for m in self.modes
                                       if lower <= m.frequency_hz <= upper))


@dataclass(frozen=True)
class TimeSeriesRecord:
    samples: np.ndarray
    sample_rate: float
    channel: str = "ch0"
    units: str = "g"

    def __post_init__(self):
        samples = _frozen_array(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("time series must be a non-empty 1-D sequence")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be > 0")
        if self.units not in UNITS:
            raise ValueError(f"units must be one of {UNITS}, got {self.units!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate

    def with_samples(self, samples) -> "TimeSeriesRecord":
        return TimeSeriesRecord(samples, self.sample_rate, self.channel, self.units)


def pole_to_modal(pole: complex) -> tuple[float, float]:
    """Natural frequency (Hz) and damping ratio of a continuous-time pole.

    Overdamped (real) poles return ``damping_ratio >= 1``; callers decide
    whether to keep them, see :func:`is_oscillatory`.
    """
    pole = complex(pole)
    magnitude = abs(pole)
    if magnitude == 0 or not np.isfinite(magnitude):
        raise DegeneratePoleError(f"cannot convert pole {pole} to modal parameters")
    return magnitude / TWO_PI, -pole.real / magnitude


def modal_to_pole(frequency_hz: float, damping_ratio: float) -> complex:
    """Upper-half-plane pole for the given natural frequency and damping."""
    w = TWO_PI * frequency_hz
    return complex(-damping_ratio * w, w * np.sqrt(1.0 - damping_ratio ** 2))


def discrete_to_continuous(eigenvalues, dt: float) -> np.ndarray:
    """Map discrete-time eigenvalues to continuous poles via ``ln(z) / dt``."""
    return np.log(np.asarray(eigenvalues, complex)) / dt


def is_oscillatory(pole: complex) -> bool:
    """True for poles yielding a physical mode: Im > 0 and 0 <= zeta < 1."""
    pole = complex(pole)
    if pole.imag <= 0 or abs(pole) == 0:
        return False
    _, zeta = pole_to_modal(pole)
    return 0 <= zeta < 1


def poles_to_modal(poles: Sequence[complex]) -> tuple[ModalParameterSet, list]:
    """Split poles into a modal set and the rejected (non-physical) remainder."""
    kept, rejected = [], []
    for p in poles:
        (kept if is_oscillatory(p) else rejected).append(complex(p))
    if kept:
        fz = np.array([pole_to_modal(p) for p in kept])
        modal = ModalParameterSet.from_arrays(fz[:, 0], fz[:, 1])
    else:
        modal = ModalParameterSet()
    return modal, rejected
