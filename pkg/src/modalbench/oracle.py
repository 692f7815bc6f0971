"""Synthetic ground truth: analytic accelerance FRFs, simulated responses and
excitation signals built from a known set of real normal modes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .core import (TWO_PI, FrequencyGrid, Frf, ModalBenchError, ModalParameterSet,
                   TimeSeriesRecord)

EXCITATION_KINDS = ("burst_random", "sine_sweep_linear", "sine_sweep_log",
                    "multisine_random_phase", "multisine_odd_phase")

# sample_rate / highest frequency of interest
BANDWIDTH_FACTOR = 2.56


class SingularityError(ModalBenchError, ZeroDivisionError):
    pass


class BandwidthError(ModalBenchError, ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSystem:
    """A linear structure defined by its modes.

    Every mode must carry a modeshape with ``output_count`` ordinates; the
    force is applied at location ``input_index``.
    """

    modal: ModalParameterSet
    output_count: int = 1
    noise_level: float = 0.0
    input_index: int = 0

    def __post_init__(self):
        if self.output_count < 1:
            raise ValueError("output_count must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if len(self.modal) == 0:
            raise ValueError("synthetic system needs at least one mode")
        for m in self.modal:
            if m.shape is None or len(m.shape) != self.output_count:
                raise ValueError(
                    f"mode at {m.frequency_hz} Hz needs a shape of length {self.output_count}")
        if not 0 <= self.input_index < self.output_count:
            raise ValueError("input_index out of range")

    @classmethod
    def from_modes(cls, frequencies_hz, damping_ratios, shapes=None, noise_level=0.0,
                   input_index=0) -> "SyntheticSystem":
        frequencies_hz = np.atleast_1d(np.asarray(frequencies_hz, float))
        if shapes is None:
            shapes = np.ones((frequencies_hz.size, 1))
        shapes = np.atleast_2d(np.asarray(shapes, float))
        modal = ModalParameterSet.from_arrays(frequencies_hz, damping_ratios, shapes)
        return cls(modal, shapes.shape[1], noise_level, input_index)

    def residues(self, input_index: Optional[int] = None, output_index: int = 0) -> np.ndarray:
        i = self.input_index if input_index is None else input_index
        return np.array([m.residue(i, output_index) for m in self.modal])

    @property
    def max_frequency(self) -> float:
        return float(self.modal.frequencies.max())


def modal_accelerance(frequencies_hz, natural_hz, damping, residues) -> np.ndarray:
    """Sum of modal accelerance terms evaluated at arbitrary real frequencies.

    Negative frequencies are allowed, which makes conjugate symmetry testable.
    """
    w = TWO_PI * np.asarray(frequencies_hz, float)[:, None]
    wr = TWO_PI * np.asarray(natural_hz, float)[None, :]
    zeta = np.asarray(damping, float)[None, :]
    res = np.asarray(residues, float)[None, :]
    den = -w ** 2 + 2j * zeta * wr * w + wr ** 2
    if np.any(den == 0):
        raise SingularityError("frequency line coincides with an undamped natural frequency")
    return np.sum(-w ** 2 * res / den, axis=1)


def frf_from_modal(system: SyntheticSystem, grid: FrequencyGrid, input_index=None,
                   output_index: int = 0, seed: int = 0) -> Frf:
    """Analytic accelerance FRF, with complex Gaussian noise when the system
    has a non-zero ``noise_level`` (relative to the RMS FRF magnitude)."""
    modal = system.modal
    i = system.input_index if input_index is None else input_index
    values = modal_accelerance(grid.values, modal.frequencies, modal.damping,
                               system.residues(i, output_index))
    if system.noise_level > 0:
        rng = np.random.default_rng(seed)
        sigma = system.noise_level * np.sqrt(np.mean(np.abs(values) ** 2))
        noise = rng.standard_normal(values.size) + 1j * rng.standard_normal(values.size)
        values = values + sigma * noise / np.sqrt(2)
    return Frf(grid, values, input_channel=f"in{i}", output_channel=f"out{output_index}")


def _mode_filter(natural_hz: float, zeta: float, dt: float):
    """First-order-hold discretised transfer from modal force to modal
    acceleration.

    A zero-order hold delays the resonant part by half a sample relative to
    the direct (feedthrough) part of the accelerance, which badly distorts
    the response well below resonance where the two nearly cancel.
    """
    w = TWO_PI * natural_hz
    a = np.array([[0.0, 1.0], [-w ** 2, -2 * zeta * w]])
    b = np.array([[0.0], [1.0]])
    c = np.array([[-w ** 2, -2 * zeta * w]])
    d = np.array([[1.0]])
    ad, bd, cd, dd, _ = signal.cont2discrete((a, b, c, d), dt, method="foh")
    num, den = signal.ss2tf(ad, bd, cd, dd)
    return num[0], den


def simulate_response(system: SyntheticSystem, drive: TimeSeriesRecord, seed: int = 0,
                      periodic: bool = False) -> list[TimeSeriesRecord]:
    """Acceleration at every output location for a force ``drive``.

    The modal model is discretised with a first-order hold, so the recursion
    is exact for piecewise-linear input.  ``periodic=True`` instead returns
    the exact steady-state response to the drive repeated end to end: each
    DFT line of the drive is multiplied by the analytic accelerance, so the
    record obeys ``Y = H X`` line by line.
    """
    if drive.sample_rate < BANDWIDTH_FACTOR * system.max_frequency:
        raise BandwidthError(
            f"sample rate {drive.sample_rate} Hz is below {BANDWIDTH_FACTOR} x the highest "
            f"mode ({system.max_frequency} Hz)")
    u = np.asarray(drive.samples, float)
    dt = drive.dt
    if periodic:
        n = u.size
        f = np.fft.rfftfreq(n, dt)
        spec = np.fft.rfft(u)
        modal_acc = []
        for mode in system.modal:
            h = modal_accelerance(f, [mode.frequency_hz], [mode.damping_ratio], [1.0])
            if n % 2 == 0:
                h[-1] = h[-1].real  # the Nyquist line of a real record is real
            modal_acc.append(np.fft.irfft(h * spec, n))
    else:
        modal_acc = [signal.lfilter(*_mode_filter(m.frequency_hz, m.damping_ratio, dt), u)
                     for m in system.modal]
    modal_acc = np.asarray(modal_acc)

    rng = np.random.default_rng(seed)
    records = []
    for out in range(system.output_count):
        y = system.residues(None, out) @ modal_acc
        if system.noise_level > 0:
            rms = np.sqrt(np.mean(y ** 2))
            y = y + system.noise_level * rms * rng.standard_normal(y.size)
        records.append(TimeSeriesRecord(y, drive.sample_rate, f"out{out}", "g"))
    return records


@dataclass(frozen=True)
class ExcitationSpec:
    """Excitation definition.

    Sweep limits default to 1 Hz and ``sample_rate / 2.56``.  Multisine lines
    default to every DFT line of the record inside the sweep limits, with unit
    relative amplitudes and (for random phase) seeded uniform phases.
    """

    kind: str
    direction: str = "forward"
    amplitude: float = 1.0
    active_fraction: float = 0.9
    seed: int = 0
    f_start: Optional[float] = None
    f_stop: Optional[float] = None
    ramp_fraction: float = 0.05
    frequencies: Optional[Sequence[float]] = None
    amplitudes: Optional[Sequence[float]] = None
    phases: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.kind not in EXCITATION_KINDS:
            raise ValueError(f"unknown excitation kind {self.kind!r}")
        if self.direction not in ("forward", "reverse"):
            raise ValueError("direction must be 'forward' or 'reverse'")
        if not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must lie in (0, 1]")
        if not 0 <= self.ramp_fraction < 0.5:
            raise ValueError("ramp_fraction must lie in [0, 0.5)")


def active_window(n_samples: int, active_fraction: float) -> slice:
    """Central slice occupying ``active_fraction`` of the record."""
    n_active = int(round(n_samples * active_fraction))
    start = (n_samples - n_active) // 2
    return slice(start, start + n_active)


def linear_ramp(n: int, ramp_fraction: float) -> np.ndarray:
    """Trapezoidal window rising/falling linearly over ``ramp_fraction`` of ``n``."""
    window = np.ones(n)
    n_ramp = int(round(n * ramp_fraction))
    if n_ramp > 0:
        edge = np.arange(1, n_ramp + 1) / (n_ramp + 1)
        window[:n_ramp] = edge
        window[n - n_ramp:] = edge[::-1]
    return window


def multisine(t, frequencies, amplitudes, phases) -> np.ndarray:
    """Direct sum of sines, ``sum_i A_i sin(2 pi f_i t + phi_i)``."""
    t = np.asarray(t, float)
    out = np.zeros_like(t)
    for f, a, p in zip(frequencies, amplitudes, phases):
        if a != 0:
            out += a * np.sin(TWO_PI * f * t + p)
    return out


def zero_odd_lines(values) -> np.ndarray:
    """Zero the entries at odd 1-based positions (1, 3, 5, ...)."""
    values = np.array(values, dtype=float, copy=True)
    values[0::2] = 0.0
    return values


def multisine_lines(spec: ExcitationSpec, n_samples: int, sample_rate: float):
    """Frequencies, amplitudes and phases of a multisine excitation."""
    f_lo = 1.0 if spec.f_start is None else spec.f_start
    f_hi = sample_rate / BANDWIDTH_FACTOR if spec.f_stop is None else spec.f_stop
    if spec.frequencies is None:
        lines = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
        freqs = lines[(lines >= f_lo) & (lines <= f_hi)]
    else:
        freqs = np.asarray(spec.frequencies, float)
    amps = np.ones(freqs.size) if spec.amplitudes is None else np.asarray(spec.amplitudes, float)
    if spec.phases is None:
        phases = np.random.default_rng(spec.seed).uniform(0.0, TWO_PI, freqs.size)
    else:
        phases = np.asarray(spec.phases, float)
    if not (amps.size == phases.size == freqs.size):
        raise ValueError("multisine frequency, amplitude and phase vectors differ in length")
    amps = spec.amplitude * amps
    if spec.kind == "multisine_odd_phase":
        amps, phases = zero_odd_lines(amps), zero_odd_lines(phases)
    return freqs, amps, phases


def generate_excitation(spec: ExcitationSpec, n_samples: int, sample_rate: float) -> TimeSeriesRecord:
    """Deterministic excitation record for ``spec``.

    Burst random and sweeps occupy the central ``active_fraction`` of the
    record and are exactly zero outside it.  Multisines span the full record.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be > 0")
    t = np.arange(n_samples) / sample_rate
    x = np.zeros(n_samples)

    if spec.kind.startswith("multisine"):
        freqs, amps, phases = multisine_lines(spec, n_samples, sample_rate)
        x = multisine(t, freqs, amps, phases)
        return TimeSeriesRecord(x, sample_rate, "drive", "V")

    window = active_window(n_samples, spec.active_fraction)
    n_active = window.stop - window.start
    if spec.kind == "burst_random":
        rng = np.random.default_rng(spec.seed)
        burst = spec.amplitude * rng.standard_normal(n_active)
        x[window] = burst * linear_ramp(n_active, spec.ramp_fraction)
    else:
        f0 = 1.0 if spec.f_start is None else spec.f_start
        f1 = sample_rate / BANDWIDTH_FACTOR if spec.f_stop is None else spec.f_stop
        if spec.direction == "reverse":
            f0, f1 = f1, f0
        method = "linear" if spec.kind == "sine_sweep_linear" else "logarithmic"
        tau = np.arange(n_active) / sample_rate
        duration = max(n_active - 1, 1) / sample_rate
        x[window] = spec.amplitude * signal.chirp(tau, f0, duration, f1, method=method, phi=-90)
    return TimeSeriesRecord(x, sample_rate, "drive", "V")
