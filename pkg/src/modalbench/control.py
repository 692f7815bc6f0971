"""Closed-loop spectral drive control against a simulated force path.

Each pass synthesises a drive from the current drive PSD and the target's
phases, measures the force PSD through the plant, and refines a per-line
estimate of the plant's amplitude gain ``|H|`` (N/V).  The next drive PSD is
``S_r / |H|^2`` so that a correct estimate reproduces the target exactly.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import TWO_PI, FrequencyGrid, GridError, ModalParameterSet, TimeSeriesRecord
from .oracle import linear_ramp, zero_odd_lines

log = logging.getLogger(__name__)

TARGET_KINDS = ("random_phase", "odd_phase")


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TargetSpectrum:
    grid: FrequencyGrid
    magnitude: np.ndarray  # N^2/Hz
    phase: np.ndarray      # rad
    kind: str = "random_phase"

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        mag = np.array(self.magnitude, float)
        ph = np.array(self.phase, float)
        if mag.shape != (len(self.grid),) or ph.shape != mag.shape:
            raise ValueError("magnitude and phase must match the grid length")
        if np.any(mag < 0) or not np.all(np.isfinite(mag)):
            raise ValueError("target magnitude must be finite and >= 0")
        mag.setflags(write=False)
        ph.setflags(write=False)
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "phase", ph)

    @property
    def active(self) -> np.ndarray:
        return self.magnitude > 0

    def scaled(self, factor: float) -> "TargetSpectrum":
        return replace(self, magnitude=self.magnitude * factor)


Profile = Union[None, float, Sequence[float], np.ndarray, Callable[[np.ndarray], np.ndarray]]


def ramped_profile(lower: float, upper: float, ramp_hz: float, level: float = 1.0):
    """Trapezoidal PSD profile: zero outside ``[lower, upper]``, rising and
    falling linearly over ``ramp_hz`` at each edge."""
    def profile(f):
        f = np.asarray(f, float)
        up = np.clip((f - lower) / ramp_hz, 0.0, 1.0) if ramp_hz > 0 else (f >= lower) * 1.0
        down = np.clip((upper - f) / ramp_hz, 0.0, 1.0) if ramp_hz > 0 else (f <= upper) * 1.0
        out = level * np.minimum(up, down)
        out[(f < lower) | (f > upper)] = 0.0
        return out
    return profile


def make_target(kind: str, grid: FrequencyGrid, amplitude_profile: Profile = None,
                seed: int = 0) -> TargetSpectrum:
    """Target force PSD on ``grid``.

    ``amplitude_profile`` is a per-line array, a scalar, a callable of
    frequency (Hz) or ``None`` for a flat unit PSD.  Phases are drawn
    uniformly on ``[0, 2 pi)``.  For ``odd_phase`` the entries at 1-based odd
    positions get zero magnitude and phase.
    """
    if kind not in TARGET_KINDS:
        raise ValueError(f"unknown target kind {kind!r}")
    f = grid.values
    if amplitude_profile is None:
        mag = np.ones(f.size)
    elif callable(amplitude_profile):
        mag = np.asarray(amplitude_profile(f), float)
    else:
        mag = np.broadcast_to(np.asarray(amplitude_profile, float), f.shape).copy()
    phase = np.random.default_rng(seed).uniform(0.0, TWO_PI, f.size)
    if kind == "odd_phase":
        mag, phase = zero_odd_lines(mag), zero_odd_lines(phase)
    return TargetSpectrum(grid, mag, phase, kind)


@dataclass(frozen=True)
class LoopConfig:
    alpha: float = 0.8
    target_error: float = 0.01
    max_iterations: int = 50
    ramp_fraction: float = 0.05
    psd_floor: float = 1e-12

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.target_error > 0:
            raise ValueError("target_error must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 <= self.ramp_fraction < 0.5:
            raise ValueError("ramp_fraction must lie in [0, 0.5)")
        if self.alpha == 0:
            warnings.warn("alpha = 0 freezes the transfer estimate; the loop can only "
                          "converge if the initial drive already meets the target",
                          ConvergenceWarning, stacklevel=2)


@dataclass(frozen=True)
class ControlState:
    transfer_estimate: np.ndarray  # |H| per line, N/V
    drive_psd: np.ndarray          # V^2/Hz
    iteration: int = 0
    error: float = float("inf")
    converged: bool = False
    measured_psd: Optional[np.ndarray] = field(default=None, repr=False)
    floored_lines: tuple = ()


def initial_state(target: TargetSpectrum) -> ControlState:
    """``|H| = 1`` everywhere, so the first drive PSD equals the target."""
    return ControlState(np.ones(len(target.grid)), target.magnitude.copy())


def _line_indices(grid: FrequencyGrid, n_samples: int, sample_rate: float) -> np.ndarray:
    df = sample_rate / n_samples
    k = np.rint(grid.values / df).astype(int)
    if np.any(np.abs(grid.values - k * df) > 1e-9 * max(df, 1.0)) or np.any(k > n_samples // 2):
        raise GridError(
            f"target lines are not DFT lines of {n_samples} samples at {sample_rate} Hz "
            f"(spacing {df} Hz)")
    return k


def _edge_lines(k: np.ndarray, n_samples: int) -> np.ndarray:
    return (k == 0) | ((n_samples % 2 == 0) & (k == n_samples // 2))


def line_spectrum(state: ControlState, target: TargetSpectrum, n_samples: int,
                  sample_rate: float) -> np.ndarray:
    """One-sided DFT of the periodic (unramped) drive.

    Each line carries a sine of amplitude ``sqrt(2 S df)`` and the target's
    phase; the 0 Hz and Nyquist lines carry ``sqrt(S df)`` since their power
    is not split with a negative-frequency twin.
    """
    k = _line_indices(target.grid, n_samples, sample_rate)
    df = sample_rate / n_samples
    psd = np.asarray(state.drive_psd, float)
    edge = _edge_lines(k, n_samples)
    amp = np.where(edge, np.sqrt(psd * df), np.sqrt(2 * psd * df))
    spec = np.zeros(n_samples // 2 + 1, complex)
    # A sin(wt + phi) = Re(A exp(j(wt + phi - pi/2)))
    interior = amp * n_samples / 2 * np.exp(1j * (target.phase - np.pi / 2))
    spec[k] = np.where(edge, amp * n_samples * np.sin(target.phase), interior)
    return spec


def drive_signal(state: ControlState, target: TargetSpectrum, config: LoopConfig,
                 n_samples: int, sample_rate: float, ramp: bool = True) -> TimeSeriesRecord:
    """Time-domain drive for ``state``, linearly ramped over
    ``config.ramp_fraction`` of the record at each end."""
    x = np.fft.irfft(line_spectrum(state, target, n_samples, sample_rate), n_samples)
    if ramp:
        x = x * linear_ramp(n_samples, config.ramp_fraction)
    return TimeSeriesRecord(x, sample_rate, "drive", "V")


def ramp_power_factor(ramp_fraction: float) -> float:
    """Mean-square loss of a linear ramp over ``ramp_fraction`` at each end."""
    return 1.0 - 4.0 * ramp_fraction / 3.0


def periodogram_lines(record: TimeSeriesRecord, grid: FrequencyGrid) -> np.ndarray:
    """Single-frame one-sided PSD of ``record`` on the lines of ``grid``."""
    n = len(record)
    k = _line_indices(grid, n, record.sample_rate)
    x = np.fft.rfft(record.samples)[k]
    df = record.sample_rate / n
    scale = np.where(_edge_lines(k, n), 1.0, 2.0) / (n ** 2 * df)
    return scale * np.abs(x) ** 2


@dataclass(frozen=True)
class ForcePath:
    """Linear drive-to-force path ``G(f)`` (N/V) with multiplicative PSD noise.

    With modes, ``G = gain * sum_r w_r^2 / (w_r^2 - w^2 + 2j zeta_r w_r w)``,
    so each mode contributes ``gain`` at 0 Hz and ``gain / (2 zeta_r)`` at
    resonance.
    """

    gain: float = 1.0
    modal: Optional[ModalParameterSet] = None
    noise_level: float = 0.0

    def __post_init__(self):
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")

    @classmethod
    def from_modes(cls, frequencies_hz, damping_ratios, gain=1.0, noise_level=0.0) -> "ForcePath":
        return cls(gain, ModalParameterSet.from_arrays(frequencies_hz, damping_ratios), noise_level)

    def response(self, frequencies_hz) -> np.ndarray:
        f = np.asarray(frequencies_hz, float)
        if self.modal is None or len(self.modal) == 0:
            return np.full(f.shape, complex(self.gain))
        w = TWO_PI * f[:, None]
        wr = TWO_PI * self.modal.frequencies[None, :]
        z = self.modal.damping[None, :]
        return self.gain * np.sum(wr ** 2 / (wr ** 2 - w ** 2 + 2j * z * wr * w), axis=1)

    def force(self, drive: TimeSeriesRecord) -> TimeSeriesRecord:
        """Steady-state force for a periodic drive record."""
        n = len(drive)
        spec = np.fft.rfft(drive.samples) * self.response(np.fft.rfftfreq(n, drive.dt))
        return TimeSeriesRecord(np.fft.irfft(spec, n), drive.sample_rate, "force", "N")

    def measure_psd(self, drive: TimeSeriesRecord, grid: FrequencyGrid,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
        psd = periodogram_lines(self.force(drive), grid)
        if self.noise_level > 0:
            rng = rng if rng is not None else np.random.default_rng()
            psd = psd * np.maximum(1.0 + self.noise_level * rng.standard_normal(psd.size), 0.0)
        return psd


def tracking_error(measured_psd, target: TargetSpectrum) -> float:
    """Mean squared PSD error over every line, zero-target lines included."""
    diff = np.asarray(measured_psd, float) - target.magnitude
    return float(np.mean(diff ** 2))


def update_transfer(state: ControlState, measured_psd, target: TargetSpectrum,
                    config: LoopConfig) -> ControlState:
    """Refine ``|H|`` from the force measured for ``state``'s drive.

    On active lines ``|H| <- (1 - alpha) |H| + alpha sqrt(S_f / S_d)``, where
    ``sqrt(S_f / S_d)`` is the gain seen in this pass.  Zero-target lines keep
    their estimate and a zero drive.  Non-positive measurements on active
    lines are floored and reported in ``floored_lines``.
    """
    s_f = np.asarray(measured_psd, float)
    if s_f.shape != target.magnitude.shape:
        raise ValueError("measured PSD length differs from the target grid")
    active = target.active
    err = tracking_error(s_f, target)

    floor = config.psd_floor * max(float(target.magnitude.max()), 1.0)
    bad = active & ~(s_f > 0)
    floored = tuple(int(i) for i in np.flatnonzero(bad))
    if floored:
        log.warning("measured force PSD non-positive on %d active lines; floored", len(floored))
    s_f_safe = np.where(bad, floor, s_f)

    h = np.array(state.transfer_estimate, float)
    s_d = np.asarray(state.drive_psd, float)
    observed = np.sqrt(s_f_safe[active] / s_d[active])
    h[active] = (1 - config.alpha) * h[active] + config.alpha * observed
    drive = np.zeros_like(h)
    drive[active] = target.magnitude[active] / h[active] ** 2
    return ControlState(h, drive, state.iteration + 1, err, err < config.target_error,
                        s_f, floored)


@dataclass(frozen=True)
class LoopResult:
    """``history[k]`` holds the estimate after the ``k+1``-th measurement,
    along with that measurement and its error.  ``drive`` is the drive that
    produced the last measurement."""

    history: tuple
    drive: TimeSeriesRecord
    drive_psds: tuple
    target: TargetSpectrum
    converged: bool

    @property
    def timed_out(self) -> bool:
        return not self.converged

    @property
    def final(self) -> ControlState:
        return self.history[-1]

    @property
    def best(self) -> ControlState:
        return min(self.history, key=lambda s: s.error)

    @property
    def iterations(self) -> int:
        return len(self.history)

    def __iter__(self):
        yield self.history
        yield self.drive


def run_loop(plant: ForcePath, target: TargetSpectrum, config: LoopConfig,
             n_samples: Optional[int] = None, sample_rate: Optional[float] = None,
             seed: int = 0) -> LoopResult:
    """Iterate drive, measurement and update until ``error < target_error``
    or ``max_iterations`` passes.

    ``n_samples`` and ``sample_rate`` default to the record implied by a
    target grid that starts at 0 Hz and ends at Nyquist.
    """
    grid = target.grid
    if sample_rate is None:
        sample_rate = 2.0 * float(grid.values[-1])
    if n_samples is None:
        if grid.spacing <= 0:
            raise GridError("cannot infer the record length from a single-line grid")
        n_samples = int(round(sample_rate / grid.spacing))
    rng = np.random.default_rng(seed)
    state = initial_state(target)
    history, drives = [], []
    drive = None
    for _ in range(config.max_iterations):
        periodic = drive_signal(state, target, config, n_samples, sample_rate, ramp=False)
        drive = periodic.with_samples(periodic.samples * linear_ramp(n_samples, config.ramp_fraction))
        measured = plant.measure_psd(periodic, grid, rng)
        drives.append(state.drive_psd)
        state = update_transfer(state, measured, target, config)
        history.append(state)
        log.debug("iteration %d: error %.4g", state.iteration, state.error)
        if state.converged:
            break
    else:
        log.warning("control loop did not converge in %d iterations (best error %.4g)",
                    config.max_iterations, min(s.error for s in history))
    return LoopResult(tuple(history), drive, tuple(drives), target, history[-1].converged)


def write_history_csv(result: LoopResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "epsilon", "converged"])
        for s in result.history:
            w.writerow([s.iteration, repr(s.error), int(s.converged)])


def save_psds(result: LoopResult, directory) -> list[Path]:
    """Write frequency, target, and per-iteration drive and measured PSDs as
    ``.npy`` files; returns the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, arr):
        p = directory / name
        np.save(p, np.asarray(arr))
        written.append(p)

    put("frequencies.npy", result.target.grid.values)
    put("target_psd.npy", result.target.magnitude)
    for s, d in zip(result.history, result.drive_psds):
        put(f"drive_psd_{s.iteration:03d}.npy", d)
        put(f"measured_psd_{s.iteration:03d}.npy", s.measured_psd)
    return written
