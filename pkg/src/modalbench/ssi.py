"""Output-only covariance-driven stochastic subspace identification.

Past and future block Hankel matrices of the (decimated, mean-removed)
responses give a covariance matrix whose canonical-correlation SVD factors the
future/past cross covariance into observability and controllability matrices.
``A`` and ``C`` follow from the observability matrix; their eigenstructure
gives the modes.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from .core import (AlignmentError, ModalParameterSet, TimeSeriesRecord,
                   discrete_to_continuous, poles_to_modal)

log = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-10


@dataclass(frozen=True)
class SsiConfig:
    n_lags: int = 25
    max_order: int = 50
    order_step: int = 2
    decimation: int = 5
    consistency_tolerances: tuple = (0.01, 0.05)
    svs_components: int = 5

    def __post_init__(self):
        if self.n_lags < 2:
            raise ValueError("n_lags must be >= 2")
        if self.max_order < 0 or self.max_order % 2:
            raise ValueError("max_order must be an even, non-negative integer")
        if self.order_step < 2 or self.order_step % 2:
            raise ValueError("order_step must be a positive even integer")
        if self.decimation < 1:
            raise ValueError("decimation must be >= 1")

    def check_channels(self, channel_count: int) -> None:
        """The shifted observability solve needs ``(n_lags - 1) * channels``
        rows per state."""
        if self.max_order > (self.n_lags - 1) * channel_count:
            raise ValueError(
                f"max_order {self.max_order} exceeds (n_lags - 1) x channels "
                f"({self.n_lags - 1} x {channel_count})")

    @staticmethod
    def lags_for(max_order: int, channel_count: int) -> int:
        """Smallest lag count supporting ``max_order`` with these channels."""
        return max(2, -(-max_order // channel_count) + 1)

    @property
    def orders(self) -> list[int]:
        return list(range(self.order_step, self.max_order + 1, self.order_step))


@dataclass(frozen=True)
class CovarianceBlocks:
    """Partitions of the past/future covariance.  ``data`` keeps the
    preprocessed channels for spectral plots."""

    pp: np.ndarray
    pf: np.ndarray
    fp: np.ndarray
    ff: np.ndarray
    n_lags: int
    channels: int
    sample_rate: float
    n_columns: int
    data: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass(frozen=True)
class StateSpace:
    a: np.ndarray
    c: np.ndarray
    dt: float

    @property
    def order(self) -> int:
        return self.a.shape[0]

    @property
    def spectral_radius(self) -> float:
        if self.order == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.a))))


@dataclass(frozen=True)
class DiagramEntry:
    """One pole of the diagram.  ``link`` indexes the entry at the previous
    order that this pole matched (-1 when inconsistent)."""

    order: int
    frequency_hz: float
    damping_ratio: float
    consistent: bool
    link: int = -1


@dataclass(frozen=True)
class ConsistencyDiagram:
    orders: tuple
    entries: tuple
    svs_frequencies: np.ndarray
    svs: np.ndarray  # (components, frequencies)
    freq_tolerance: float = 0.01

    def at_order(self, order: int) -> list[DiagramEntry]:
        return [e for e in self.entries if e.order == order]


@dataclass(frozen=True)
class Alignment:
    """Consistent poles that line up across model orders."""

    frequency_hz: float
    damping_ratio: float
    orders: tuple
    fraction: float


def decimate(data: np.ndarray, factor: int) -> np.ndarray:
    """Low-pass (causal 8th-order Chebyshev I at 0.8 x new Nyquist) and
    downsample each row of ``data``.

    The filter runs forward only: a forward-backward pass would square its
    magnitude response and double the spurious filter states the identified
    model has to absorb.
    """
    data = np.atleast_2d(np.asarray(data, float))
    if factor == 1:
        return data.copy()
    return signal.decimate(data, factor, n=8, ftype="iir", axis=-1, zero_phase=False)


def _stack(records: Sequence[TimeSeriesRecord]) -> tuple[np.ndarray, float]:
    if not records:
        raise ValueError("no records supplied")
    fs = records[0].sample_rate
    n = len(records[0])
    for r in records[1:]:
        if r.sample_rate != fs or len(r) != n:
            raise AlignmentError("all records must share sample rate and length")
    return np.vstack([r.samples for r in records]), fs


def block_hankel(data: np.ndarray, n_lags: int) -> tuple[np.ndarray, np.ndarray]:
    """Past and future block Hankel matrices, each ``(n_lags * l, j)``."""
    l, n = data.shape
    j = n - 2 * n_lags + 1
    # windows[c, k, t] = data[c, k + t]
    windows = sliding_window_view(data, j, axis=1)[:, :2 * n_lags, :]
    stacked = windows.transpose(1, 0, 2).reshape(2 * n_lags * l, j)
    return stacked[:n_lags * l], stacked[n_lags * l:]


def build_covariances(records: Sequence[TimeSeriesRecord], config: SsiConfig) -> CovarianceBlocks:
    """Covariance partitions of the past/future Hankel matrices."""
    data, fs = _stack(records)
    data = data - data.mean(axis=1, keepdims=True)
    data = decimate(data, config.decimation)
    fs_eff = fs / config.decimation
    if data.shape[1] <= 4 * config.n_lags:
        raise ValueError(
            f"{data.shape[1]} samples after decimation is too short for {config.n_lags} lags")
    yp, yf = block_hankel(data, config.n_lags)
    j = yp.shape[1]
    pp = yp @ yp.T / j
    pf = yp @ yf.T / j
    ff = yf @ yf.T / j
    return CovarianceBlocks(pp, pf, pf.T, ff, config.n_lags, data.shape[0], fs_eff, j, data)


def _sqrt_pair(cov: np.ndarray):
    """Symmetric square root and regularised inverse square root."""
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    top = max(vals.max(), 0.0)
    floor = EIGEN_FLOOR * top if top > 0 else EIGEN_FLOOR
    n_floored = int(np.sum(vals < floor))
    if n_floored:
        log.debug("covariance regularised: %d eigenvalues floored at %.3g", n_floored, floor)
    vals = np.maximum(vals, floor)
    root = np.sqrt(vals)
    return (vecs * root) @ vecs.T, (vecs / root) @ vecs.T


@dataclass(frozen=True)
class CcaFactors:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    sqrt_ff: np.ndarray
    sqrt_pp: np.ndarray
    normalised: np.ndarray


def cca(blocks: CovarianceBlocks) -> CcaFactors:
    """SVD of the whitened cross covariance ``ff^-1/2 fp pp^-1/2``."""
    sqrt_ff, isqrt_ff = _sqrt_pair(blocks.ff)
    sqrt_pp, isqrt_pp = _sqrt_pair(blocks.pp)
    normalised = isqrt_ff @ blocks.fp @ isqrt_pp
    u, s, vt = np.linalg.svd(normalised)
    return CcaFactors(u, s, vt, sqrt_ff, sqrt_pp, normalised)


def observability(factors: CcaFactors, order: int) -> np.ndarray:
    return factors.sqrt_ff @ factors.u[:, :order] * np.sqrt(factors.s[:order])


def controllability(factors: CcaFactors, order: int) -> np.ndarray:
    ctrl_t = factors.sqrt_pp @ factors.vt[:order].T * np.sqrt(factors.s[:order])
    return ctrl_t.T


def _identify(factors: CcaFactors, order: int, channels: int, dt: float):
    if order == 0:
        return ModalParameterSet(), StateSpace(np.zeros((0, 0)), np.zeros((channels, 0)), dt)
    if order > factors.s.size - channels:
        raise ValueError(
            f"order {order} exceeds the {factors.s.size - channels} states the lags support")
    obs = observability(factors, order)
    c = obs[:channels]
    a = np.linalg.lstsq(obs[:-channels], obs[channels:], rcond=None)[0]
    lam, vec = np.linalg.eig(a)
    outside = np.abs(lam) >= 1
    if outside.any():
        # Least squares does not guarantee stability at over-specified orders;
        # reflect the offending eigenvalues into the unit disc (same angle).
        log.debug("order %d: reflected %d unstable eigenvalues", order, int(outside.sum()))
        radius = np.minimum(1 / np.abs(lam[outside]), 1 - 1e-9)
        lam = lam.copy()
        lam[outside] = radius * lam[outside] / np.abs(lam[outside])
        a = np.real(vec @ np.diag(lam) @ np.linalg.inv(vec))
    poles = discrete_to_continuous(lam, dt)
    modal, _ = poles_to_modal(poles)
    return modal, StateSpace(a, c, dt)


def identify_at_order(blocks: CovarianceBlocks, order: int,
                      sample_rate_effective: Optional[float] = None):
    """Modal parameters and ``(A, C)`` of the model truncated to ``order`` states."""
    fs = blocks.sample_rate if sample_rate_effective is None else sample_rate_effective
    return _identify(cca(blocks), order, blocks.channels, 1.0 / fs)


def singular_value_spectrum(data: np.ndarray, sample_rate: float, components: int = 5):
    """Singular values of the Welch cross-spectral matrix at each frequency.

    Segments are an eighth of the record with 50% overlap.
    """
    data = np.atleast_2d(data)
    l, n = data.shape
    nperseg = max(n // 8, 8)
    freqs = None
    g = None
    for i in range(l):
        for k in range(i, l):
            freqs, p = signal.csd(data[i], data[k], fs=sample_rate, nperseg=nperseg,
                                  noverlap=nperseg // 2)
            if g is None:
                g = np.zeros((freqs.size, l, l), complex)
            g[:, i, k] = p
            g[:, k, i] = np.conj(p)
    sv = np.linalg.svd(g, compute_uv=False)
    return freqs, sv[:, :components].T


def _match(mode, previous, freq_rel, damp_rel) -> int:
    """Index of the closest-frequency previous entry within tolerance, or -1."""
    best, best_df = -1, np.inf
    for idx, e in previous:
        df = abs(mode.frequency_hz - e.frequency_hz)
        if df > freq_rel * e.frequency_hz:
            continue
        if abs(mode.damping_ratio - e.damping_ratio) > damp_rel * max(e.damping_ratio, 1e-12):
            continue
        if df < best_df:
            best, best_df = idx, df
    return best


def consistency_scan(blocks: CovarianceBlocks, config: SsiConfig) -> ConsistencyDiagram:
    """Identify at orders ``step, 2*step, ..., max_order`` and flag each pole
    that matches a pole at the previous order within the configured
    frequency and damping tolerances."""
    if config.max_order < 2:
        raise ValueError("max_order must be >= 2")
    config.check_channels(blocks.channels)
    factors = cca(blocks)
    dt = 1.0 / blocks.sample_rate
    freq_rel, damp_rel = config.consistency_tolerances
    entries: list[DiagramEntry] = []
    previous: list = []
    for order in config.orders:
        modal, _ = _identify(factors, order, blocks.channels, dt)
        current = []
        for m in modal:
            link = _match(m, previous, freq_rel, damp_rel)
            entry = DiagramEntry(order, m.frequency_hz, m.damping_ratio, link >= 0, link)
            current.append((len(entries), entry))
            entries.append(entry)
        previous = current
    if blocks.data is not None:
        svs_f, svs = singular_value_spectrum(blocks.data, blocks.sample_rate,
                                             config.svs_components)
    else:
        svs_f, svs = np.zeros(0), np.zeros((0, 0))
    return ConsistencyDiagram(tuple(config.orders), tuple(entries), svs_f, svs, freq_rel)


def alignments(diagram: ConsistencyDiagram, freq_rel: Optional[float] = None) -> list[Alignment]:
    """Group diagram poles into frequency tracks across orders.

    A track continues from one order to the next through the nearest pole
    within ``freq_rel`` (defaults to the scan's frequency tolerance).  Within
    a track, a pole takes part in the alignment when it is consistent itself
    or a consistent pole at the next order matched it.  ``fraction`` is the
    share of scanned orders with such a pole; tracks without any consistent
    pole are dropped.
    """
    if freq_rel is None:
        freq_rel = diagram.freq_tolerance
    entries = diagram.entries
    anchors = {e.link for e in entries if e.link >= 0}
    by_order: dict[int, list[int]] = {}
    for i, e in enumerate(entries):
        by_order.setdefault(e.order, []).append(i)

    track_of: dict[int, int] = {}
    tracks: list[list[int]] = []
    prev: list[int] = []
    for order in diagram.orders:
        current = by_order.get(order, [])
        pairs = []
        for i in current:
            for k in prev:
                df = abs(entries[i].frequency_hz - entries[k].frequency_hz)
                if df <= freq_rel * entries[k].frequency_hz:
                    pairs.append((df, i, k))
        pairs.sort()
        used_i, used_k = set(), set()
        for _, i, k in pairs:
            if i in used_i or k in used_k:
                continue
            used_i.add(i)
            used_k.add(k)
            track_of[i] = track_of[k]
            tracks[track_of[i]].append(i)
        for i in current:
            if i not in track_of:
                track_of[i] = len(tracks)
                tracks.append([i])
        prev = current

    n_orders = max(len(diagram.orders), 1)
    out = []
    for members in tracks:
        active = [entries[i] for i in members if entries[i].consistent or i in anchors]
        if not any(entries[i].consistent for i in members):
            continue
        orders = tuple(sorted({e.order for e in active}))
        out.append(Alignment(float(np.median([e.frequency_hz for e in active])),
                             float(np.median([e.damping_ratio for e in active])),
                             orders, len(orders) / n_orders))
    out.sort(key=lambda a: a.frequency_hz)
    return out


def write_diagram_csv(diagram: ConsistencyDiagram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["order", "freq_hz", "zeta", "consistent"])
        for e in diagram.entries:
            w.writerow([e.order, repr(e.frequency_hz), repr(e.damping_ratio), int(e.consistent)])


def write_svs_csv(diagram: ConsistencyDiagram, path) -> None:
    k = diagram.svs.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz"] + [f"sv{i + 1}" for i in range(k)])
        for j, f in enumerate(diagram.svs_frequencies):
            w.writerow([repr(float(f))] + [repr(float(v)) for v in diagram.svs[:, j]])
