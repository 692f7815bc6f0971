"""Hierarchical on-disk dataset container and FRF estimation.

Layout: one directory per path segment,
``root/campaign/phase/series/repetition/sensor/signal/``.  A leaf directory
holds ``data.bin`` (and ``grid.bin`` for frequency-domain leaves) plus
``meta.txt``.

Binary leaf format (little-endian)::

    8 bytes   magic  b"MBARRAY1"
    uint64    number of float64 values
    float64[] values (complex arrays interleaved re, im)
    uint32    CRC-32 of everything before it

``meta.txt`` holds one ``key = <JSON value>`` per line, keys sorted.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from filelock import FileLock

from .core import AlignmentError, FrequencyGrid, Frf, ModalBenchError, TimeSeriesRecord

log = logging.getLogger(__name__)

MAGIC = b"MBARRAY1"
ENV_ROOT = "MODALBENCH_CONTAINER"
SIGNALS = ("acc", "force", "spectra", "frf", "coherenceSpectrum")
TIME_SIGNALS = ("acc", "force")
LEVELS = ("campaign", "phase", "series", "repetition", "sensor", "signal")


class IntegrityError(ModalBenchError):
    pass


class LeafNotFoundError(ModalBenchError, LookupError):
    pass


class LeafExistsError(ModalBenchError, FileExistsError):
    pass


def _check_segment(seg) -> str:
    if not isinstance(seg, str) or not seg:
        raise ValueError(f"path segment must be a non-empty string, got {seg!r}")
    if "/" in seg or "\\" in seg or seg in (".", "..") or "\0" in seg:
        raise ValueError(f"invalid path segment {seg!r}")
    return seg


@dataclass(frozen=True)
class DatasetPath:
    campaign: str
    phase: str
    series: str
    repetition: str
    sensor: str
    signal: str

    def __post_init__(self):
        for seg in self.segments:
            _check_segment(seg)
        if self.signal not in SIGNALS:
            raise ValueError(f"signal must be one of {SIGNALS}, got {self.signal!r}")

    @property
    def segments(self) -> tuple:
        return (self.campaign, self.phase, self.series, self.repetition, self.sensor, self.signal)

    @classmethod
    def parse(cls, text: str) -> "DatasetPath":
        parts = [p for p in text.strip("/").split("/")]
        if len(parts) != 6:
            raise ValueError(f"expected 6 segments in {text!r}")
        return cls(*parts)

    def with_signal(self, signal: str) -> "DatasetPath":
        return DatasetPath(*self.segments[:5], signal)

    def __str__(self) -> str:
        return "/" + "/".join(self.segments)


def _prefix_segments(prefix) -> tuple:
    if prefix is None:
        return ()
    if isinstance(prefix, DatasetPath):
        return prefix.segments
    if isinstance(prefix, str):
        prefix = [p for p in prefix.strip("/").split("/") if p]
    segs = tuple(_check_segment(s) for s in prefix)
    if len(segs) > 6:
        raise ValueError("prefix has more than 6 segments")
    return segs


@dataclass(frozen=True)
class Spectrum:
    """Real or complex per-line values that are not an FRF (auto spectra,
    coherence)."""

    grid: FrequencyGrid
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        v = np.array(self.values, copy=True)
        if v.shape != (len(self.grid),):
            raise AlignmentError("spectrum length differs from its grid")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


# -- binary leaves -----------------------------------------------------------

def encode_array(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    if np.iscomplexobj(arr):
        arr = np.ascontiguousarray(arr, "<c16").view("<f8")
    flat = np.ascontiguousarray(arr, "<f8").ravel()
    body = MAGIC + struct.pack("<Q", flat.size) + flat.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_array(blob: bytes, complex_values: bool = False, source: str = "") -> np.ndarray:
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise IntegrityError(f"{source}: bad magic or truncated leaf")
    (count,) = struct.unpack("<Q", blob[8:16])
    if len(blob) != 16 + 8 * count + 4:
        raise IntegrityError(f"{source}: length does not match element count {count}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{source}: checksum mismatch")
    arr = np.frombuffer(blob[16:-4], "<f8").astype(float)
    if complex_values:
        if count % 2:
            raise IntegrityError(f"{source}: odd element count for a complex leaf")
        arr = arr.view(complex)
    return arr


def format_meta(meta: dict) -> str:
    lines = []
    for key in sorted(meta):
        if "=" in key or "\n" in key or key != key.strip() or not key:
            raise ValueError(f"invalid metadata key {key!r}")
        lines.append(f"{key} = {json.dumps(meta[key], sort_keys=True)}")
    return "\n".join(lines) + "\n"


def parse_meta(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise IntegrityError(f"malformed metadata line {line!r}")
        meta[key] = json.loads(value)
    return meta


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- container ---------------------------------------------------------------

Record = Union[TimeSeriesRecord, Frf, Spectrum]


class Container:
    """Directory-tree dataset store.  Readers need no locking; writers hold a
    container-wide advisory lock while they touch a leaf."""

    def __init__(self, root=None, create: bool = True):
        if root is None:
            root = os.environ.get(ENV_ROOT)
            if not root:
                raise ValueError(f"no container root given and ${ENV_ROOT} is unset")
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise LeafNotFoundError(f"container root {self.root} does not exist")
        self._lock = FileLock(str(self.root / ".lock"))

    def _dir(self, path: DatasetPath) -> Path:
        return self.root.joinpath(*path.segments)

    def exists(self, path: DatasetPath) -> bool:
        return (self._dir(path) / "data.bin").is_file()

    def put(self, path: DatasetPath, record: Record, meta: Optional[dict] = None,
            overwrite: bool = False) -> None:
        meta = dict(meta or {})
        if isinstance(record, TimeSeriesRecord):
            if path.signal not in TIME_SIGNALS:
                raise ValueError(f"time series cannot be stored under signal {path.signal!r}")
            meta.setdefault("units", record.units)
            meta.update(kind="time", sample_rate=record.sample_rate, channel=record.channel)
            values, grid = record.samples, None
        elif isinstance(record, Frf):
            if path.signal != "frf":
                raise ValueError("FRFs are stored under signal 'frf'")
            meta.setdefault("units", "g/N")
            meta.update(kind="frf", input_channel=record.input_channel,
                        output_channel=record.output_channel)
            values, grid = record.values, record.grid
        elif isinstance(record, Spectrum):
            if path.signal not in ("spectra", "coherenceSpectrum"):
                raise ValueError("spectra are stored under 'spectra' or 'coherenceSpectrum'")
            meta.setdefault("units", record.units or ("1" if path.signal == "coherenceSpectrum" else ""))
            meta.update(kind="spectrum")
            values, grid = record.values, record.grid
        else:
            raise TypeError(f"cannot store {type(record).__name__}")
        if not meta.get("units"):
            raise ValueError("leaf metadata needs units")
        meta["complex"] = bool(np.iscomplexobj(values))

        node = self._dir(path)
        with self._lock:
            if (node / "data.bin").exists() and not overwrite:
                raise LeafExistsError(f"{path} exists; pass overwrite=True to replace it")
            node.mkdir(parents=True, exist_ok=True)
            _write_atomic(node / "data.bin", encode_array(values))
            if grid is not None:
                _write_atomic(node / "grid.bin", encode_array(grid.values))
            elif (node / "grid.bin").exists():
                (node / "grid.bin").unlink()
            _write_atomic(node / "meta.txt", format_meta(meta).encode())

    def _read(self, path: DatasetPath):
        node = self._dir(path)
        data = node / "data.bin"
        if not data.is_file():
            raise LeafNotFoundError(f"no leaf at {path}")
        meta_file = node / "meta.txt"
        meta = parse_meta(meta_file.read_text()) if meta_file.is_file() else {}
        if "units" not in meta:
            raise IntegrityError(f"{path}: metadata missing units")
        values = decode_array(data.read_bytes(), bool(meta.get("complex")), str(path))
        grid = None
        if (node / "grid.bin").is_file():
            grid = FrequencyGrid(decode_array((node / "grid.bin").read_bytes(), False,
                                              f"{path} grid"))
        return values, grid, meta

    def get(self, path: DatasetPath):
        """``(record, meta)``.  An ``frf`` leaf picks up the coherence stored
        beside it, when there is one."""
        values, grid, meta = self._read(path)
        kind = meta.get("kind")
        if kind == "time":
            units = meta["units"] if meta["units"] in ("g", "N", "V") else "g"
            rec = TimeSeriesRecord(values, meta["sample_rate"], meta.get("channel", path.sensor), units)
        elif kind == "frf":
            coh = None
            sibling = path.with_signal("coherenceSpectrum")
            if self.exists(sibling):
                cvals, cgrid, _ = self._read(sibling)
                if cgrid is not None and np.array_equal(cgrid.values, grid.values):
                    coh = np.clip(cvals.real, 0.0, 1.0)
            rec = Frf(grid, values, coh, meta.get("input_channel", "in"),
                      meta.get("output_channel", path.sensor))
        elif kind == "spectrum":
            rec = Spectrum(grid, values, meta["units"])
        else:
            raise IntegrityError(f"{path}: unknown leaf kind {kind!r}")
        return rec, meta

    def list(self, prefix=None) -> list[DatasetPath]:
        """Every leaf under ``prefix`` (exact segment match), sorted."""
        segs = _prefix_segments(prefix)
        base = self.root.joinpath(*segs)
        if not base.is_dir():
            return []
        out = []
        depth = 6 - len(segs)
        for data in base.glob("/".join(["*"] * depth + ["data.bin"]) if depth else "data.bin"):
            rel = data.parent.relative_to(self.root).parts
            if len(rel) == 6 and rel[5] in SIGNALS:
                out.append(DatasetPath(*rel))
        return sorted(out, key=lambda p: p.segments)

    def children(self, prefix=None) -> list[str]:
        """Distinct next-level segment names under ``prefix``."""
        segs = _prefix_segments(prefix)
        base = self.root.joinpath(*segs)
        if not base.is_dir() or len(segs) >= 6:
            return []
        return sorted(p.name for p in base.iterdir() if p.is_dir())


# -- FRF estimation ----------------------------------------------------------

@dataclass(frozen=True)
class FrfEstimate:
    frf: Frf
    input_psd: np.ndarray
    output_psd: np.ndarray
    repetitions: int
    degenerate: bool


def _window(kind: str, n: int) -> np.ndarray:
    if kind in ("rect", "rectangular", "boxcar", None):
        return np.ones(n)
    if kind == "hann":
        return np.hanning(n + 1)[:-1]
    raise ValueError(f"unknown window {kind!r}")


def compute_frf_records(inputs, outputs, window: str = "rect",
                        excitation_floor: float = 1e-12) -> list[FrfEstimate]:
    """H1 FRF and coherence for each output channel, averaged over repetitions.

    ``inputs`` is one force record per repetition (or a single record);
    ``outputs[c][r]`` is channel ``c`` in repetition ``r`` (or, with a single
    input record, a flat list of channels).  Each repetition is one frame
    spanning the whole record.  Lines whose input auto spectrum is below
    ``excitation_floor`` times its peak are unexcited: FRF and coherence are
    set to 0 there.
    """
    if isinstance(inputs, TimeSeriesRecord):
        inputs = [inputs]
        outputs = [[o] for o in outputs]
    inputs = list(inputs)
    outputs = [list(ch) for ch in outputs]
    if not inputs or not outputs:
        raise ValueError("need at least one input and one output record")
    n_rep = len(inputs)
    fs, n = inputs[0].sample_rate, len(inputs[0])
    for ch in outputs:
        if len(ch) != n_rep:
            raise AlignmentError("every output channel needs one record per repetition")
    for rec in inputs + [r for ch in outputs for r in ch]:
        if rec.sample_rate != fs or len(rec) != n:
            raise AlignmentError("all records must share sample rate and length")

    w = _window(window, n)
    scale = 2.0 / (fs * np.sum(w ** 2))
    grid = FrequencyGrid.for_record(n, fs)
    x = np.array([np.fft.rfft(w * r.samples) for r in inputs])
    gxx = np.sum(np.abs(x) ** 2, axis=0)
    excited = gxx > excitation_floor * gxx.max() if gxx.max() > 0 else np.zeros_like(gxx, bool)
    degenerate = n_rep == 1
    if degenerate:
        log.debug("single repetition: coherence is reported as 1 (degenerate)")
    results = []
    for c, ch in enumerate(outputs):
        y = np.array([np.fft.rfft(w * r.samples) for r in ch])
        gxy = np.sum(np.conj(x) * y, axis=0)
        gyy = np.sum(np.abs(y) ** 2, axis=0)
        h = np.zeros(gxx.size, complex)
        h[excited] = gxy[excited] / gxx[excited]
        if degenerate:
            coh = np.ones(gxx.size)
        else:
            coh = np.zeros(gxx.size)
            ok = excited & (gyy > 0)
            coh[ok] = np.abs(gxy[ok]) ** 2 / (gxx[ok] * gyy[ok])
            coh = np.clip(coh, 0.0, 1.0)
        frf = Frf(grid, h, coh, inputs[0].channel, ch[0].channel)
        psd_in = scale * gxx / n_rep
        psd_out = scale * gyy / n_rep
        for arr in (psd_in, psd_out):
            arr[0] /= 2
            if n % 2 == 0:
                arr[-1] /= 2
        results.append(FrfEstimate(frf, psd_in, psd_out, n_rep, degenerate))
    return results


# -- external import ---------------------------------------------------------

def import_hdf5(h5_path, container: Container, campaign: Optional[str] = None,
                overwrite: bool = False) -> int:
    """Copy a published-layout HDF5 file (``/campaign/phase/series/rep/sensor/signal``
    datasets) into ``container``; returns the number of leaves written.

    Time signals need a ``sample_rate`` (or ``fs``) attribute somewhere up the
    hierarchy; frequency signals need a ``frequencies`` dataset or
    ``f_start``/``f_step`` attributes.  Requires ``h5py``.
    """
    try:
        import h5py
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ModalBenchError("importing HDF5 needs the optional h5py package") from exc

    written = 0

    def attrs_chain(obj) -> dict:
        chain = {}
        node = obj
        while node is not None:
            for k, v in node.attrs.items():
                chain.setdefault(k, v.item() if hasattr(v, "item") and np.ndim(v) == 0 else v)
            node = node.parent if node.name != "/" else None
        return chain

    with h5py.File(h5_path, "r") as fh:
        leaves = []
        fh.visititems(lambda name, obj: leaves.append((name, obj))
                      if isinstance(obj, h5py.Dataset) else None)
        for name, ds in leaves:
            parts = name.split("/")
            if len(parts) != 6 or parts[5] not in SIGNALS:
                continue
            if campaign is not None:
                parts[0] = campaign
            path = DatasetPath(*parts)
            attrs = attrs_chain(ds)
            meta = {k: (v.tolist() if isinstance(v, np.ndarray) else
                        v.decode() if isinstance(v, bytes) else v) for k, v in attrs.items()}
            values = np.asarray(ds[()])
            if path.signal in TIME_SIGNALS:
                fs = float(attrs.get("sample_rate", attrs.get("fs", 0)) or 0)
                if fs <= 0:
                    raise ModalBenchError(f"{name}: no sample_rate attribute")
                units = "N" if path.signal == "force" else "g"
                rec = TimeSeriesRecord(values.ravel().astype(float), fs, path.sensor, units)
            else:
                parent = ds.parent
                if "frequencies" in parent:
                    freqs = np.asarray(parent["frequencies"][()], float)
                else:
                    f0 = float(attrs.get("f_start", 0.0))
                    df = float(attrs["f_step"])
                    freqs = f0 + df * np.arange(values.size)
                grid = FrequencyGrid(freqs)
                if path.signal == "frf":
                    rec = Frf(grid, values.ravel().astype(complex), None, "FRC", path.sensor)
                else:
                    rec = Spectrum(grid, values.ravel(), str(meta.get("units", "")))
            meta.setdefault("units", rec.units if hasattr(rec, "units") and rec.units else "1")
            container.put(path, rec, {k: v for k, v in meta.items()
                                      if isinstance(v, (str, int, float, bool, list))},
                          overwrite=overwrite)
            written += 1
    return written


# -- synthetic campaigns -----------------------------------------------------

SERIES_EXCITATION = {
    "BR": ("burst_random", "forward"),
    "DS": ("burst_random", "forward"),
    "FSS": ("sine_sweep_linear", "forward"),
    "RSS": ("sine_sweep_linear", "reverse"),
    "FLS": ("sine_sweep_log", "forward"),
    "RLS": ("sine_sweep_log", "reverse"),
    "RPH": ("multisine_random_phase", "forward"),
    "ORP": ("multisine_odd_phase", "forward"),
}

PHASE_ACQUISITION = {"phase1": (512.0, 16384), "phase2": (2048.0, 32768)}

DEFAULT_MODES = ((7.1, 0.024), (13.2, 0.015), (22.9, 0.012), (42.3, 0.010), (51.0, 0.008))


@dataclass(frozen=True)
class CampaignConfig:
    """Synthetic campaign definition.  ``sample_rate``/``n_samples`` default
    to the acquisition parameters of ``phase``; frequency-domain leaves are
    written only when ``frequency_signals`` is set (default: phase 1)."""

    campaign: str = "SBW"
    phase: str = "phase1"
    series: tuple = ("BR_AR_1",)
    repetitions: int = 10
    sensors: tuple = ("LTC-05", "LTC-07")
    force_sensor: str = "FRC"
    modes: tuple = DEFAULT_MODES
    level: float = 0.4
    noise_level: float = 0.0
    active_fraction: float = 0.9
    sample_rate: Optional[float] = None
    n_samples: Optional[int] = None
    frequency_signals: Optional[bool] = None
    seed: int = 0

    def acquisition(self) -> tuple[float, int]:
        fs, n = PHASE_ACQUISITION.get(self.phase, PHASE_ACQUISITION["phase1"])
        return (float(self.sample_rate or fs), int(self.n_samples or n))

    @property
    def writes_frequency_signals(self) -> bool:
        if self.frequency_signals is not None:
            return self.frequency_signals
        return self.phase == "phase1"


def series_excitation(series: str) -> tuple[str, str]:
    code = series.split("_", 1)[0]
    if code not in SERIES_EXCITATION:
        raise ValueError(f"unknown series code {code!r} in {series!r}")
    return SERIES_EXCITATION[code]


def campaign_system(config: CampaignConfig):
    """Synthetic structure for a campaign: seeded modeshapes of unit-order
    ordinates with random signs, driven at the first sensor."""
    from .oracle import SyntheticSystem

    rng = np.random.default_rng(config.seed)
    freqs = [m[0] for m in config.modes]
    damping = [m[1] for m in config.modes]
    shapes = rng.uniform(0.5, 1.0, (len(freqs), len(config.sensors)))
    shapes *= rng.choice([-1.0, 1.0], shapes.shape)
    shapes[:, 0] = np.abs(shapes[:, 0])
    return SyntheticSystem.from_modes(freqs, damping, shapes, config.noise_level)


def synthesize_campaign(container: Container, config: CampaignConfig,
                        overwrite: bool = False) -> list[DatasetPath]:
    """Write force and acceleration records for every series and repetition,
    plus per-repetition FRF and output spectra and the series coherence.

    Responses are steady-state periodic, so noiseless data obey ``Y = H X``
    exactly on every DFT line.
    """
    from .oracle import ExcitationSpec, generate_excitation, simulate_response

    fs, n = config.acquisition()
    system = campaign_system(config)
    written = []
    for s_idx, series in enumerate(config.series):
        kind, direction = series_excitation(series)
        forces, responses = [], []
        for r in range(config.repetitions):
            rep = f"{r + 1:02d}"
            # multisines repeat the same drive; bursts draw a new one each time
            drive_seed = config.seed * 100003 + s_idx * 1009 + (0 if kind.startswith("multisine") else r)
            spec = ExcitationSpec(kind, direction, amplitude=config.level,
                                  active_fraction=config.active_fraction, seed=drive_seed)
            drive = generate_excitation(spec, n, fs)
            force = TimeSeriesRecord(drive.samples, fs, config.force_sensor, "N")
            outs = simulate_response(system, force, seed=drive_seed + 7919 * (r + 1), periodic=True)
            outs = [TimeSeriesRecord(o.samples, fs, name, "g") for o, name in zip(outs, config.sensors)]
            forces.append(force)
            responses.append(outs)
            base = dict(excitation_level=config.level, sample_rate=fs, seed=int(drive_seed),
                        excitation=kind, direction=direction)
            p = DatasetPath(config.campaign, config.phase, series, rep, config.force_sensor, "force")
            container.put(p, force, dict(base, units="N", sensitivity_mV_per_N=1.0), overwrite)
            written.append(p)
            for o in outs:
                p = DatasetPath(config.campaign, config.phase, series, rep, o.channel, "acc")
                container.put(p, o, dict(base, units="g", sensitivity_mV_per_g=1.0), overwrite)
                written.append(p)
            if config.writes_frequency_signals:
                for est in compute_frf_records(force, outs):
                    sensor = est.frf.output_channel
                    p = DatasetPath(config.campaign, config.phase, series, rep, sensor, "frf")
                    container.put(p, Frf(est.frf.grid, est.frf.values, None, config.force_sensor,
                                         sensor), dict(base, units="g/N"), overwrite)
                    written.append(p)
                    p = p.with_signal("spectra")
                    container.put(p, Spectrum(est.frf.grid, est.output_psd, "g^2/Hz"),
                                  dict(base, units="g^2/Hz"), overwrite)
                    written.append(p)
        if config.writes_frequency_signals:
            channels = [[responses[r][c] for r in range(config.repetitions)]
                        for c in range(len(config.sensors))]
            series_est = compute_frf_records(forces, channels)
            for est in series_est:
                coh = Spectrum(est.frf.grid, est.frf.coherence, "1")
                for r in range(config.repetitions):
                    p = DatasetPath(config.campaign, config.phase, series, f"{r + 1:02d}",
                                    est.frf.output_channel, "coherenceSpectrum")
                    container.put(p, coh, {"units": "1", "repetitions": config.repetitions},
                                  overwrite)
                    written.append(p)
    return sorted(written, key=lambda p: p.segments)


def average_frf(container: Container, campaign: str, phase: str, series: str,
                sensor: str, force_sensor: str = "FRC", window: str = "rect") -> FrfEstimate:
    """H1 FRF and coherence over all repetitions of a series, from the stored
    force and acceleration records."""
    reps = container.children((campaign, phase, series))
    if not reps:
        raise LeafNotFoundError(f"no repetitions under /{campaign}/{phase}/{series}")
    forces, outs = [], []
    for rep in reps:
        forces.append(container.get(DatasetPath(campaign, phase, series, rep, force_sensor, "force"))[0])
        outs.append(container.get(DatasetPath(campaign, phase, series, rep, sensor, "acc"))[0])
    return compute_frf_records(forces, [outs], window)[0]
