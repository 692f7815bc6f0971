"""``modalbench`` command-line pipelines.

Each subcommand reads defaults, then an optional JSON config file (a section
named after the subcommand), then ``--set key=value`` overrides and specific
flags.  Outputs are delimited text tables, JSON model files and the container
binary format; ``--figures`` additionally renders PNGs when matplotlib is
installed.

Exit codes: 0 success, 2 usage, 3 data, 4 numerical conditioning,
5 non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import control, dataio, rfp, shm, ssi
from .core import AlignmentError, ConditioningError, ModalBenchError

log = logging.getLogger("modalbench")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONDITIONING, EXIT_NONCONVERGENCE = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


DEFAULTS = {
    "synth": {
        "campaign": "SBW",
        "phase": "phase1",
        "series": ["BR_AR_1"],
        "repetitions": 10,
        "sensors": ["LTC-05", "LTC-07"],
        "force_sensor": "FRC",
        "modes": [list(m) for m in dataio.DEFAULT_MODES],
        "level": 0.4,
        "noise_level": 0.0,
        "active_fraction": 0.9,
        "sample_rate": None,
        "n_samples": None,
        "frequency_signals": None,
        "overwrite": False,
    },
    "identify": {
        "campaign": "SBW",
        "phase": "phase1",
        "series": "BR_AR_1",
        "sensor": "LTC-05",
        "force_sensor": "FRC",
        "method": "both",  # rfp, ssi or both
        "rfp_mode": "banded",  # banded or global
        "band_file": None,
        "bands": [[5.0, 9.0, 1], [11.0, 15.0, 1], [20.0, 26.0, 1], [38.0, 46.0, 1],
                  [48.0, 54.0, 1]],
        "n_modes": 5,
        "extra_terms": rfp.DEFAULT_EXTRA_TERMS,
        "f_range": [1.0, 100.0],
        "repetition": "01",
        "n_lags": None,  # smallest count supporting max_order
        "max_order": 50,
        "decimation": 5,
        "tolerances": [0.01, 0.05],
        "svs_components": 5,
    },
    "control": {
        "sample_rate": 2048.0,
        "n_samples": 32768,
        "kind": "random_phase",
        "band": [5.0, 200.0],
        "ramp_hz": 5.0,
        "level": 1.0,
        "gain": 1.0,
        "plant_modes": [],
        "noise_level": 0.0,
        "alpha": 0.8,
        "target_error": 0.01,
        "max_iterations": 50,
        "ramp_fraction": 0.05,
        "save_psds": True,
    },
    "shm": {
        "features_file": None,
        "label_column": "label",
        "normal_label": None,
        "n_components": None,
        "train_fraction": 0.5,
        "confidence": 0.99,
        "mc_samples": 100000,
        "synthetic_classes": 2,
        "synthetic_dim": 8,
        "synthetic_per_class": 50,
        "synthetic_separation": 6.0,
    },
}


# -- config ------------------------------------------------------------------

def load_config(command: str, path=None, overrides=()) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown_sections = set(data) - set(DEFAULTS)
        if unknown_sections:
            raise UsageError(f"unknown config sections: {sorted(unknown_sections)}")
        _merge(cfg, data.get(command, {}), command)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        _merge(cfg, {key.strip(): parsed}, command)
    return cfg


def _merge(cfg: dict, new: dict, command: str) -> None:
    if not isinstance(new, dict):
        raise UsageError(f"config section {command!r} must be an object")
    unknown = set(new) - set(cfg)
    if unknown:
        raise UsageError(f"unknown {command} config keys: {sorted(unknown)}")
    cfg.update(new)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _container(args) -> dataio.Container:
    root = args.container or os.environ.get(dataio.ENV_ROOT)
    if not root:
        raise UsageError(f"give --container or set ${dataio.ENV_ROOT}")
    return dataio.Container(root)


def _figures(args):
    if not args.figures:
        return None
    try:
        from . import plotting
    except ImportError as exc:
        raise UsageError(f"--figures needs matplotlib: {exc}") from None
    return plotting


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    container = _container(args)
    overwrite = bool(cfg.pop("overwrite"))
    cfg["series"] = tuple(cfg["series"])
    cfg["sensors"] = tuple(cfg["sensors"])
    cfg["modes"] = tuple(tuple(m) for m in cfg["modes"])
    config = dataio.CampaignConfig(seed=args.seed, **cfg)
    written = dataio.synthesize_campaign(container, config, overwrite=overwrite)
    fs, n = config.acquisition()
    print(f"wrote {len(written)} leaves to {container.root} ({fs:g} Hz, {n} samples, "
          f"{config.repetitions} repetitions)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "leaves.csv", ["path"], [[str(p)] for p in written])
        system = dataio.campaign_system(config)
        _write_rows(out / "modes.csv", ["frequency_hz", "damping_ratio"],
                    [[_fmt(m.frequency_hz), _fmt(m.damping_ratio)] for m in system.modal])
    return EXIT_OK


def _bands(cfg):
    if cfg["band_file"] is not None:
        if not Path(cfg["band_file"]).is_file():
            raise UsageError(f"band file {cfg['band_file']} not found")
        return rfp.read_band_table(cfg["band_file"])
    return tuple(rfp.Band(*b) for b in cfg["bands"])


def cmd_identify(args, cfg) -> int:
    if cfg["method"] not in ("rfp", "ssi", "both"):
        raise UsageError("method must be rfp, ssi or both")
    if cfg["rfp_mode"] not in ("banded", "global"):
        raise UsageError("rfp_mode must be banded or global")
    bands = _bands(cfg) if cfg["method"] != "ssi" and cfg["rfp_mode"] == "banded" else None
    container = _container(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    figs = _figures(args)
    key = (cfg["campaign"], cfg["phase"], cfg["series"])

    if cfg["method"] in ("rfp", "both"):
        est = dataio.average_frf(container, *key, cfg["sensor"], cfg["force_sensor"])
        frf = est.frf
        if bands is not None:
            results = rfp.fit_banded(frf, rfp.RfpConfig(1, cfg["extra_terms"], bands))
        else:
            lo, hi = cfg["f_range"]
            results = [rfp.fit_global(frf.band(lo, hi),
                                      rfp.RfpConfig(cfg["n_modes"], cfg["extra_terms"]))]
        rows = rfp.modal_table(results)
        _write_rows(out / "rfp_modes.csv",
                    ["band_lower_hz", "band_upper_hz", "frequency_hz", "damping_ratio"],
                    [[_fmt(r[k]) for k in ("band_lower_hz", "band_upper_hz", "frequency_hz",
                                           "damping_ratio")] for r in rows])
        print(f"rfp: {len(rows)} modes -> {out / 'rfp_modes.csv'}")
        if figs:
            figs.rfp_figure(frf, results, out / "rfp_fit.png")

    if cfg["method"] in ("ssi", "both"):
        sensors = sorted(s for s in container.children((*key, cfg["repetition"]))
                         if container.exists(dataio.DatasetPath(*key, cfg["repetition"], s, "acc")))
        if not sensors:
            raise dataio.LeafNotFoundError(f"no acc records under /{'/'.join(key)}/{cfg['repetition']}")
        records = [container.get(dataio.DatasetPath(*key, cfg["repetition"], s, "acc"))[0]
                   for s in sensors]
        n_lags = cfg["n_lags"] or ssi.SsiConfig.lags_for(cfg["max_order"], len(records))
        config = ssi.SsiConfig(n_lags, cfg["max_order"], 2, cfg["decimation"],
                               tuple(cfg["tolerances"]), cfg["svs_components"])
        diagram = ssi.consistency_scan(ssi.build_covariances(records, config), config)
        ssi.write_diagram_csv(diagram, out / "ssi_diagram.csv")
        ssi.write_svs_csv(diagram, out / "ssi_svs.csv")
        al = ssi.alignments(diagram)
        _write_rows(out / "ssi_alignments.csv", ["frequency_hz", "damping_ratio", "fraction"],
                    [[_fmt(a.frequency_hz), _fmt(a.damping_ratio), _fmt(a.fraction)] for a in al])
        print(f"ssi: {len(diagram.orders)} orders, {len(al)} alignments -> {out / 'ssi_diagram.csv'}")
        if figs:
            figs.diagram_figure(diagram, out / "ssi_diagram.png")
    return EXIT_OK


def cmd_control(args, cfg) -> int:
    if args.eta is not None:
        cfg["target_error"] = args.eta
    if args.alpha is not None:
        cfg["alpha"] = args.alpha
    fs, n = float(cfg["sample_rate"]), int(cfg["n_samples"])
    grid = dataio.FrequencyGrid.for_record(n, fs)
    lo, hi = cfg["band"]
    target = control.make_target(cfg["kind"], grid,
                                 control.ramped_profile(lo, hi, cfg["ramp_hz"], cfg["level"]),
                                 seed=args.seed)
    modes = cfg["plant_modes"]
    if modes:
        plant = control.ForcePath.from_modes([m[0] for m in modes], [m[1] for m in modes],
                                             cfg["gain"], cfg["noise_level"])
    else:
        plant = control.ForcePath(cfg["gain"], None, cfg["noise_level"])
    loop_cfg = control.LoopConfig(cfg["alpha"], cfg["target_error"], cfg["max_iterations"],
                                  cfg["ramp_fraction"])
    result = control.run_loop(plant, target, loop_cfg, n, fs, seed=args.seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    control.write_history_csv(result, out / "history.csv")
    if cfg["save_psds"]:
        control.save_psds(result, out / "psds")
    final = result.final
    summary = [("iterations", result.iterations), ("epsilon", _fmt(final.error)),
               ("best_epsilon", _fmt(result.best.error)), ("target_error", _fmt(loop_cfg.target_error)),
               ("alpha", _fmt(loop_cfg.alpha)), ("converged", int(result.converged))]
    _write_rows(out / "summary.csv", ["key", "value"], summary)
    np.save(out / "final_drive.npy", result.drive.samples)
    print(f"control: {'converged' if result.converged else 'NOT converged'} after "
          f"{result.iterations} iterations, epsilon {final.error:.4g}")
    figs = _figures(args)
    if figs:
        figs.control_figure(result, out / "control.png")
    return EXIT_OK if result.converged else EXIT_NONCONVERGENCE


def _read_features(path, label_column):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"features file {path} not found")
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or label_column not in reader.fieldnames:
            raise AlignmentError(f"{path}: no {label_column!r} column")
        cols = [c for c in reader.fieldnames if c != label_column]
        rows, labels = [], []
        for line in reader:
            rows.append([float(line[c]) for c in cols])
            labels.append(line[label_column])
    return shm.FeatureMatrix(np.array(rows), tuple(labels))


def synthetic_features(classes: int, dim: int, per_class: int, separation: float, seed: int):
    """Unit-variance Gaussian clusters whose means sit ``separation`` apart
    along the first axis."""
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for k in range(classes):
        mean = np.zeros(dim)
        mean[0] = k * separation
        rows.append(rng.standard_normal((per_class, dim)) + mean)
        labels += [f"class{k}"] * per_class
    return shm.FeatureMatrix(np.vstack(rows), tuple(labels))


def cmd_shm(args, cfg) -> int:
    if cfg["features_file"]:
        fm = _read_features(cfg["features_file"], cfg["label_column"])
    else:
        fm = synthetic_features(cfg["synthetic_classes"], cfg["synthetic_dim"],
                                cfg["synthetic_per_class"], cfg["synthetic_separation"], args.seed)
    if cfg["n_components"]:
        fm, _ = shm.pca_fit_transform(fm, int(cfg["n_components"]))
    train_idx, test_idx = shm.stratified_split(fm.labels, cfg["train_fraction"], args.seed)
    train, test = fm.subset(train_idx), fm.subset(test_idx)
    model = shm.gmm_fit(train)
    pred = shm.gmm_predict(model, test.rows)
    matrix, labels = shm.confusion_matrix(test.labels, pred, model.labels)
    accuracy = float(np.trace(matrix) / max(matrix.sum(), 1))

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "confusion.csv", ["true\\predicted"] + [str(x) for x in labels],
                [[str(lab)] + row.tolist() for lab, row in zip(labels, matrix)])
    shm.save_model(model, out / "gmm_model.json")

    normal = cfg["normal_label"] if cfg["normal_label"] is not None else model.labels[0]
    normal_train = train.subset([i for i, lab in enumerate(train.labels) if lab == normal])
    if normal_train.n < 2:
        raise AlignmentError(f"too few training rows with label {normal!r} for novelty detection")
    detector = shm.novelty_fit(normal_train, cfg["confidence"], int(cfg["mc_samples"]), args.seed)
    shm.save_model(detector, out / "novelty_model.json")
    d, flags = shm.novelty_score(detector, test.rows)
    _write_rows(out / "novelty.csv", ["index", "D", "outlier", "true_label"],
                [[int(i), _fmt(dv), int(f), lab] for i, dv, f, lab in
                 zip(test_idx, d, flags, test.labels)])
    _write_rows(out / "summary.csv", ["key", "value"],
                [("accuracy", _fmt(accuracy)), ("train_rows", train.n), ("test_rows", test.n),
                 ("novelty_threshold", _fmt(detector.threshold)), ("normal_label", normal)])
    print(f"shm: accuracy {accuracy:.1%} on {test.n} test rows; novelty threshold "
          f"{detector.threshold:.4g}")
    figs = _figures(args)
    if figs:
        figs.confusion_figure(matrix, labels, out / "confusion.png")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "identify": cmd_identify, "control": cmd_control, "shm": cmd_shm}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--container", help=f"container root (default ${dataio.ENV_ROOT})")
    common.add_argument("--config", help="JSON config file with one section per command")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory for tables")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (JSON value)")
    common.add_argument("--figures", action="store_true",
                        help="also render PNG figures (needs matplotlib)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="modalbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic campaign")
    sub.add_parser("identify", parents=[common], help="RFP and/or SSI identification")
    p = sub.add_parser("control", parents=[common], help="closed-loop drive control simulation")
    p.add_argument("--eta", type=float, help="target error override")
    p.add_argument("--alpha", type=float, help="update weighting override")
    sub.add_parser("shm", parents=[common], help="GMM classification and novelty detection")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"modalbench: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConditioningError as exc:
        print(f"modalbench: conditioning error: {exc}", file=sys.stderr)
        return EXIT_CONDITIONING
    except (ModalBenchError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"modalbench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
