import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from modalbench.cli import DEFAULTS, main
from modalbench.dataio import ENV_ROOT, Container


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary(path):
    return {r["key"]: r["value"] for r in rows(path)}


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    box = root / "box"
    assert main(["synth", "--container", str(box), "--out", str(root / "synth"), "--seed", "5"]) == 0
    return root, box


def test_synth_layout(campaign):
    root, box = campaign
    listed = Container(box).list()
    assert {p.series for p in listed} == set(DEFAULTS["synth"]["series"])
    assert {p.repetition for p in listed} == {f"{r:02d}" for r in range(1, 11)}
    leaves = [r["path"] for r in rows(root / "synth" / "leaves.csv")]
    assert leaves == [str(p) for p in listed]
    modes = rows(root / "synth" / "modes.csv")
    assert len(modes) == len(DEFAULTS["synth"]["modes"])
    meta = Container(box).get(listed[0])[1]
    assert meta["sample_rate"] == 512.0


def test_synth_is_deterministic(campaign, tmp_path):
    root, box = campaign
    other = tmp_path / "again"
    assert main(["synth", "--container", str(other), "--seed", "5"]) == 0
    for p in Container(box).list():
        rel = "/".join(p.segments)
        for name in ("data.bin", "meta.txt"):
            assert (box / rel / name).read_bytes() == (other / rel / name).read_bytes()


def test_synth_refuses_overwrite(campaign):
    _, box = campaign
    assert main(["synth", "--container", str(box), "--seed", "5"]) == 3


def test_phase_two_acquisition(tmp_path):
    box = tmp_path / "p2"
    assert main(["synth", "--container", str(box), "--set", "phase=\"phase2\"",
                 "--set", "repetitions=1", "--set", "sensors=[\"LTC-05\"]"]) == 0
    c = Container(box)
    listed = c.list()
    assert {p.signal for p in listed} == {"force", "acc"}
    rec, meta = c.get(listed[0])
    assert rec.sample_rate == 2048.0 and len(rec) == 32768


def test_identify_banded_rfp_and_ssi(campaign, tmp_path):
    _, box = campaign
    out = tmp_path / "id"
    assert main(["identify", "--container", str(box), "--out", str(out)]) == 0
    found = rows(out / "rfp_modes.csv")
    truth = [m[0] for m in DEFAULTS["synth"]["modes"]]
    assert len(found) == len(truth)
    for r, f in zip(found, truth):
        assert float(r["frequency_hz"]) == pytest.approx(f, rel=1e-3)
    orders = {int(r["order"]) for r in rows(out / "ssi_diagram.csv")}
    assert len(orders) <= 25 and max(orders) == 50
    assert (out / "ssi_svs.csv").is_file() and (out / "ssi_alignments.csv").is_file()


def test_identify_is_deterministic(campaign, tmp_path):
    _, box = campaign
    for name in ("a", "b"):
        assert main(["identify", "--container", str(box), "--out", str(tmp_path / name),
                     "--set", "method=\"rfp\"", "--set", "rfp_mode=\"global\"",
                     "--set", "f_range=[1.0, 60.0]"]) == 0
    assert (tmp_path / "a" / "rfp_modes.csv").read_bytes() == \
        (tmp_path / "b" / "rfp_modes.csv").read_bytes()


def test_identify_missing_band_file(campaign, tmp_path):
    _, box = campaign
    code = main(["identify", "--container", str(box), "--out", str(tmp_path),
                 "--set", f"band_file=\"{tmp_path / 'nope.csv'}\""])
    assert code == 2


def test_identify_missing_series(campaign, tmp_path):
    _, box = campaign
    code = main(["identify", "--container", str(box), "--out", str(tmp_path),
                 "--set", "series=\"BR_AR_9\""])
    assert code == 3


def test_identify_conditioning_exit(tmp_path):
    box = tmp_path / "flat"
    assert main(["synth", "--container", str(box), "--set", "repetitions=2",
                 "--set", "level=0.0"]) == 0
    code = main(["identify", "--container", str(box), "--out", str(tmp_path / "o"),
                 "--set", "method=\"rfp\""])
    assert code == 4


def test_control_unity_plant(tmp_path):
    out = tmp_path / "ctl"
    assert main(["control", "--out", str(out), "--set", "n_samples=4096",
                 "--set", "sample_rate=512"]) == 0
    history = rows(out / "history.csv")
    assert len(history) == 1 and history[0]["converged"] == "1"
    assert float(history[0]["epsilon"]) <= 1e-20
    assert np.load(out / "final_drive.npy").shape == (4096,)
    assert (out / "psds" / "drive_psd_001.npy").is_file()


def test_control_resonant_and_eta(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"control": {"n_samples": 4096, "sample_rate": 512.0,
                                           "band": [10.0, 200.0], "plant_modes": [[60.0, 0.05]],
                                           "noise_level": 0.01}}))
    out = tmp_path / "ctl"
    assert main(["control", "--config", str(cfg), "--out", str(out), "--eta", "0.02"]) == 0
    s = summary(out / "summary.csv")
    assert s["converged"] == "1" and float(s["target_error"]) == 0.02


def test_control_nonconvergence_exit(tmp_path):
    code = main(["control", "--out", str(tmp_path), "--set", "n_samples=4096",
                 "--set", "sample_rate=512", "--set", "gain=3.0", "--set", "max_iterations=2",
                 "--eta", "1e-12"])
    assert code == 5
    assert summary(tmp_path / "summary.csv")["converged"] == "0"


def test_shm_separable(tmp_path):
    out = tmp_path / "shm"
    assert main(["shm", "--out", str(out), "--set", "synthetic_separation=40.0",
                 "--set", "mc_samples=20000"]) == 0
    assert float(summary(out / "summary.csv")["accuracy"]) == 1.0
    novelty = rows(out / "novelty.csv")
    assert list(novelty[0]) == ["index", "D", "outlier", "true_label"]
    flagged = {r["true_label"] for r in novelty if r["outlier"] == "1"}
    assert "class1" in flagged
    assert json.loads((out / "gmm_model.json").read_text())["type"] == "gmm"


def test_shm_features_file(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "features.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f1", "f2", "label"])
        for k, lab in enumerate(("healthy", "damaged")):
            for row in rng.standard_normal((20, 2)) + 10 * k:
                w.writerow([*row, lab])
    out = tmp_path / "o"
    assert main(["shm", "--out", str(out), "--set", f"features_file=\"{path}\"",
                 "--set", "normal_label=\"healthy\"", "--set", "mc_samples=5000"]) == 0
    assert summary(out / "summary.csv")["normal_label"] == "healthy"


def test_shm_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["shm", "--out", str(tmp_path / name), "--seed", "3",
                     "--set", "mc_samples=5000"]) == 0
    for table in ("confusion.csv", "novelty.csv", "summary.csv", "novelty_model.json"):
        assert (tmp_path / "a" / table).read_bytes() == (tmp_path / "b" / table).read_bytes()


def test_usage_errors(tmp_path, monkeypatch):
    assert main(["control", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"plot": {}}))
    assert main(["shm", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    monkeypatch.delenv(ENV_ROOT, raising=False)
    assert main(["synth"]) == 2
    with pytest.raises(SystemExit) as info:
        main(["calibrate"])
    assert info.value.code == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "modalbench.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr
