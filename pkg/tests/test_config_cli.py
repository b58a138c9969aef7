import csv
import json

import numpy as np
import pytest
import yaml

from aneurysm_vt.cli import main
from aneurysm_vt.config import load_config, set_key, validate
from aneurysm_vt.errors import ConfigError
from aneurysm_vt.occlusion import report_from_volumes, write_report_csv
from aneurysm_vt.pipeline import read_report, run_pipeline

TINY = {
    "geometry": {"builtin": "tube", "tube_radius_mm": 1.0, "spacing_mm": 0.5, "length_mm": 4.0},
    "physics": {"inlet": "constant", "inlet_velocity_cm_per_s": 2.0, "outlet": "constant"},
    "clot": {"t_end_s": 4.0, "dt_chem_s": 0.5, "coupling_interval_s": 2.0, "flow_time_s": 0.2},
    "flow": {"warmup_cycles": 0, "snapshots_per_cycle": 2},
    "tracer": {"n_cycles": 2, "injection_duration_s": 0.5, "series_every_s": 0.1},
}


def _write(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


def test_empty_config_is_valid():
    cfg = validate({})
    assert cfg["physics"]["wall"] == "free-slip"
    assert cfg["dsa"]["k_per_mm"] == 0.6
    assert cfg["physics"]["release"]["peak_nM"] == 160.0


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match="geometry.spacing"):
        validate({"geometry": {"spacing": 0.4}})
    with pytest.raises(ConfigError, match="flow.cfl"):
        validate({"flow": {"cfl": -1.0}})
    with pytest.raises(ConfigError, match="treatment.coil"):
        validate({"treatment": {"coil": {"tube_diameter_mm": 5.0}}})


def test_set_key_revalidates():
    cfg = set_key(validate({}), "geometry.spacing_mm", "0.25")
    assert cfg["geometry"]["spacing_mm"] == 0.25
    with pytest.raises(ConfigError):
        set_key(cfg, "geometry.nope", "1")


def test_mesh_path_must_exist(tmp_path):
    p = _write(tmp_path, {"paths": {"mesh": "missing.stl"}})
    with pytest.raises(ConfigError, match="paths.mesh"):
        load_config(p)


def test_cli_config_errors_exit_2(tmp_path, capsys, monkeypatch):
    p = _write(tmp_path, {"bogus": 1})
    assert main(["run", "--config", str(p), "--output", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("geometry: [1, 2\n")
    assert main(["run", "--config", str(bad)]) == 2
    monkeypatch.setenv("ANEURYSM_VT_THREADS", "many")
    assert main(["run", "--config", str(_write(tmp_path, TINY))]) == 2


def test_cli_numerical_failure_exits_3(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    rc = main(["deploy-coil", "--config", str(p), "--output", str(tmp_path / "o"),
               "--set", "geometry.spacing_mm=5.0"])
    assert rc == 3
    assert "error" in capsys.readouterr().err


def _files(out):
    return {p.relative_to(out).as_posix(): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file() and not p.name.startswith(".")}


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    p = _write(tmp, TINY)
    out = tmp / "out"
    assert main(["run", "--config", str(p), "--output", str(out)]) == 0
    return p, out


def test_tube_without_treatment_reports_zero(finished):
    _, out = finished
    name, rep = read_report(out)
    assert name == "none" and rep.pct_total == 0.0
    assert "0.00 %" in (out / "report" / "report.txt").read_text()
    assert (out / "dsa" / "dsa_00.pgm").read_bytes().startswith(b"P5")


def test_second_run_is_a_no_op(finished, capsys):
    p, out = finished
    before = (out / "manifest.txt").read_text()
    assert main(["run", "--config", str(p), "--output", str(out)]) == 0
    assert "none (up to date)" in capsys.readouterr().out
    assert (out / "manifest.txt").read_text() == before


def test_corrupt_marker_reruns_identically(finished, tmp_path):
    p, out = finished
    before = _files(out)
    (out / "flow" / ".done").write_text("garbage")
    cfg = load_config(p)
    ran, _ = run_pipeline(cfg, out)
    assert ran == ["flow", "tracer", "dsa", "report"]
    assert _files(out) == before


def test_deleting_tracer_reruns_downstream_only(finished):
    p, out = finished
    before = _files(out)
    for f in (out / "tracer").iterdir():
        f.unlink()
    ran, _ = run_pipeline(load_config(p), out)
    assert ran == ["tracer", "dsa", "report"]
    assert _files(out) == before


def test_render_dsa_checksum_is_stable(finished):
    p, out = finished
    before = (out / "dsa" / "dsa_00.pgm").read_bytes()
    assert main(["render-dsa", "--config", str(p), "--output", str(out), "--force"]) == 0
    assert (out / "dsa" / "dsa_00.pgm").read_bytes() == before


def test_manifest_lists_checksums(finished):
    import hashlib
    _, out = finished
    lines = (out / "manifest.txt").read_text().splitlines()
    for line in lines:
        rel, digest = line.split()
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    marker = json.loads((out / "tracer" / ".done").read_text())
    assert "key" in marker


def test_simulate_clot_without_release(tmp_path):
    data = dict(TINY, geometry={"builtin": "side-sac", "tube_radius_mm": 1.0, "sac_radius_mm": 1.5,
                                "spacing_mm": 0.5, "length_mm": 6.0})
    p = _write(tmp_path, data)
    out = tmp_path / "o"
    assert main(["simulate-clot", "--config", str(p), "--output", str(out),
                 "--set", "physics.release.A_nM_min=0"]) == 0
    with open(out / "clot" / "clot.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) >= 2
    assert all(float(r["clot_volume_mm3"]) == 0.0 for r in rows)
    assert not (out / "flow").exists()


def test_report_compare_table(finished, tmp_path, capsys):
    p, out = finished
    other = tmp_path / "coil"
    (other / "report").mkdir(parents=True)
    write_report_csv({"coil": report_from_volumes(71.05, 36.57, 4.36, "II")}, other / "report" / "report.csv")
    assert main(["report", "--config", str(p), "--output", str(out), "--compare", str(other)]) == 0
    text = capsys.readouterr().out
    assert "Sum coil" in text and "57.61 %" in text and "51.47 %" in text
    assert "6.14 %" in text


def test_thread_count_does_not_change_outputs(finished, tmp_path):
    p, out = finished
    out2 = tmp_path / "t2"
    assert main(["run", "--config", str(p), "--output", str(out2), "--threads", "2"]) == 0
    a, b = _files(out), _files(out2)
    a.pop("config.yaml"), b.pop("config.yaml")
    assert a == b
    assert np.array_equal(np.load(out / "tracer" / "snapshots.npy"), np.load(out2 / "tracer" / "snapshots.npy"))
