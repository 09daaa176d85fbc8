import json
import math
import os

import numpy as np
import pytest

from parabolic_greens import __version__
from parabolic_greens.cli import emit_csv, load_config, read_csv, run
from parabolic_greens.errors import NumericalError, ResourceError, UsageError


def small_config(tmp_path, **extra):
    cfg = {"solver": {"dim": 1, "nx": 8, "nt": 16},
           "kernel": {"k_max": 40},
           "partition": {"levels": 1},
           "rsvd": {"k": 3, "p": 3},
           "seed": 5}
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def body(path):
    """File contents without the timestamp line."""
    with open(path) as fh:
        return [ln for ln in fh if not ln.startswith("# created=")]


def test_theory_prints_constants(capsys):
    code = run(["theory", "--n", "1", "--lambda", "1", "--Lambda", "1", "--beta", "1",
                "--theta", "0.5", "--rho", "1"])
    assert code == 0
    vals = dict(ln.split(" = ") for ln in capsys.readouterr().out.splitlines())
    assert float(vals["kappa_c"]) == pytest.approx(2.12132, abs=1e-5)
    assert float(vals["c_appr"]) == pytest.approx(91.913, abs=1e-3)
    assert float(vals["c_rho"]) == pytest.approx(1590.0, rel=1e-4)


def test_partition_summary(capsys):
    assert run(["partition", "--dim", "1", "--levels", "1"]) == 0
    assert capsys.readouterr().out.strip() == "admissible=24 non-admissible=40"


def test_partition_document(tmp_path):
    out = tmp_path / "part.json"
    assert run(["partition", "--dim", "1", "--levels", "1", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["admissible"] == 24 and doc["non_admissible"] == 40
    assert {"level", "indices_x", "indices_y", "status"} <= set(doc["leaves"][0])
    assert doc["provenance"]["version"] == __version__
    assert len(doc["provenance"]["config_sha256"]) == 64


def test_missing_out_is_usage_error(capsys):
    assert run(["exp", "diagonal-mass"]) == 2
    assert "--out" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["nope"], ["partition", "--dim", "x", "--levels", "1"]])
def test_bad_arguments_exit_2(argv):
    assert run(argv) == 2


def test_unwritable_out_fails_before_solving(tmp_path, capsys):
    cfg = small_config(tmp_path)
    assert run(["learn", "--config", cfg, "--out", str(tmp_path / "no" / "m.bin")]) == 3
    assert "does not exist" in capsys.readouterr().err


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PGREEN_OUTPUT_DIR", str(tmp_path))
    assert run(["partition", "--dim", "1", "--levels", "1", "--out", "p.json"]) == 0
    assert (tmp_path / "p.json").exists()


# -- config -------------------------------------------------------------------

def test_config_defaults_and_strictness(tmp_path):
    cfg = load_config(small_config(tmp_path))
    assert cfg["solver"]["nx"] == 8 and cfg["solver"]["T"] == 1.0
    assert cfg["rsvd"]["t"] == math.e and cfg["rsvd"]["trials"] == 50
    for bad in ({"solver": {"nx": 8, "grid": 3}}, {"extra": {}}, {"seed": -1},
                {"kernel": 3}):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(bad))
        with pytest.raises(UsageError):
            load_config(str(p))
    p = tmp_path / "broken.json"
    p.write_text("{")
    with pytest.raises(UsageError):
        load_config(str(p))
    with pytest.raises(ResourceError):
        load_config(str(tmp_path / "missing.json"))


def test_unknown_config_key_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"rsvd": {"rank": 3}}))
    assert run(["learn", "--config", str(p), "--out", str(tmp_path / "m.bin")]) == 2


# -- csv ----------------------------------------------------------------------

def test_emit_csv_empty_table_is_header_only(tmp_path):
    p = tmp_path / "e.csv"
    emit_csv([], p, columns=["a", "b"])
    assert p.read_bytes() == b"a,b\n"
    with pytest.raises(UsageError):
        emit_csv([], p)


def test_emit_csv_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    vals = np.r_[rng.standard_normal(50) * 10.0 ** rng.integers(-300, 300, 50),
                 0.1, 1 / 3, 5e-324, 1.7976931348623157e308, -0.0]
    p = tmp_path / "r.csv"
    emit_csv([{"i": i, "v": v} for i, v in enumerate(vals)], p, footer=["note"])
    raw = p.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"# note\n")
    back = read_csv(p)
    assert [float(r["v"]) for r in back] == list(vals)
    assert [int(r["i"]) for r in back] == list(range(len(vals)))


def test_emit_csv_rejects_nan_before_writing(tmp_path):
    p = tmp_path / "n.csv"
    with pytest.raises(NumericalError):
        emit_csv([{"a": 1.0}, {"a": float("nan")}], p)
    assert not p.exists()
    with pytest.raises(UsageError):
        emit_csv([{"a": 1.0}, {"b": 2.0}], p)


def test_emit_csv_write_failure(tmp_path):
    with pytest.raises(ResourceError):
        emit_csv([{"a": 1}], tmp_path / "no" / "x.csv")


def test_csv_quoting(tmp_path):
    p = tmp_path / "q.csv"
    emit_csv([{"name": 'a,"b"', "v": 1}], p)
    assert read_csv(p)[0]["name"] == 'a,"b"'


# -- end-to-end ---------------------------------------------------------------

def test_learn_eval_error_pipeline(tmp_path, capsys):
    cfg = small_config(tmp_path)
    m1, m2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
    assert run(["learn", "--config", cfg, "--out", str(m1), "--threads", "1"]) == 0
    assert run(["learn", "--config", cfg, "--out", str(m2), "--threads", "2"]) == 0
    # the model file carries no timestamp, so reruns are byte-identical
    assert m1.read_bytes() == m2.read_bytes()

    pts = tmp_path / "pts.csv"
    emit_csv([{"x": 0.5, "t": 0.9, "y": 0.5, "s": 0.1}, {"x": 0.2, "t": 0.1, "y": 0.2, "s": 0.5}],
             pts)
    out = tmp_path / "g.csv"
    assert run(["eval", "--model", str(m1), "--points", str(pts), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert float(rows[1]["G"]) == 0.0
    assert math.isfinite(float(rows[0]["G"]))
    assert any(ln.startswith("# config_sha256=") for ln in open(out))

    rep = tmp_path / "err.json"
    capsys.readouterr()
    assert run(["error", "--model", str(m1), "--out", str(rep), "--points-per-axis", "2"]) == 0
    doc = json.loads(rep.read_text())
    assert 0 < doc["relative"] <= 1 and doc["pairs_total"] > 0
    assert doc["provenance"]["seed"] == 5
    assert "relative L1 error" in capsys.readouterr().out


def test_corrupt_model_exit_3(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    pts = tmp_path / "pts.csv"
    emit_csv([], pts, columns=["x", "t", "y", "s"])
    assert run(["eval", "--model", str(bad), "--points", str(pts),
                "--out", str(tmp_path / "o.csv")]) == 3


def test_ground_truth_and_table_oracle(tmp_path):
    tab = tmp_path / "tab.bin"
    assert run(["ground-truth", "--nx", "8", "--nt", "16", "--out", str(tab)]) == 0
    cfg = small_config(tmp_path)
    m = tmp_path / "m.bin"
    assert run(["learn", "--config", cfg, "--out", str(m), "--threads", "1"]) == 0
    rep = tmp_path / "e.json"
    assert run(["error", "--model", str(m), "--oracle", str(tab), "--out", str(rep)]) == 0
    assert json.loads(rep.read_text())["oracle"] == "DiscreteKernelTable"


def test_ground_truth_memory_cap_exit_3(tmp_path):
    assert run(["ground-truth", "--nx", "64", "--nt", "256", "--max-mb", "1",
                "--out", str(tmp_path / "t.bin")]) == 3


def test_experiment_rerun_identical_up_to_timestamp(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert run(["exp", "diagonal-mass", "--num", "4", "--out", str(p)]) == 0
    assert body(a) == body(b)
    lines = open(a).read().splitlines()
    assert lines[0] == "r_t,mass,relative,slope,predicted"
    assert lines[-2].startswith("# config_sha256=") and lines[-1].startswith("# created=")


def test_rsvd_bound_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert run(["exp", "rsvd-bound", "--nx", "16", "--nt", "64", "--trials", "3",
                "--k", "4", "--p", "4", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 3
    assert {"trial", "rel_error", "bound", "exceeded"} <= set(rows[0])


def test_learning_rate_csv(tmp_path):
    out = tmp_path / "lr.csv"
    assert run(["exp", "learning-rate", "--targets", "0.9", "--c-diag", "1", "--points-per-axis", "1", "--nx", "16", "--nt", "64",
                "--threads", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["target", "seed", "n_levels", "error", "pairs", "slope"]


def test_version_flag(capsys):
    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_single_target_learning_rate_leaves_slope_empty(tmp_path):
    out = tmp_path / "lr.csv"
    assert run(["exp", "learning-rate", "--targets", "0.9", "--c-diag", "1",
                "--points-per-axis", "1", "--nx", "16", "--nt", "64", "--threads", "1",
                "--out", str(out)]) == 0
    assert read_csv(out)[0]["slope"] == ""
