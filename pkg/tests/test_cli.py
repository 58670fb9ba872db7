import csv
import json
import os
import subprocess
import sys

import pytest

from densekit.cli import main

TINY_ARGS = ["--set", "blocks=2", "--set", "growth=4", "--set", "classes=2", "--samples", "48",
             "--eval-samples", "16", "--size", "8", "--epochs", "2"]


def cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text("[network]\nblocks = 2\ngrowth = 4\nclasses = 2\nname = tiny\n\n[train]\nbatch = 16\n")
    return str(p)


# ---------------------------------------------------------------- describe


def test_describe_densenet121(capsys, tmp_path):
    code, out, _ = cli(capsys, "describe", "densenet121", "-o", str(tmp_path), "--no-plot")
    assert code == 0
    assert "depth 121" in out
    d = json.loads((tmp_path / "describe.json").read_text())
    assert d["depth"] == 121 and d["params"] == 7_978_856
    rows = list(csv.DictReader((tmp_path / "layers.csv").open()))
    assert sum(int(r["params"]) for r in rows) == d["params"]


def test_describe_bc100_about_0_8m(capsys, tmp_path):
    code, out, _ = cli(capsys, "describe", "densenet-bc-100-12", "-o", str(tmp_path))
    assert code == 0 and "(0.77M)" in out and "depth 100" in out
    params = json.loads((tmp_path / "describe.json").read_text())["params"]
    assert abs(params - 0.8e6) <= 0.05e6


def test_invalid_theta_names_field(capsys, tmp_path):
    code, out, err = cli(capsys, "describe", "densenet-bc-100-12", "--set", "compression=1.5", "-o", str(tmp_path))
    assert code == 2
    assert err.startswith("E_CONFIG: compression") and err.count("\n") == 1


def test_unknown_key_named(capsys, tmp_path):
    code, _, err = cli(capsys, "describe", "densenet121", "--set", "bogus=1", "-o", str(tmp_path))
    assert code == 2 and "'bogus'" in err
    cfg = tmp_path / "c.ini"
    cfg.write_text("[network]\nblocks = 2\nwidth = 3\n")
    code, _, err = cli(capsys, "describe", str(cfg), "-o", str(tmp_path))
    assert code == 2 and "'width'" in err


def test_parse_error_has_line_number(capsys, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[network]\nblocks = 2\ngrowth = many\n")
    code, _, err = cli(capsys, "describe", str(cfg), "-o", str(tmp_path))
    assert code == 2 and "growth" in err and "line 3" in err


@pytest.mark.parametrize("argv,code,prefix", [
    (["describe", "no/such/file.ini"], 2, "E_CONFIG"),
    (["frobnicate"], 2, "E_USAGE"),
    (["describe"], 2, "E_USAGE"),
    (["train", "densenet-bc-100-12", "--dataset", "/no/such/data.dkds"], 3, "E_DATA"),
    (["gradcheck", "--samples", "0"], 2, "E_USAGE"),
    (["gradcheck", "densenet-bc-100-12"], 2, "E_CONFIG"),
])
def test_exit_codes(capsys, tmp_path, argv, code, prefix):
    got, _, err = cli(capsys, *argv, "-o", str(tmp_path))
    assert got == code
    assert err.startswith(prefix + ":")
    assert len(err.strip().splitlines()) == 1


# ---------------------------------------------------------------- memplan


def test_memplan_copy_counts(capsys, tmp_path):
    code, out, _ = cli(capsys, "memplan", "densenet121", "--layers", "6", "--block", "1", "-o", str(tmp_path),
                       "--no-plot")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "memplan.csv").open()))
    by = {r["strategy"]: r for r in rows}
    assert by["naive"]["copy_counts"] == "6,5,4,3,2,1"
    assert by["shared"]["feature_bytes_fwd"] == "3211264"
    assert by["naive"]["stored_maps"] == "224"


def test_memplan_ratio_large_block(capsys, tmp_path):
    code, _, _ = cli(capsys, "memplan", "densenet-bc-100-12", "--layers", "48", "--set", "growth=12",
                     "-o", str(tmp_path), "--no-plot")
    assert code == 0
    by = {r["strategy"]: r for r in csv.DictReader((tmp_path / "memplan.csv").open())}
    assert int(by["naive"]["feature_bytes_train_peak"]) > 2 * int(by["shared+recompute"]["feature_bytes_train_peak"])


def test_memplan_sweep_and_plot(capsys, tmp_path):
    code, _, _ = cli(capsys, "memplan", "densenet-bc-100-12", "--layers", "4:12:4", "--mode", "inference",
                     "-o", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "memplan.csv").open()))
    assert [int(r["depth"]) for r in rows] == [4, 8, 12] * 3
    assert all(r["feature_bytes_train_peak"] == "" for r in rows)
    assert (tmp_path / "memplan.png").stat().st_size > 0


# ---------------------------------------------------------------- output handling


def test_env_out_dir(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DENSEKIT_OUT", str(tmp_path / "env"))
    assert cli(capsys, "describe", "densenet121", "--no-plot")[0] == 0
    assert (tmp_path / "env" / "describe.json").exists()
    assert cli(capsys, "describe", "densenet121", "--no-plot", "-o", str(tmp_path / "flag"))[0] == 0
    assert (tmp_path / "flag" / "describe.json").exists()


def test_manifest(capsys, tmp_path):
    cli(capsys, "describe", "densenet121", "-o", str(tmp_path), "--no-plot")
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["command"] == "describe"
    assert set(m["files"]) == {"describe.json", "layers.csv"}


def _outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_idempotent_outputs(capsys, tmp_path):
    cfg = tiny_cfg(tmp_path)
    for sub in ("a", "b"):
        assert cli(capsys, "train", cfg, *TINY_ARGS[6:], "-o", str(tmp_path / sub))[0] == 0
    a, b = _outputs(tmp_path / "a"), _outputs(tmp_path / "b")
    assert set(a) == {"checkpoint.dkc", "metrics.csv", "metrics.png"}
    assert a == b


def test_no_plot(capsys, tmp_path):
    cfg = tiny_cfg(tmp_path)
    assert cli(capsys, "train", cfg, *TINY_ARGS[6:], "--no-plot", "-o", str(tmp_path / "o"))[0] == 0
    assert not list((tmp_path / "o").glob("*.png"))


# ---------------------------------------------------------------- train, heatmap, sweep


def test_train_then_heatmap(capsys, tmp_path):
    cfg = tiny_cfg(tmp_path)
    code, out, _ = cli(capsys, "train", cfg, *TINY_ARGS[6:], "-o", str(tmp_path / "t"), "--no-plot")
    assert code == 0
    metrics = list(csv.DictReader((tmp_path / "t" / "metrics.csv").open()))
    assert len(metrics) == 2 and metrics[0]["wall_ms"] == ""
    code, _, _ = cli(capsys, "heatmap", cfg, "--checkpoint", str(tmp_path / "t" / "checkpoint.dkc"),
                     "-o", str(tmp_path / "h"), "--no-plot")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "h" / "heatmap.csv").open()))
    assert rows and all(float(r["value"]) >= 0 for r in rows)
    code, _, err = cli(capsys, "heatmap", "densenet-bc-100-12", "--checkpoint",
                       str(tmp_path / "t" / "checkpoint.dkc"), "-o", str(tmp_path / "h2"))
    assert code == 3 and err.startswith("E_DATA")


def test_sweep_no_train(capsys, tmp_path):
    code, _, _ = cli(capsys, "sweep", "densenet-bc-100-12", "--vary", "compression", "--no-train",
                     "-o", str(tmp_path), "--no-plot")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    params = [int(r["params"]) for r in rows]
    assert params == sorted(params) and len(rows) == 3


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_pass_and_corrupt(capsys, tmp_path):
    code, out, _ = cli(capsys, "gradcheck", "-o", str(tmp_path / "ok"))
    assert code == 0 and "PASS" in out
    assert (tmp_path / "ok" / "gradcheck.csv").exists()
    code, out, err = cli(capsys, "gradcheck", "--corrupt", "-o", str(tmp_path / "bad"))
    assert code == 1 and "FAIL" in out
    assert err.startswith("E_GRADCHECK: gradient mismatch at ")


def test_console_script(tmp_path):
    env = dict(os.environ, DENSEKIT_OUT=str(tmp_path))
    r = subprocess.run([sys.executable, "-m", "densekit.cli", "describe", "densenet121", "--no-plot"],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    assert "depth 121" in r.stdout
