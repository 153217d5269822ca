import json
import os

import pytest

from tagdiff import cli

SMALL = {
    "T": 20,
    "n_reference": 500,
    "verify": {"n_instances": 50, "n_continuous": 5},
    "corrupted": {"n_samples": 100, "omega": [0.0, 0.5, 1.0, 2.0]},
    "multicond": {"n_samples": 100, "n_steps": 10, "omega": [1.0], "variants": ["single_predictor"]},
    "escape": {"trials": 40, "max_steps": 1000},
    "fewstep": {"n_samples": 200, "steps": [1, 3], "omega": [0.0, 0.5]},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(argv):
    return cli.main([str(a) for a in argv])


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_defaults_resolve_for_every_experiment():
    for name in cli.EXPERIMENTS:
        cfg = cli.resolve_config(name)
        assert cfg["experiment"] == name and cfg["out"] == os.path.join("runs", name)


def test_flag_overrides_win(small_config):
    cfg = cli.resolve_config("corrupted", cli.load_config_file(small_config), {"seed": 7, "sigma": [0.1, 0.3]})
    assert cfg["seed"] == 7 and cfg["sigma"] == [0.1, 0.3] and cfg["T"] == 20 and cfg["n_samples"] == 100


def test_toml_config(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("T = 30\n[escape]\ntrials = 12\n")
    cfg = cli.resolve_config("escape", cli.load_config_file(str(path)))
    assert cfg["T"] == 30 and cfg["trials"] == 12


def test_config_hash_ignores_plumbing():
    a = cli.resolve_config("toy", overrides={"out": "x", "workers": 1})
    b = cli.resolve_config("toy", overrides={"out": "y", "workers": 4, "plots": True})
    c = cli.resolve_config("toy", overrides={"seed": 1})
    assert cli.config_hash(a) == cli.config_hash(b) != cli.config_hash(c)


@pytest.mark.parametrize("argv", [
    ["escape", "--config", "/nonexistent.json"],
    ["escape", "--seed", "-1"],
    ["escape", "--workers", "0"],
    ["corrupted", "--omega", "-1"],
    ["corrupted", "--sigma", "-0.5"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert run(argv + ["--out", tmp_path]) == 2


def test_unknown_key_and_bad_file_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"escape": {"trails": 3}}))
    assert run(["escape", "--config", bad, "--out", tmp_path]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert run(["escape", "--config", broken, "--out", tmp_path]) == 2


def test_bad_flag_value_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["corrupted", "--omega", "a,b", "--out", tmp_path])
    assert exc.value.code == 2


def test_verify_passes_and_writes_only_report(small_config, tmp_path, capsys):
    out = tmp_path / "v"
    assert run(["verify", "--config", small_config, "--out", out]) == 0
    assert sorted(os.listdir(out)) == ["report.json"]
    report = json.loads(read(out / "report.json"))
    assert all(report["checks"].values())
    assert report["config"]["n_instances"] == 50
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS  verify:") for line in lines)


def test_verify_negative_control_exits_1(small_config, tmp_path, capsys):
    assert run(["verify", "--config", small_config, "--out", tmp_path, "--debug-corrupt-gamma"]) == 1
    assert "FAIL  verify:tls_decomposition" in capsys.readouterr().out


def test_divergence_exits_3(small_config, tmp_path):
    out = tmp_path / "d"
    assert run(["corrupted", "--config", small_config, "--sigma", "1e300", "--omega", "0,1", "--out", out]) == 3
    assert "diverged" in read(out / "results.csv").decode()


def test_reports_are_byte_stable(small_config, tmp_path):
    out = tmp_path / "m"
    assert run(["multicond", "--config", small_config, "--out", out]) == 0
    first = {name: read(out / name) for name in ("report.json", "results.csv")}
    assert run(["multicond", "--config", small_config, "--out", out]) == 0
    assert first == {name: read(out / name) for name in ("report.json", "results.csv")}


def test_manifest_and_plots(small_config, tmp_path):
    out = tmp_path / "f"
    code = run(["fewstep", "--config", small_config, "--out", out, "--seed", "3", "--plots"])
    assert code in (0, 1)
    manifest = json.loads(read(out / "manifest.json"))
    assert manifest["seed"] == 3 and manifest["experiment"] == "fewstep"
    assert manifest["config_hash"] == cli.config_hash(manifest["config"])
    assert {"code_version", "python", "numpy", "argv"} <= set(manifest)
    svgs = [n for n in os.listdir(out) if n.endswith(".svg")]
    assert svgs and all(read(out / n).lstrip().startswith(b"<?xml") for n in svgs)


def test_serial_and_parallel_ledgers_match(small_config, tmp_path):
    a, b = tmp_path / "serial", tmp_path / "parallel"
    assert run(["corrupted", "--config", small_config, "--out", a, "--workers", "1"]) in (0, 1)
    assert run(["corrupted", "--config", small_config, "--out", b, "--workers", "3"]) in (0, 1)
    assert read(a / "results.csv") == read(b / "results.csv")
    assert read(a / "report.json") == read(b / "report.json")


def test_escape_subcommand(small_config, tmp_path):
    out = tmp_path / "e"
    run(["escape", "--config", small_config, "--out", out])
    report = json.loads(read(out / "report.json"))
    assert report["experiment"] == "escape" and set(report["checks"]) >= {"modified_escapes_faster", "mann_whitney_significant"}
