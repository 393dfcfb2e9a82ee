import json

import pytest

from romocp.cli import main

CONFIG = {"problem": "pollutant", "mesh": {"nx": 10},
          "sampling": {"distribution": "uniform", "count": 6, "seed": 1},
          "basis_count": 3}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(CONFIG))
    cache = root / "cache.bin"
    code = main(["offline", "--config", str(config), "--cache", str(cache),
                 "--archive", str(root / "snaps.bin"),
                 "--out", str(root / "offline.json")])
    assert code == 0
    return root, config, cache


def test_offline_summary(workspace):
    root, _, cache = workspace
    summary = json.loads((root / "offline.json").read_text())
    assert summary["reduced_dimension"] == 13
    assert cache.exists()
    assert (root / "snaps.bin").exists()


def test_online_roundtrip(workspace, capsys):
    _, _, cache = workspace
    code = main(["online", "--cache", str(cache), "--mu", "1,-1,1"])
    assert code == 0
    body = json.loads(capsys.readouterr().out)
    assert body["cost"] > 0
    assert body["mu"].startswith("1.0")


def test_online_domain_error_exit_code(workspace, capsys):
    _, _, cache = workspace
    code = main(["online", "--cache", str(cache), "--mu", "9,9,9"])
    assert code == 4
    assert "domain" in capsys.readouterr().err


def test_missing_cache_exit_code(tmp_path, capsys):
    code = main(["online", "--cache", str(tmp_path / "nope.bin"), "--mu", "1,0,0"])
    assert code == 2


def test_convergence_csv(workspace):
    root, config, cache = workspace
    out = root / "conv.csv"
    code = main(["convergence", "--cache", str(cache), "--config", str(config),
                 "--basis-list", "1,3", "--test-size", "3", "--seed", "5",
                 "--out", str(out), "--format", "csv"])
    assert code == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0].split(",")[0] == "N"
    assert len(lines) == 3


def test_speedup_json(workspace):
    root, _, cache = workspace
    out = root / "speedup.json"
    code = main(["speedup", "--cache", str(cache), "--basis-list", "3",
                 "--repetitions", "1", "--out", str(out), "--format", "json"])
    assert code == 0
    body = json.loads(out.read_text())
    assert body["rows"][0]["N"] == 3


def test_compare_pod(workspace):
    root, config, _ = workspace
    small_cfg = root / "small.json"
    small_cfg.write_text(json.dumps({"problem": "pollutant", "mesh": {"nx": 5}}))
    out = root / "compare.csv"
    code = main(["compare-pod", "--config", str(small_cfg), "--basis-list", "1,2",
                 "--training-count", "4", "--test-size", "2", "--out", str(out)])
    assert code == 0
    assert out.read_text().startswith("N,")


def test_export_vtk(workspace):
    root, _, cache = workspace
    out = root / "fields.vtk"
    code = main(["export", "--cache", str(cache), "--mu", "0.9,0.2,0.4",
                 "--out", str(out), "--no-truth"])
    assert code == 0
    assert out.read_text().startswith("# vtk DataFile Version 3.0")


def test_bad_config_path_exit_code(tmp_path, capsys):
    code = main(["offline", "--config", str(tmp_path / "missing.json"),
                 "--cache", str(tmp_path / "c.bin")])
    assert code == 2


def test_bad_mu_string(workspace):
    _, _, cache = workspace
    with pytest.raises(SystemExit):
        main(["online", "--cache", str(cache), "--mu", "a,b"])
