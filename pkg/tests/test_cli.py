import csv
import json

import pytest

from smartinf.cli import main
from smartinf.config import OUTPUT_ENV, ExperimentConfig
from smartinf.errors import ConfigError


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_deterministic_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--mode", "su_o", "--devices", "3", "--steps", "3",
                     "--deterministic", "--out", str(out)]) == 0
        outs.append(out)
    for f in ("steps.csv", "aggregate.csv", "summary.txt"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    rows = _rows(outs[0] / "steps.csv")
    assert len(rows) == 3
    assert all(int(r["host_read"]) == int(r["host_write"]) == 2 * 2 * 65536 for r in rows)


def test_train_compressed_reports_bytes(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert main(["train", "--mode", "su_o_c", "--compression-pct", "2", "--steps", "2",
                 "--deterministic", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "steps.csv")
    assert int(rows[0]["kept_pairs"]) == 656
    assert int(rows[0]["host_write"]) < 0.05 * 2 * 65536


def test_output_env_overrides_flag(tmp_path, monkeypatch):
    env_dir = tmp_path / "env"
    monkeypatch.setenv(OUTPUT_ENV, str(env_dir))
    assert main(["train", "--mode", "memory", "--steps", "1",
                 "--out", str(tmp_path / "flag")]) == 0
    assert (env_dir / "steps.csv").exists()
    assert not (tmp_path / "flag").exists()


def test_train_from_config_file(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"mode": "su", "steps": 2, "devices": 2,
                               "optimizer": {"kind": "sgd_momentum", "lr": 0.01},
                               "output_dir": str(tmp_path / "out")}))
    assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
    assert len(_rows(tmp_path / "out" / "steps.csv")) == 2


def test_train_with_topology_file(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    topo = tmp_path / "topo.json"
    topo.write_text(json.dumps({"devices": [{"kind": "csd"}, {"kind": "csd"}],
                                "host_link_bw": 16e9}))
    assert main(["train", "--mode", "su_o", "--topology", str(topo), "--steps", "1",
                 "--out", str(tmp_path / "o")]) == 0
    assert "2 device(s)" in (tmp_path / "o" / "summary.txt").read_text()


@pytest.mark.parametrize("argv", [
    ["train", "--mode", "su_o_c", "--steps", "1"],
    ["train", "--mode", "su_o", "--compression-pct", "2", "--steps", "1"],
    ["train", "--mode", "su_o_c", "--compression-pct", "150", "--steps", "1"],
    ["train", "--config", "/nonexistent/exp.json"],
    ["sweep", "--modes", "base,warp", "--devices", "1"],
])
def test_config_errors_exit_two(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_config_keys_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mode": "su", "learning_rate": 3}))
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.load(bad)
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"optimizer": {"kind": "lion"}})


def test_sweep_writes_trends(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert main(["sweep", "--layout", "gpt2-4.0b", "--devices", "1,4,8",
                 "--ratios", "2,10", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "speedup.csv")
    by = {(r["mode"], int(r["devices"]), r["compression_pct"]): r for r in rows}
    assert len(rows) == 3 * 5
    # base saturates, near-storage keeps scaling
    assert float(by[("su_o", 8, "")]["update_speedup_vs_1"]) > 7
    assert float(by[("base", 8, "")]["update_speedup_vs_1"]) < 4.5
    for n in (4, 8):
        assert float(by[("su_o_c", n, "2.0")]["iteration_s"]) <= float(by[("su_o", n, "")]["iteration_s"])
    bd = list(csv.reader(open(tmp_path / "breakdown.csv")))
    assert len(bd) == 1 + len(rows)


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "suite oracle: PASS" in out and "suite ledger: PASS" in out
    assert "suite roundtrip: PASS" in out


def test_verify_detects_corruption(tmp_path, capsys):
    assert main(["verify", "--suites", "ledger", "--workdir", str(tmp_path),
                 "--inject-corruption"]) == 1
    out = capsys.readouterr().out
    assert "ledger.store_integrity" in out and "FAIL" in out


def test_bench_runs(capsys):
    assert main(["bench", "--size", "4096", "--repeat", "1"]) == 0
    assert "adam" in capsys.readouterr().out
