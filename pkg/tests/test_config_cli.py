import json

import pytest

from rollbacksim.cli import main, parse_levels, parse_recovery
from rollbacksim.config import (SimConfig, format_config, parse_config,
                                validate)
from rollbacksim.errors import ConfigError

FULL = """[GENERAL]
Kernel= Stencil
WorkerCount = 128
CheckpointLevel = 2
Checkpoint = Y
Recovery = Default
Fail = Y
MTBF = 1800
Seed = 1
Scheduler= Horizontal
[Stencil]
BackupCost = 0.0013
ProcessCost = 7.1
StencilSize =128
Timesteps = 128
"""


def test_full_block_parses():
    c = parse_config(FULL)
    assert (c.worker_count, c.checkpoint_level, c.mtbf) == (128, 2, 1800.0)
    assert c.checkpoint and c.fail and c.recovery == "Default"
    assert c.effective_fetch_cost == 0.0013 and c.log_cost == 0.0


def test_dependency_strategy_selected():
    c = parse_config(FULL.replace("Recovery = Default",
                                   "Recovery = Dependency"))
    assert c.recovery == "Dependency"


def test_bad_enum_names_key_and_line():
    with pytest.raises(ConfigError) as info:
        parse_config(FULL.replace("Checkpoint = Y", "Checkpoint = M"))
    assert info.value.key == "Checkpoint" and info.value.line == 5


@pytest.mark.parametrize("text,key", [
    (FULL.replace("MTBF = 1800\n", ""), "MTBF"),
    (FULL.replace("Seed = 1", "seed = 1"), "seed"),
    (FULL.replace("ProcessCost = 7.1", "ProcessCost = fast"), "ProcessCost"),
    (FULL + "Colour = blue\n", "Colour"),
])
def test_key_errors(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


def test_optional_keys():
    c = parse_config(FULL + "LogCost = 0.001\nFetchCost = 0\n")
    assert c.log_cost == 0.001 and c.effective_fetch_cost == 0.0


def test_validate():
    validate(SimConfig(worker_count=2, checkpoint_level=6, stencil_size=128,
                       timesteps=128))
    with pytest.raises(ConfigError, match="100 mod 16"):
        validate(SimConfig(worker_count=2, checkpoint_level=4,
                           stencil_size=100, timesteps=128))
    with pytest.raises(ConfigError, match="WorkerCount"):
        validate(SimConfig(worker_count=1))
    with pytest.raises(ConfigError, match="BackupCost"):
        validate(SimConfig(worker_count=2, backup_cost=-1))
    with pytest.raises(ConfigError, match="MTBF"):
        validate(SimConfig(worker_count=2, fail=True, mtbf=0))
    # a single worker is fine without checkpoints or failures
    validate(SimConfig(worker_count=1, checkpoint=False, fail=False))


def test_roundtrip():
    c = parse_config(FULL + "LogCost = 0.5\n")
    assert parse_config(format_config(c)) == c


def test_override_precedence():
    c = parse_config(FULL, {"Seed": "9", "Recovery": "Dependency"})
    assert c.seed == 9 and c.recovery == "Dependency"
    with pytest.raises(ConfigError):
        parse_config(FULL, {"Bogus": "1"})


def test_level_and_recovery_lists():
    assert parse_levels("1..6") == [1, 2, 3, 4, 5, 6]
    assert parse_levels("2,4") == [2, 4]
    assert parse_recovery("default,dependency") == ["Default", "Dependency"]
    with pytest.raises(ConfigError):
        parse_recovery("fast")


SMALL = FULL.replace("WorkerCount = 128", "WorkerCount = 4") \
    .replace("StencilSize =128", "StencilSize = 16") \
    .replace("Timesteps = 128", "Timesteps = 16") \
    .replace("MTBF = 1800", "MTBF = 30").replace("ProcessCost = 7.1",
                                                 "ProcessCost = 1.0")


def test_cli_run(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--set", "Seed=4",
               "--out", str(out), "--trace"])
    assert rc == 0
    data = json.loads((out / "summary.json").read_text())
    assert data["config"]["Seed"] == 4
    assert data["extra"]["triangles"] == 64
    assert (out / "trace.csv").read_text().startswith("time,seq,worker")


def test_cli_run_full_config_triangles(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(FULL)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--set", "StencilSize=256",
               "--set", "Timesteps=256", "--set", "Fail=N", "--out",
               str(out)])
    assert rc == 0
    assert json.loads((out / "summary.json").read_text())["extra"][
        "triangles"] == 16384


def test_cli_config_error_exit_1(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL.replace("Fail = Y", "Fail = maybe"))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "Fail" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.ini"),
                 "--out", str(tmp_path)]) == 1


def test_cli_integrity_error_exit_2(tmp_path, monkeypatch):
    from rollbacksim import cli
    from rollbacksim.errors import IntegrityError

    def broken(*a, **k):
        raise IntegrityError("boom")

    monkeypatch.setattr(cli, "_run_one", broken)
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_cli_sweep(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL)
    out = tmp_path / "sw"
    rc = main(["sweep", "--config", str(cfg), "--levels", "1..3",
               "--recovery", "default,dependency", "--seeds", "1,2",
               "--out", str(out)])
    assert rc == 0
    assert len(list(out.glob("summary-*.json"))) == 12
    series = (out / "series-default.csv").read_text().splitlines()
    assert len(series) == 1 + 6
    assert len(json.loads((out / "comparison.json").read_text())) == 6


def test_cli_verify(capsys):
    assert main(["verify", "--max-grid", "8"]) == 0
    assert "all oracle checks passed" in capsys.readouterr().out
