import numpy as np
import pytest

from dpfedsim import csvio
from dpfedsim.cli import main, read_tables, write_tables
from dpfedsim.config import DEFAULTS, ConfigError, ExperimentConfig, parse_config_text
from dpfedsim.rdp import LossTables


# config parsing ---------------------------------------------------------

def test_defaults_complete():
    cfg = ExperimentConfig.from_dict({})
    assert cfg["federation.nodes"] == 100
    assert cfg["attack.mode"] == "none"
    resolved = cfg.resolved()
    assert set(resolved) == set(DEFAULTS)
    assert resolved["attack.gamma0"] == cfg["privacy.epsilon"]


def test_parse_text_roundtrip():
    text = """
    # comment
    federation.nodes = 20
    federation.participants = 8
    privacy.epsilon = 1.5    # inline comment
    attack.mode = mpelm
    attack.m = 2
    """
    values = parse_config_text(text)
    cfg = ExperimentConfig.from_dict(values)
    assert cfg["federation.nodes"] == 20
    assert cfg["federation.participants"] == 8
    assert cfg["privacy.epsilon"] == 1.5
    assert cfg["attack.m"] == 2


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"federation.bogus": 1})


def test_cross_field_validation_names_path():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"federation.participants": 200})
    assert err.value.field_path == "federation.participants"

    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"attack.m": 5})  # mode none
    assert err.value.field_path == "attack.m"


def test_bad_literal_rejected():
    with pytest.raises(ConfigError, match="cannot parse"):
        ExperimentConfig.from_dict({"federation.nodes": "many"})


def test_gamma0_defaults_to_epsilon():
    cfg = ExperimentConfig.from_dict(
        {"privacy.epsilon": 1.3, "attack.mode": "mpelm", "attack.m": 1}
    )
    assert cfg.attack_config().gamma0 == 1.3
    cfg = ExperimentConfig.from_dict(
        {"privacy.epsilon": 1.3, "attack.gamma0": 0.4, "attack.mode": "mpelm", "attack.m": 1}
    )
    assert cfg.attack_config().gamma0 == 0.4


def test_typed_views():
    cfg = ExperimentConfig.from_dict({"model.hidden": "4,2", "optimizer.kind": "adamax"})
    assert cfg.architecture().hidden == (4, 2)
    assert cfg.optimizer_config().kind == "adamax"
    assert cfg.federation_config().k == 100
    assert cfg.detector_config().kind == "off"


def test_config_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("seed = 11\nfederation.episodes = 2\n")
    cfg = ExperimentConfig.from_file(path)
    assert cfg["seed"] == 11 and cfg["federation.episodes"] == 2


# schema-versioned csv ----------------------------------------------------

def test_csv_roundtrip(tmp_path):
    path = tmp_path / "t.csv"
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": float("nan")}]
    csvio.write_csv(path, "episodes", 1, ["a", "b"], rows)
    back = csvio.read_csv(path, "episodes", 1)
    assert back[0]["a"] == "1" and float(back[0]["b"]) == 0.1
    assert back[1]["b"] == "nan"


def test_csv_schema_mismatch(tmp_path):
    path = tmp_path / "t.csv"
    csvio.write_csv(path, "episodes", 1, ["a"], [{"a": 1}])
    with pytest.raises(csvio.SchemaError):
        csvio.read_csv(path, "episodes", 2)
    with pytest.raises(csvio.SchemaError):
        csvio.read_csv(path, "ledger", 1)
    assert csvio.read_schema_line(path) == ("episodes", 1)


def test_csv_floats_full_precision(tmp_path):
    value = 0.1234567890123456789
    path = tmp_path / "t.csv"
    csvio.write_csv(path, "x", 1, ["v"], [{"v": value}])
    assert float(csvio.read_csv(path, "x", 1)[0]["v"]) == value


# loss-table persistence ---------------------------------------------------

def test_tables_roundtrip(tmp_path):
    tables = LossTables(
        epsilon_grid=(0.5, 1.0),
        m_l=np.array([4.0, 2.0]),
        f_l=np.array([3.0, 1.0]),
        cells=[
            {"epsilon": 0.5, "gamma": 1.0, "seed": 0, "m_l": 4.0, "f_l": 3.0},
            {"epsilon": 1.0, "gamma": 1.0, "seed": 0, "m_l": 2.0, "f_l": 1.0},
        ],
    )
    path = write_tables(tmp_path / "lt.csv", tables)
    back = read_tables(path)
    assert back.epsilon_grid == (0.5, 1.0)
    assert np.allclose(back.m_l, tables.m_l)
    assert np.allclose(back.f_l, tables.f_l)


# cli ------------------------------------------------------------------------

def _cfg_file(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(
        "data.n_samples = 200\n"
        "federation.nodes = 10\n"
        "federation.participants = 4\n"
        "federation.episodes = 1\n"
        "privacy.stop_threshold = 0.5\n" + extra
    )
    return path


def test_cli_train_single_episode_csv(tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--config", str(_cfg_file(tmp_path)), "--out", str(out)])
    assert code == 0
    rows = csvio.read_csv(out / "episodes.csv", "episodes", 1)
    assert len(rows) == 1


def test_cli_same_seed_byte_identical(tmp_path):
    cfg = _cfg_file(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(a)]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(b)]) == 0
    for name in ("episodes.csv", "ledger.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_cli_usage_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("federation.participants = 5000\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1


def test_cli_unknown_preset_rejected():
    assert main(["train", "--preset", "nope", "--out", "/tmp/x"]) == 1


def test_cli_attack_forces_mode(tmp_path):
    out = tmp_path / "atk"
    cfg = _cfg_file(tmp_path, "attack.m = 2\nattack.mode = rmd\n")
    assert main(["attack", "--config", str(cfg), "--out", str(out)]) == 0
    rows = csvio.read_csv(out / "summary.csv", "summary", 1)
    assert rows[0]["attack_mode"] == "rmd"


def test_cli_detector_flag(tmp_path):
    out = tmp_path / "det"
    cfg = _cfg_file(
        tmp_path,
        "model.hidden = 8,4\nprivacy.epsilon = 60\nprivacy.clip = 0.05\n",
    )
    assert main(["train", "--config", str(cfg), "--detector", "norm", "--out", str(out)]) == 0
    assert (out / "detection.csv").exists()


def test_cli_report(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    a, b = tmp_path / "runs" / "a", tmp_path / "runs" / "b"
    main(["train", "--config", str(cfg), "--seed", "1", "--out", str(a)])
    main(["train", "--config", str(cfg), "--seed", "2", "--out", str(b)])
    code = main(["report", str(tmp_path / "runs"), "--out", str(tmp_path / "report.csv")])
    assert code == 0
    text = capsys.readouterr().out
    assert "final_val_loss" in text and "a" in text and "b" in text
    assert (tmp_path / "report.csv").exists()


def test_cli_report_refuses_schema_mismatch(tmp_path):
    run = tmp_path / "r"
    run.mkdir()
    (run / "summary.csv").write_text("# schema: summary v99\nstatus\nok\n")
    assert main(["report", str(run)]) == 2


def test_cli_report_empty(tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    assert main(["report", str(empty)]) == 0
    assert "(no runs)" in capsys.readouterr().out


def test_cli_ingest(tmp_path, capsys):
    from dpfedsim.data import EXPECTED_HEADER

    src = tmp_path / "p.csv"
    rows = ["16/12/2006;17:24:00;" + ";".join(str(v) for v in (1 + i, 0.4, 230 + i, 18, 0, 1, 17))
            for i in range(4)]
    src.write_text(";".join(EXPECTED_HEADER) + "\n" + "\n".join(rows) + "\n")
    assert main(["ingest", str(src), "--out", str(tmp_path / "cache")]) == 0
    assert list((tmp_path / "cache").glob("*.npz"))


def test_cli_rdp_pipeline(tmp_path):
    cfg = tmp_path / "rdp.cfg"
    cfg.write_text(
        "data.n_samples = 120\n"
        "federation.nodes = 4\n"
        "federation.participants = 2\n"
        "federation.episodes = 2\n"
        "model.hidden = 4,2\n"
        "privacy.clip = 0.05\n"
        "privacy.stop_threshold = 0.5\n"
        "optimizer.kind = adamax\n"
        "attack.mode = mpelm\n"
        "attack.m = 1\n"
    )
    tables_dir = tmp_path / "tables"
    assert main([
        "rdp-tables", "--config", str(cfg), "--out", str(tables_dir),
        "--gammas", "0.5", "--table-seeds", "0",
    ]) == 0
    out = tmp_path / "agent"
    assert main([
        "rdp-train", "--tables", str(tables_dir / "loss_tables.csv"),
        "--out", str(out), "--episodes", "200", "--alpha", "0.1",
    ]) == 0
    trace = csvio.read_csv(out / "rdp_trace.csv", "rdp_trace", 1)
    assert len(trace) == 200
    qtable = csvio.read_csv(out / "qtable.csv", "qtable", 1)
    assert len(qtable) == 20 * 5  # grid x actions
