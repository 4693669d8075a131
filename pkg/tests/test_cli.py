import csv
import json

import pytest

from pepinet.cli import main
from pepinet.config import build_config, load_config
from pepinet.errors import ConfigError
from pepinet.metrics import HEADER, MetricsLog, emit_metrics_csv, read_metrics_csv

SMALL = {
    "dataset": "synth", "synth_dim": 16, "synth_separation": 6.0, "conv_channels": [], "hidden": [8],
    "classes": 4, "epochs": 2, "test_every": 1, "train_per_client": 40, "test_per_client": 20,
    "train_batch": 20, "test_batch": 16,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_defaults_follow_table():
    cfg = build_config()
    assert (cfg.lr, cfg.decay, cfg.train_batch, cfg.test_batch, cfg.epochs, cfg.test_every) == \
           (0.05, 0.99, 500, 128, 20, 2)


def test_desk_preset_and_precedence():
    cfg = build_config({"epochs": 4}, preset="desk", seed=9)
    assert cfg.train_per_client == 2000 and cfg.test_per_client == 500
    assert cfg.epochs == 4 and cfg.seed == 9


def test_unknown_key_and_bad_values():
    with pytest.raises(ConfigError) as exc:
        build_config({"lr": -1, "bogus": 1})
    assert any("bogus" in p for p in exc.value.problems)
    with pytest.raises(ConfigError) as exc:
        build_config({"lr": -1, "decay": 2, "method": "nope"})
    assert len(exc.value.problems) == 3


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)


def test_baseline1_with_five_clients_exits_2(small_config, tmp_path, capsys):
    code = main(["train", "--config", str(small_config), "--method", "baseline1", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "baseline1" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"epochs": 0}))
    assert main(["validate", "--config", str(p)]) == 2


def test_validate_ok(small_config, capsys):
    assert main(["validate", "--config", str(small_config)]) == 0
    assert "[3, 4, 5, 3, 2]" in capsys.readouterr().out


def test_param_count_command(tmp_path, capsys):
    assert main(["param-count", "--preset", "desk", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "param_counts.json").read_text())
    assert report["baseline3"]["trainable"] > report["proposed"]["trainable"]
    assert report["proposed"]["by_scale"]["5"]["weight_ratio"] == 12.5


def test_compare_writes_all_methods(small_config, tmp_path):
    out = tmp_path / "run"
    assert main(["compare", "--config", str(small_config), "--out", str(out), "--seed", "4"]) == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert {r["method"] for r in rows} == {"baseline1", "baseline2", "baseline3", "proposed"}
    assert {r["client"] for r in rows if r["method"] == "baseline1"} == {"A"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["data_source"] == "synth"
    assert (out / "accuracy.svg").read_text().lstrip().startswith("<?xml")
    assert (out / "checkpoints" / "proposed-TS1.ckpt").exists()


def test_compare_is_byte_identical(small_config, tmp_path):
    for name in ("a", "b"):
        assert main(["compare", "--config", str(small_config), "--out", str(tmp_path / name), "--no-svg"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_svg_is_reproducible(small_config, tmp_path):
    for name in ("a", "b"):
        main(["train", "--config", str(small_config), "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "accuracy.svg").read_bytes() == (tmp_path / "b" / "accuracy.svg").read_bytes()


def test_gen_data_then_train_from_cache(small_config, tmp_path):
    assert main(["gen-data", "--config", str(small_config), "--out", str(tmp_path / "d")]) == 0
    cfg = dict(SMALL, data_cache=str(tmp_path / "d" / "clients.pepd"))
    p = tmp_path / "cached.json"
    p.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "t"), "--no-svg"]) == 0
    assert main(["train", "--config", str(small_config), "--out", str(tmp_path / "u"), "--no-svg"]) == 0
    assert (tmp_path / "t" / "metrics.csv").read_bytes() == (tmp_path / "u" / "metrics.csv").read_bytes()


def test_empty_log_is_header_only(tmp_path):
    emit_metrics_csv(MetricsLog(), tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(HEADER) + "\n"
    assert len(read_metrics_csv(tmp_path / "m.csv")) == 0


def test_csv_round_trip_and_order(tmp_path):
    log = MetricsLog()
    log.add("proposed", "TS1", 2, 2, "B", "accuracy", 0.5)
    log.add("proposed", "TS1", 1, 1, "A", "accuracy", 0.25)
    emit_metrics_csv(log, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[1] == "proposed,TS1,1,1,A,accuracy,0.250000"
    assert read_metrics_csv(tmp_path / "m.csv").final("proposed") == {"A": 0.25, "B": 0.5}


def test_metrics_reject_nan():
    with pytest.raises(ValueError):
        MetricsLog().add("proposed", "TS1", 1, 1, "A", "accuracy", float("nan"))
