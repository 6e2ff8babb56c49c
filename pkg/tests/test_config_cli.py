import csv
import struct

import numpy as np
import pytest

from spfl.cli import EXIT_BAD_INPUT, EXIT_MISSING_DATA, EXIT_OK, EXIT_PARSE, EXIT_UNKNOWN_ATTACK, main
from spfl.config import (
    CANONICAL_ATTACKS, ConfigParseError, UnknownAttackError, canonical_file, load_config, parse_schedule,
)
from spfl.errors import FormatError
from spfl.runner import METRICS_FILE, read_metrics, write_metrics
from spfl.sim import RoundRecord


def test_canonical_files_resolve():
    assert canonical_file("DBA-4*SS") == "DBA-4SS.ini"
    assert canonical_file("DBA-4SS") == "DBA-4SS.ini"
    with pytest.raises(UnknownAttackError):
        canonical_file("DPA-7")


@pytest.mark.parametrize("name", CANONICAL_ATTACKS)
def test_every_canonical_attack_builds(name):
    cfg = load_config(overrides={"attack": {"canonical": name}, "run": {"rounds": 30}})
    plan = cfg.sim.attack
    method, rest = name.split("-")
    assert plan.method.value == method
    assert plan.trigger is not None
    if method in ("DPA", "LIE"):
        assert plan.every_round and len(plan.adversary_ids) == int(rest)
        assert plan.epochs is None
    if name == "MPA-SS":
        assert plan.schedule == (18,) and plan.gamma == 10 and len(plan.adversary_ids) == 1
        assert plan.epochs == 4
    if name == "MPA-MS":
        assert plan.schedule == (4, 9, 14, 19, 24, 29) and plan.gamma == 5
    if name == "DBA-4*SS":
        assert plan.schedule == (8, 10, 12, 14) and plan.staggered and plan.gamma == 10
    if name == "DBA-6*MS":
        assert plan.every_round and plan.gamma == 1 and len(plan.dba_parts) == 6


def test_single_shot_rescaled_to_run_length():
    cfg = load_config(overrides={"attack": {"canonical": "MPA-SS"}, "run": {"rounds": 15}})
    assert cfg.sim.attack.schedule == (9,)


def test_parse_schedule():
    assert parse_schedule("every", 5, None) == ((), True)
    assert parse_schedule("every 2", 5, None) == ((1, 3), False)
    assert parse_schedule("3, 4", 10, None) == ((3, 4), False)
    assert parse_schedule("29", 15, 30) == ((14,), False)


def test_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.sim.num_clients == 10 and cfg.sim.defense.value == "SPFL" and cfg.sim.attack is None
    assert cfg.trigger.target_label == 0 and cfg.arch == "mnist_cnn"
    p = tmp_path / "c.ini"
    p.write_text("[run]\nrounds = 4\n[defense]\nmethod = RLR\n[aggregator]\ntheta = 6\n"
                 "[trigger]\nrows = 101, 010\ntarget = 3\n")
    cfg = load_config(p, {"run": {"seed": 9}})
    assert (cfg.sim.rounds, cfg.sim.seed, cfg.sim.aggregator.theta) == (4, 9, 6)
    assert cfg.sim.aggregator.method.value == "RLR"
    assert cfg.trigger.to_rows() == ["101", "010"] and cfg.trigger.target_label == 3
    cifar = load_config(overrides={"dataset": {"name": "cifar10"}})
    assert cifar.trigger.target_label == 2 and cifar.arch == "cifar_resnet"


@pytest.mark.parametrize("text", [
    "[run]\nrounds = many\n",
    "not an ini file",
    "[dataset]\nname = svhn\n",
    "[attack]\nmethod = FLIP\n",
    "[distill]\ntau = 0\n",
])
def test_bad_config_is_parse_error(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises((ConfigParseError, ValueError)):
        load_config(p)


def test_metrics_roundtrip(tmp_path):
    recs = [RoundRecord(0, 0.5, 0.25, None, {2: 0.5}, {2: 0.25}), RoundRecord(1, 0.75, 0.125, None, {2: 0.75}, {2: 0.125})]
    path = tmp_path / METRICS_FILE
    write_metrics(recs, path)
    with path.open() as fh:
        header = next(csv.reader(fh))
    assert header[:4] == ["round", "ma", "asr", "ba"] and header[4:] == ["ma_2", "asr_2"]
    rows = read_metrics(path)
    assert rows[1]["ma"] == 0.75 and rows[1]["ba"] is None and rows[0]["asr_2"] == 0.25
    path.write_text("")
    with pytest.raises(FormatError):
        read_metrics(path)


# ---------------------------------------------------------------------------
# CLI


def test_unknown_attack_exits_4_without_output(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--attack", "XYZ", "--out", str(out), "--data-root", str(tmp_path)])
    assert code == EXIT_UNKNOWN_ATTACK
    assert not out.exists()
    assert capsys.readouterr().out == ""


def test_parse_error_exit(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[run]\nrounds = x\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_PARSE
    assert main(["run", "--bogus"]) == EXIT_PARSE


def test_missing_data_exit(tmp_path):
    code = main(["run", "--data-root", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), "--rounds", "1"])
    assert code == EXIT_MISSING_DATA
    assert not (tmp_path / "o").exists()


def _fake_mnist(root, n_train=400, n_test=100):
    rng = np.random.default_rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        labels = np.arange(n) % 10
        pixels = rng.integers(0, 60, (n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(labels):
            pixels[i, 2 + 2 * c:4 + 2 * c, 4:20] = 255  # class-dependent bar
        (root / f"{prefix}-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + pixels.tobytes())
        (root / f"{prefix}-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    _fake_mnist(base / "data" / "mnist")
    out = base / "run"
    code = main(["run", "--attack", "DPA-5", "--rounds", "2", "--clients-cap", "20", "--data-root",
                 str(base / "data"), "--out", str(out), "--defense", "SPFL"])
    assert code == EXIT_OK
    return base, out


def test_run_writes_artifacts(finished_run):
    _, out = finished_run
    rows = read_metrics(out / METRICS_FILE)
    assert len(rows) == 2
    assert all(0 <= r["ma"] <= 1 and 0 <= r["asr"] <= 1 and r["ba"] is None for r in rows)
    assert (out / "ma.png").exists() and (out / "asr.png").exists()
    assert (out / "checkpoints" / "global.bin").exists()
    assert (out / "checkpoints" / "client9_teacher.bin").exists()
    # adversaries keep no teacher
    assert not (out / "checkpoints" / "client0_teacher.bin").exists()
    import json

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["canonical"] == "DPA-5" and manifest["defense"] == "SPFL"


def test_rerun_same_seed_is_identical(finished_run, tmp_path):
    base, out = finished_run
    again = tmp_path / "again"
    code = main(["run", "--attack", "DPA-5", "--rounds", "2", "--clients-cap", "20", "--data-root",
                 str(base / "data"), "--out", str(again), "--defense", "SPFL"])
    assert code == EXIT_OK
    assert (again / METRICS_FILE).read_text() == (out / METRICS_FILE).read_text()


def test_plot_command(finished_run, tmp_path, capsys):
    _, out = finished_run
    assert main(["plot", str(out), str(out), "--out", str(tmp_path / "p"), "--labels", "a", "b"]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "p").iterdir()) == ["asr.png", "ma.png"]
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / METRICS_FILE).write_text("")
    assert main(["plot", str(empty), "--out", str(tmp_path / "q")]) == EXIT_BAD_INPUT
    assert not (tmp_path / "q").exists()


def test_attention_command(finished_run, tmp_path, capsys):
    base, out = finished_run
    code = main(["attention", str(out), "--samples", "20", "--out", str(tmp_path / "att"),
                 "--data-root", str(base / "data"), "--client", "9"])
    assert code == EXIT_OK
    assert "attention distance" in capsys.readouterr().out
    assert (tmp_path / "att" / "distance.txt").exists()
    assert len(list((tmp_path / "att").glob("clean_*.png"))) == 8
    assert main(["attention", str(tmp_path / "missing")]) == EXIT_BAD_INPUT
