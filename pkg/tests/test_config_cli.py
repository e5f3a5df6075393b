import json

import pytest

from ensemblefit.cli import run_command
from ensemblefit.config import OUT_ENV, ConfigError, RunConfig, parse_config, parse_override, to_dict

TINY = {
    "data": {"synthetic": {"n_normal": 30, "n_defect": 30}, "source_n_per_class": 30},
    "train": {"epochs": 4, "batch_size": 8, "pretrain_epochs": 2},
}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


# -- config --------------------------------------------------------------------------------


def test_empty_config_defaults(tmp_path):
    cfg = parse_config(write(tmp_path / "c.json", {}))
    assert cfg.seed == 42 and cfg.train.batch_size == 32 and cfg.train.lr == 0.003
    assert cfg.consistency.epsilon == 0.001 and cfg.consistency.window == 3
    assert cfg.ensemble.n == 3 and cfg.ensemble.threshold == 0.5 and cfg.ensemble.lam == 1.0


def test_partial_override_merges(tmp_path):
    cfg = parse_config(write(tmp_path / "c.json", {"train": {"epochs": 20}}))
    default = to_dict(RunConfig())
    got = to_dict(cfg)
    assert got["train"]["epochs"] == 20
    got["train"]["epochs"] = default["train"]["epochs"]
    assert got == default


def test_unknown_key_named(tmp_path):
    with pytest.raises(ConfigError, match="trian"):
        parse_config(write(tmp_path / "c.json", {"trian": {}}))


def test_type_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path / "c.json", {"train": {"epochs": "ten"}}))
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path / "c.json", {"seed": True}))


def test_lambda_key_and_overrides(tmp_path):
    cfg = parse_config(write(tmp_path / "c.json", {"ensemble": {"lambda": 0.5}}), ["train.epochs=3", "seed=7"])
    assert cfg.ensemble.lam == 0.5 and cfg.train.epochs == 3 and cfg.seed == 7
    assert to_dict(cfg)["ensemble"]["lambda"] == 0.5
    with pytest.raises(ConfigError):
        parse_override("no_equals_sign")


def test_env_overrides_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert parse_config(None).out_dir == str(tmp_path / "env")


def test_malformed_json_position(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"seed": 1,\n  "train": }')
    with pytest.raises(ConfigError, match="line 2"):
        parse_config(path)


# -- cli ---------------------------------------------------------------------------------------


def test_unknown_subcommand(capsys):
    assert run_command(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_config_errors_exit_2(tmp_path):
    assert run_command(["synth", "--config", str(write(tmp_path / "c.json", {"trian": {}})),
                        "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert run_command(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_synth_twice_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run_command(["synth", "--seed", "7", "--set", "data.synthetic.n_normal=6",
                            "--set", "data.synthetic.n_defect=4", "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "manifest.csv").read_bytes()
    assert a == (tmp_path / "b" / "manifest.csv").read_bytes()
    assert len(a.splitlines()) == 11


def test_stage_failure_exit_1(tmp_path, capsys):
    code = run_command(["eval", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "load model" in capsys.readouterr().err


def test_monitor_command(tmp_path):
    hist = tmp_path / "history.csv"
    hist.write_text("epoch,train_loss,val_loss,train_acc,val_acc\n"
                    "0,0.6,0.5,0.5,0.5\n1,0.4,0.3,0.8,0.8\n2,0.3,0.2995,0.9,0.9\n3,0.3,0.2994,0.9,0.9\n")
    out = tmp_path / "o"
    assert run_command(["monitor", str(hist), "--set", "consistency.window=2", "--out", str(out)]) == 0
    doc = json.loads((out / "consistency.json").read_text())
    assert doc["consistency"]["first_stable_epoch"] == 1


@pytest.mark.slow
def test_exp3_contract_and_pipeline(tmp_path):
    cfg = write(tmp_path / "c.json", TINY)
    out = tmp_path / "run"
    assert run_command(["exp3", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert {"consistency", "precision", "recall", "f1", "mode", "selected"} <= set(report)
    assert json.loads((out / "ensemble.json").read_text())["mode"] == "min_loss"
    for name in ("small", "medium", "wide"):
        assert (out / "members" / name / "history.csv").exists()
        assert (out / "pretrained" / f"{name}.json").exists()
    assert (out / "history.csv").exists() and (out / "confidence.csv").exists()

    # the stage commands compose on the same artifacts
    ft = tmp_path / "ft"
    assert run_command(["finetune", "--config", str(cfg), "--pretrained", str(out), "--out", str(ft)]) == 0
    models = [str(ft / "models" / f"{n}.json") for n in ("small", "medium", "wide")]
    en = tmp_path / "ens"
    assert run_command(["ensemble", "--config", str(cfg), "--models", *models, "--out", str(en)]) == 0
    ev = tmp_path / "ev"
    assert run_command(["eval", "--config", str(cfg), "--model", str(en), "--out", str(ev)]) == 0
    assert "accuracy" in json.loads((ev / "report.json").read_text())
    rep = tmp_path / "rep"
    assert run_command(["report", "--config", str(cfg), "--model", models[0], "--out", str(rep)]) == 0
    assert (rep / "heatmap.pgm").exists()
