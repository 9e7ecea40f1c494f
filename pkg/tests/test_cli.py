import csv
import json
from pathlib import Path

import pytest

from advbn.cli import main, make_run_dir
from advbn.config import json_schema
from advbn.train import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    path = Path(out.strip().splitlines()[-1]) if code == 0 else None
    return code, path, err


def metrics(path):
    return json.loads((path / "metrics.json").read_text())


@pytest.fixture
def pretrained(tmp_path, tiny_config, capsys):
    code, path, err = run(capsys, "pretrain", "--config", tiny_config, "--out", tmp_path / "runs")
    assert code == 0, err
    return path / "model.abn"


def test_print_schema(capsys):
    assert main(["--print-schema"]) == 0
    assert json.loads(capsys.readouterr().out) == json_schema()


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2


def test_unknown_flag_is_usage_error(capsys):
    assert main(["pretrain", "--bogus"]) == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"pixels": 3}}))
    code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path)
    assert code == 2 and "pixels" in err
    assert not any(tmp_path.glob("*-gen-data"))


def test_unknown_section_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"server": {}}))
    assert run(capsys, "gen-data", "--config", cfg, "--out", tmp_path)[0] == 2


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert run(capsys, "gen-data", "--config", tmp_path / "nope.json")[0] == 2


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    for cmd in ("finetune", "eval", "attack-eval", "divergence", "visualize"):
        code, _, err = run(capsys, cmd, "--checkpoint", tmp_path / "missing.abn", "--out", tmp_path)
        assert code == 2, cmd
        assert "not found" in err
    code, _, err = run(capsys, "eval", "--out", tmp_path)
    assert code == 2 and "checkpoint" in err


def test_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.abn"
    bad.write_bytes(b"ABN1" + bytes(20))
    assert run(capsys, "eval", "--checkpoint", bad, "--out", tmp_path)[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_failure_exits_1(tmp_path, tiny_config, capsys):
    code, _, err = run(capsys, "pretrain", "--config", tiny_config, "--lr", "1e12", "--epochs", 5, "--out", tmp_path)
    assert code == 1 and "error" in err


def test_gen_data_outputs(tmp_path, tiny_config, capsys):
    code, path, _ = run(capsys, "gen-data", "--config", tiny_config, "--out", tmp_path)
    assert code == 0 and path.parent == tmp_path
    m = metrics(path)
    assert m["command"] == "gen-data" and m["n_train"] == 32 and m["train_class_counts"] == [8, 8, 8, 8]
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["n_classes"] == 4
    assert (path / "data.npz").is_file()


def test_run_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ABN_RUN_DIR", str(tmp_path / "env"))
    a = make_run_dir(None, "bench")
    b = make_run_dir(None, "bench")
    assert a.parent == tmp_path / "env" and a != b
    assert a.name.endswith("-bench")
    assert make_run_dir(str(tmp_path / "flag"), "eval").parent == tmp_path / "flag"


def test_flags_override_config(tmp_path, tiny_config, capsys):
    code, path, _ = run(capsys, "gen-data", "--config", tiny_config, "--seed", 7, "--set", "data.n_test=8",
                        "--out", tmp_path)
    assert code == 0
    cfg = json.loads((path / "config.json").read_text())
    assert cfg["data"]["seed"] == 7 and cfg["finetune"]["seed"] == 7 and cfg["model"]["seed"] == 7
    assert cfg["data"]["n_test"] == 8 and cfg["data"]["n_train"] == 32


def test_bad_set_expression(tmp_path, capsys):
    assert run(capsys, "gen-data", "--set", "data.seed", "--out", tmp_path)[0] == 2
    assert run(capsys, "gen-data", "--set", "data.nothing=1", "--out", tmp_path)[0] == 2


def test_finetune_and_downstream_commands(tmp_path, tiny_config, pretrained, capsys):
    out = tmp_path / "runs"
    code, ft, err = run(capsys, "finetune", "--config", tiny_config, "--checkpoint", pretrained,
                        "--split", "stage3_end", "--epsilon", 0.6, "--steps", 2, "--out", out)
    assert code == 0, err
    cfg = json.loads((ft / "config.json").read_text())
    assert cfg["finetune"]["split"] == "stage3_end" and cfg["finetune"]["attack"]["epsilon"] == 0.6
    assert cfg["finetune"]["checkpoint"] == str(pretrained.resolve())
    m = metrics(ft)
    assert set(m["main"]) >= {"clean_accuracy", "mean_shifted_accuracy"} and "aux" in m
    with open(ft / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == m["steps"] == 4
    assert load_checkpoint(ft / "model.abn").model.split_name == "stage3_end"
    model = ft / "model.abn"

    code, ev, _ = run(capsys, "eval", "--config", tiny_config, "--checkpoint", model,
                      "--baseline", pretrained, "--out", out)
    assert code == 0
    m = metrics(ev)
    assert m["branch"] == "main" and set(m["ce_per_family"]) == {"noise"} and m["mce"] > 0
    assert len((ev / "shifted.csv").read_text().splitlines()) == 1 + 4

    code, aux, _ = run(capsys, "eval", "--config", tiny_config, "--checkpoint", model, "--branch", "aux",
                       "--out", out)
    assert code == 0 and metrics(aux)["branch"] == "aux"

    code, self_ev, _ = run(capsys, "eval", "--config", tiny_config, "--checkpoint", pretrained,
                           "--baseline", pretrained, "--out", out)
    assert metrics(self_ev)["mce"] == 100.0

    code, ae, _ = run(capsys, "attack-eval", "--config", tiny_config, "--checkpoint", model, "--out", out)
    assert code == 0
    m = metrics(ae)
    assert m["split"] == "stage3_end" and m["batches"] == 1 and 0 <= m["fraction_adv_ge_clean"] <= 1

    code, dv, _ = run(capsys, "divergence", "--config", tiny_config, "--checkpoint", model,
                      "--pair", "clean:hue_rotate", "--severity", 2, "--out", out)
    assert code == 0
    m = metrics(dv)
    assert m["dataset_b"] == "hue_rotate-2" or m["dataset_b"].startswith("hue_rotate")
    assert m["layers"] and all(n.startswith("stage4") for n in m["layers"])
    assert (dv / "divergence.txt").is_file() and (dv / "divergence.csv").is_file()

    code, vz, _ = run(capsys, "visualize", "--config", tiny_config, "--checkpoint", model, "--out", out)
    assert code == 0
    m = metrics(vz)
    assert m["steps"] == [0, 3, 6, 8]
    assert m["mean_distance_from_eps0"][0] == 0.0
    assert len(list((vz / "images").glob("render_0*_eps*.ppm"))) == 16

    code, bn, _ = run(capsys, "bench", "--config", tiny_config, "--checkpoint", model, "--iters", 2,
                      "--out", out)
    assert code == 0 and metrics(bn)["n_iters"] == 2


def test_divergence_unknown_layer_exits_2(tmp_path, tiny_config, pretrained, capsys):
    code, _, err = run(capsys, "divergence", "--config", tiny_config, "--checkpoint", pretrained,
                       "--set", 'analysis.layers=["nope"]', "--out", tmp_path)
    assert code == 2 and "nope" in err


def test_epsilon_sweep_uses_repeats_rule(tmp_path, tiny_config, pretrained, capsys):
    code, path, _ = run(capsys, "finetune", "--config", tiny_config, "--checkpoint", pretrained,
                        "--epsilon-sweep", "0.1,0.5,1.1",
                        "--out", tmp_path)
    assert code == 0
    sweep = metrics(path)["epsilon_sweep"]
    assert {k: v["steps"] for k, v in sweep.items()} == {"0.1": 1, "0.5": 3, "1.1": 6}
    assert sorted(p.name for p in path.glob("model_eps*.abn")) == ["model_eps0.1.abn", "model_eps0.5.abn",
                                                                   "model_eps1.1.abn"]
    assert run(capsys, "finetune", "--checkpoint", pretrained, "--epsilon-sweep", "0.5,x", "--out", tmp_path)[0] == 2


def test_rerun_from_resolved_config_is_bit_identical(tmp_path, tiny_config, pretrained, capsys):
    out = tmp_path / "runs"
    _, first, _ = run(capsys, "finetune", "--config", tiny_config, "--checkpoint", pretrained, "--out", out)
    _, second, _ = run(capsys, "finetune", "--config", first / "config.json", "--out", out)
    assert first != second
    for name in ("config.json", "metrics.json", "model.abn", "history.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
