import csv
import json
from pathlib import Path

import pytest

from attnda.ablation import GRIDS, parse_grid, replicate_seed
from attnda.cli import main
from attnda.config import digits_preset, load_config, to_dict

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = [
    "schedule.max_steps=6", "schedule.eval_interval=3", "schedule.checkpoint_interval=3",
    "data.synthetic.per_class=6", "data.synthetic.test_per_class=3", "data.synthetic.size=16",
    "model.image_size=16", "model.widths=[4, 8]", "batch_size=4",
]


def _sets(items):
    return [x for item in items for x in ("--set", item)]


def _train(tmp_path, *extra, name="run"):
    out = tmp_path / name
    code = main(["train", "--config", str(CONFIGS / "smoke.toml"), *_sets(TINY), *extra, "--output-dir", str(out)])
    return code, out


def test_train_writes_run_directory(tmp_path, capsys):
    code, out = _train(tmp_path)
    assert code == 0
    assert "final iteration=6" in capsys.readouterr().out
    for name in ("config.toml", "checkpoint_best.pt", "checkpoint_last.pt", "train_log.csv", "metrics.csv"):
        assert (out / name).exists()
    resolved = load_config(out / "config.toml")
    assert resolved.schedule.max_steps == 6 and resolved.model.widths == (4, 8)


def test_set_override_disables_consistency(tmp_path):
    code, out = _train(tmp_path, "--set", "regularizers.mu=0")
    assert code == 0
    assert load_config(out / "config.toml").regularizers.mu == 0
    rows = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert all(r["l_ac"] == 0.0 for r in rows)


def test_output_root_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTNDA_OUTPUT_ROOT", str(tmp_path / "root"))
    code = main(["train", "--config", str(CONFIGS / "smoke.toml"), *_sets(TINY), "--output-dir", "rel"])
    assert code == 0
    assert (tmp_path / "root" / "rel" / "checkpoint_last.pt").exists()


def test_invalid_config_lists_every_problem(tmp_path, capsys):
    code = main(["train", "--config", str(CONFIGS / "smoke.toml"), "--set", "batch_size=0",
                 "--set", "model.class_count=5", "--output-dir", str(tmp_path / "x")])
    assert code == 1
    err = capsys.readouterr().err
    assert "batch_size" in err and "class_count" in err
    assert not (tmp_path / "x").exists()


def test_missing_dataset_fails_before_training(tmp_path, capsys):
    code = main(["train", "--config", str(CONFIGS / "digits_u2m.toml"), "--output-dir", str(tmp_path / "d")])
    assert code == 1
    assert "does not exist" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_digit_configs_match_preset(tmp_path):
    for task in ("u2m", "m2u", "s2m"):
        paths = [f"data.{k}={json.dumps(str(tmp_path))}" for k in
                 ("source_train", "source_test", "target_train", "target_test")]
        cfg = load_config(CONFIGS / f"digits_{task}.toml", paths)
        preset = digits_preset(task)
        for section in ("model", "regularizers", "transform"):
            assert to_dict(getattr(cfg, section)) == to_dict(getattr(preset, section)), (task, section)
        assert (cfg.schedule.lr0, cfg.schedule.epochs, cfg.batch_size) == (
            preset.schedule.lr0, preset.schedule.epochs, preset.batch_size)
        assert (cfg.regularizers.tau, cfg.regularizers.mu, cfg.regularizers.lam) == (0.95, 0.3, 0.005)


def test_eval_is_repeatable_and_sweeps_tau(tmp_path, capsys):
    _, out = _train(tmp_path)
    ck = str(out / "checkpoint_last.pt")
    for name in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ck, "--tau", "0.5,0.7,0.9", "--out", str(tmp_path / name)]) == 0
    for name in ("metrics.csv", "tau_sweep.csv"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    with open(tmp_path / "e1" / "tau_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    rates = [float(r["mask_rate"]) for r in rows]
    assert [float(r["tau"]) for r in rows] == [0.5, 0.7, 0.9]
    assert rates == sorted(rates, reverse=True)
    assert main(["eval", "--checkpoint", ck, "--split", "source_test", "--out", str(tmp_path / "s")]) == 0
    assert "source" in (tmp_path / "s" / "metrics.csv").read_text()


def test_eval_rejects_mismatched_model(tmp_path, capsys):
    _, out = _train(tmp_path)
    code = main(["eval", "--checkpoint", str(out / "checkpoint_last.pt"), "--config", str(CONFIGS / "smoke.toml"),
                 *_sets(TINY), "--set", "model.class_count=4", "--set", "data.synthetic.classes=4"])
    assert code == 1
    assert "K=3" in capsys.readouterr().err


def test_ablate_value_sweep_and_report(tmp_path, capsys):
    out = tmp_path / "grid"
    code = main(["ablate", "--config", str(CONFIGS / "smoke.toml"), *_sets(TINY), "--grid", "mu=0,0.1",
                 "--replicates", "2", "--output-dir", str(out)])
    assert code == 0
    cells = [json.loads(x) for x in (out / "cells.jsonl").read_text().splitlines()]
    assert [(c["row"], c["replicate"]) for c in cells] == [("mu=0", 0), ("mu=0", 1), ("mu=0.1", 0), ("mu=0.1", 1)]
    # replicates are paired across rows
    assert cells[0]["seed"] == cells[2]["seed"] != cells[1]["seed"]
    summary = (out / "summary.txt").read_text()
    assert summary.index("mu=0 ") < summary.index("mu=0.1")
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "mu=0.1" in capsys.readouterr().out


def test_ablate_records_failed_cell_and_continues(tmp_path, capsys):
    out = tmp_path / "grid"
    code = main(["ablate", "--config", str(CONFIGS / "smoke.toml"), *_sets(TINY), "--grid", "tau=2.0,0.9",
                 "--replicates", "1", "--output-dir", str(out)])
    assert code == 2
    cells = [json.loads(x) for x in (out / "cells.jsonl").read_text().splitlines()]
    assert cells[0]["error"] and cells[1]["error"] is None
    assert "1 failed" in (out / "summary.txt").read_text()


def test_report_on_training_run_with_plots(tmp_path, capsys):
    _, out = _train(tmp_path)
    assert main(["report", str(out), "--plots"]) == 0
    assert (out / "accuracy.png").exists() and (out / "loss_curves.png").exists()
    assert main(["report", str(tmp_path / "nothing")]) == 1


def test_grid_parsing():
    assert parse_grid("components")[1] is GRIDS["components"]
    assert [label for label, _ in GRIDS["components"]] == ["L_cls", "+L_adv", "+L_p", "+L_ac", "+L_ac+L_as"]
    name, rows = parse_grid("lam=0.001,0.2")
    assert name == "sweep-lam" and rows[1] == ("lam=0.2", {"regularizers.lam": 0.2})
    assert parse_grid("transform.kind=flip")[1][0][1] == {"transform.kind": "flip"}
    with pytest.raises(ValueError):
        parse_grid("nonsense")
    assert replicate_seed(0, 1) == replicate_seed(0, 1) != replicate_seed(0, 2)


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for command in ("train", "eval", "ablate", "report"):
        assert command in text
