import csv
import json
import os

import numpy as np
import pytest

from dynlora.baselines import apply_strategy
from dynlora.cli import TRAIN_ARTIFACTS, main
from dynlora.config import load_config, parse_config
from dynlora.errors import ConfigError
from dynlora.network import init_model, load_checkpoint, save_checkpoint
from dynlora.rank_adapt import RankSchedule
from dynlora.trainer import TrainConfig, parameter_counts, trainable_set

BASE = {
    "data": {"kind": "mixture", "n": 150, "d": 4, "n_classes": 3, "difficulty": 0.3},
    "model": {"hidden": [6, 6]},
    "train": {"epochs": 3, "rank": 2},
}


def write_cfg(tmp_path, name="cfg.json", **extra):
    doc = json.loads(json.dumps(BASE))
    doc.update(extra)
    doc.setdefault("output", str(tmp_path / "out"))
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh, strict=True))


def test_missing_config_exit_2(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_reports_path(tmp_path, capsys):
    p = write_cfg(tmp_path, train={"epochs": 2, "learnig_rate": 0.1})
    assert main(["train", "--config", str(p)]) == 2
    assert "train.learnig_rate" in capsys.readouterr().err


@pytest.mark.parametrize("doc,path", [
    ({"strategy": "prompt"}, "strategy"),
    ({"train": {"epochs": "3"}}, "train.epochs"),
    ({"data": {"kind": "parquet"}}, "data.kind"),
    ({"sweep": {"grid": {"rank": [1]}}}, "sweep.grid.rank"),
    ({"schedule": {"r_base": 0}}, "schedule"),
    ({"strategies": ["full", "nope"]}, "strategies[1]"),
])
def test_config_errors_name_field(doc, path):
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    assert info.value.path == path


def test_effective_config_round_trip():
    cfg = parse_config({"train": {"epochs": 7}})
    again = parse_config(cfg.to_dict())
    assert again == cfg and again.train["learning_rate"] == 0.05


def test_train_writes_exactly_four_artifacts(tmp_path, capsys):
    p = write_cfg(tmp_path)
    before = p.read_bytes()
    assert main(["train", "--config", str(p)]) == 0
    out = tmp_path / "out"
    assert sorted(os.listdir(out)) == sorted(TRAIN_ARTIFACTS)
    assert p.read_bytes() == before
    curve = read_csv(out / "loss_curve.csv")
    assert curve[0] == ["epoch", "loss_total", "loss_task", "train_acc", "val_acc"] and len(curve) == 4
    trace = read_csv(out / "alpha_trace.csv")
    assert trace[0] == ["epoch", "layer", "gamma", "alpha", "rank"] and len(trace) == 1 + 3 * 2
    assert "accuracy" in capsys.readouterr().out


def test_rerun_from_effective_config_reproduces(tmp_path):
    p = write_cfg(tmp_path)
    assert main(["train", "--config", str(p)]) == 0
    first = json.loads((tmp_path / "out" / "run_record.json").read_text())
    eff = tmp_path / "effective.json"
    doc = first["config"]
    doc["output"] = str(tmp_path / "again")
    eff.write_text(json.dumps(doc))
    assert main(["train", "--config", str(eff)]) == 0
    second = json.loads((tmp_path / "again" / "run_record.json").read_text())
    assert first["loss_total"] == second["loss_total"] and first["loss_task"] == second["loss_task"]
    assert first["change_log"] == second["change_log"]


def test_seed_override(tmp_path):
    p = write_cfg(tmp_path)
    assert main(["train", "--config", str(p), "--seed", "5", "--out", str(tmp_path / "s5")]) == 0
    rec = json.loads((tmp_path / "s5" / "run_record.json").read_text())
    assert rec["seed"] == 5 and rec["config"]["seed"] == 5


def test_runtime_failure_exit_1(tmp_path, capsys):
    csv_path = tmp_path / "bad.csv"
    csv_path.write_text("f0,f1,label\n1,2,0\n3,x,1\n")
    p = write_cfg(tmp_path, data={"kind": "csv", "path": str(csv_path), "n_classes": 2})
    assert main(["train", "--config", str(p)]) == 1
    err = capsys.readouterr().err
    assert "strategy=lora_dynamic seed=0" in err and "line 3" in err


def test_compare_two_rows_sorted(tmp_path, capsys):
    p = write_cfg(tmp_path, strategies=["lora_static", "lora_dynamic"])
    assert main(["compare", "--config", str(p)]) == 0
    rows = read_csv(tmp_path / "out" / "comparison.csv")
    assert rows[0] == ["strategy", "acc", "auc", "f1", "recall", "param_ratio", "train_seconds"]
    assert len(rows) == 3
    accs = [float(r[1]) for r in rows[1:]]
    assert accs == sorted(accs, reverse=True)
    assert "macro" in capsys.readouterr().out


def test_compare_needs_two_tags(tmp_path):
    p = write_cfg(tmp_path, strategies=["full"])
    assert main(["compare", "--config", str(p)]) == 2


def test_compare_jobs_matches_serial(tmp_path):
    p = write_cfg(tmp_path, strategies=["bitfit", "lora_static"], seeds=[0, 1])
    assert main(["compare", "--config", str(p), "--out", str(tmp_path / "a")]) == 0
    assert main(["compare", "--config", str(p), "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a, b = read_csv(tmp_path / "a" / "comparison.csv"), read_csv(tmp_path / "b" / "comparison.csv")
    assert [r[:6] for r in a] == [r[:6] for r in b]


def sweep_rows(path):
    rows = read_csv(path)
    return [dict(zip(rows[0], r)) for r in rows[1:]]


def test_sweep_cardinality_and_static_crosscheck(tmp_path):
    grid = {"lambda_adjust": [0.0, 0.5], "lambda1": [0.0, 1e-3]}
    sched = {"r_base": 2, "allocate_alpha": False}
    p = write_cfg(tmp_path, sweep={"grid": grid}, schedule=sched)
    assert main(["sweep", "--config", str(p)]) == 0
    rows = sweep_rows(tmp_path / "out" / "sweep.csv")
    assert len(rows) == 4
    static_cfg = write_cfg(tmp_path, name="static.json", strategy="lora_static", train={"epochs": 3, "rank": 2, "lambda1": 0.0},
                           output=str(tmp_path / "static"))
    assert main(["train", "--config", str(static_cfg)]) == 0
    rec = json.loads((tmp_path / "static" / "run_record.json").read_text())
    row = next(r for r in rows if float(r["lambda_adjust"]) == 0.0 and float(r["lambda1"]) == 0.0)
    assert float(row["acc"]) == rec["test"]["accuracy"] and float(row["auc"]) == rec["test"]["auc"]
    assert float(row["f1"]) == rec["test"]["f1_macro"]


def test_sweep_single_point_matches_train(tmp_path):
    p = write_cfg(tmp_path, sweep={"grid": {"lambda2": [1e-4]}})
    assert main(["sweep", "--config", str(p)]) == 0
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "t")]) == 0
    (row,) = sweep_rows(tmp_path / "out" / "sweep.csv")
    rec = json.loads((tmp_path / "t" / "run_record.json").read_text())
    assert float(row["acc"]) == rec["test"]["accuracy"] and float(row["recall"]) == rec["test"]["recall_macro"]


def test_sweep_cap_refused(tmp_path, capsys):
    p = write_cfg(tmp_path, sweep={"grid": {"lambda1": [0.0, 0.1, 0.2], "lambda2": [0.0, 0.1]}, "max_points": 4})
    assert main(["sweep", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "6 points" in err and "cap of 4" in err
    assert not (tmp_path / "out").exists()


def test_inspect_fresh_dynamic_checkpoint(tmp_path, capsys):
    cfg = TrainConfig(schedule=RankSchedule(r_base=2))
    ckpt = tmp_path / "fresh.json"
    save_checkpoint(apply_strategy(init_model([4, 6, 6], 3, 0), "lora_dynamic", cfg), ckpt)
    assert main(["inspect", str(ckpt)]) == 0
    out = capsys.readouterr().out
    model = load_checkpoint(ckpt)
    alphas = [ad.alpha for ad in model.adapters]
    assert abs(sum(alphas) - 1.0) < 1e-12
    layer_lines = [ln.split() for ln in out.splitlines() if ln.strip()[:1].isdigit()]
    assert len(layer_lines) == 2
    assert all(float(cols[-1]) == 0.0 for cols in layer_lines)
    params = model.parameters()
    recount = sum(params[n].size for n in trainable_set(model, model.strategy) if not n.startswith("head."))
    body = sum(params[n].size for n in params if n.startswith("layers."))
    assert f"{recount / body:.6f}" in out and recount / body == parameter_counts(model)["param_ratio"]


def test_inspect_norms_match_arrays(tmp_path, capsys):
    p = write_cfg(tmp_path)
    assert main(["train", "--config", str(p)]) == 0
    capsys.readouterr()
    ckpt = tmp_path / "out" / "checkpoint.json"
    assert main(["inspect", str(ckpt)]) == 0
    lines = [ln.split() for ln in capsys.readouterr().out.splitlines() if ln.strip()[:1].isdigit()]
    model = load_checkpoint(ckpt)
    for cols, ad in zip(lines, model.adapters):
        assert int(cols[2]) == ad.rank
        assert float(cols[4]) == pytest.approx(np.linalg.norm(ad.a), abs=1e-6)
        assert float(cols[6]) == pytest.approx(np.linalg.norm(ad.alpha * ad.a @ ad.b), abs=1e-6)


def test_inspect_corrupt_exit_1(tmp_path, capsys):
    bad = tmp_path / "ckpt.json"
    bad.write_text('{"format": "other"}')
    assert main(["inspect", str(bad)]) == 1
    assert "format" in capsys.readouterr().err


def test_usage_error_exit_2():
    assert main(["frobnicate"]) == 2


@pytest.mark.parametrize("name", ["train.json", "compare.json", "sweep.json"])
def test_shipped_configs_parse(name):
    path = os.path.join(os.path.dirname(__file__), os.pardir, "configs", name)
    assert load_config(path).output.startswith("runs/")
