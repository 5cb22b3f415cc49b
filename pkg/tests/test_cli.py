import csv
import json

import numpy as np
import pytest

from tabpretrain.cli import main

TRAIN = {"max_pretrain_iters": 6, "eval_every": 3, "max_finetune_epochs": 3, "patience": 2,
         "probe_finetune_epochs": 1, "pretrain_stop": "by_pretrain_val_loss"}
MODEL = {"layers": 1, "layer_size": 16, "head_hidden": 8}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = root / "synth.json"
    cfg.write_text(json.dumps({"synth": {"n": 400, "depth": 4}}))
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(root / "ds")]) == 0
    return root / "ds"


def write_cfg(tmp_path, dataset, name="cfg.json", **extra):
    cfg = {"dataset_dir": str(dataset), "model": MODEL, "objective": {"kind": "mask"}, "train": TRAIN,
           "seeds": [0, 1], **extra}
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def metrics_table(root):
    # wall-clock seconds are the one column that legitimately differs between runs
    with open(root / "seeds.csv") as fh:
        return [row[:-1] for row in csv.reader(fh)]


def only_run_dir(out):
    dirs = [p.parent for p in out.rglob("config.json")]
    assert len(dirs) == 1, dirs
    return dirs[0]


def test_synth_writes_dataset_and_importances(dataset):
    assert (dataset / "schema.json").exists()
    with open(dataset / "p.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8 and sorted(int(r["importance_rank"]) for r in rows) == list(range(8))
    assert np.isclose(sum(float(r["importance"]) for r in rows), 1.0)


def test_synth_refuses_to_overwrite(dataset, tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"synth": {"n": 100}}))
    assert main(["synth", "--config", str(cfg), "--out", str(dataset)]) == 1
    assert "already holds a dataset" in capsys.readouterr().err


def test_run_layout_refuse_and_resume(dataset, tmp_path, capsys):
    cfg = write_cfg(tmp_path, dataset)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    root = only_run_dir(out)
    assert root.relative_to(out).parts[:3] == ("synth_3", "mlp", "mask")
    report = json.loads((root / "report.json").read_text())
    assert report["seeds"] == [0, 1] and report["metric"] == "roc_auc"
    assert len(report["pretrain_curves"][0]) == 2
    for s in (0, 1):
        assert (root / "checkpoints" / f"seed_{s}.ckpt").exists()
        assert (root / "seeds" / f"seed_{s}_test_pred.npy").exists()
    with open(root / "seeds.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    resolved = json.loads((root / "config.json").read_text())
    assert resolved["resolved"]["train"]["max_pretrain_iters"] == 6

    capsys.readouterr()
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 1
    assert "RunExists" in capsys.readouterr().err

    # an interrupted run keeps finished seeds and only computes the rest
    (root / "report.json").unlink()
    (root / "seeds" / "seed_1.json").unlink()
    before = (root / "seeds" / "seed_0_test_pred.npy").stat().st_mtime_ns
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert (root / "seeds" / "seed_0_test_pred.npy").stat().st_mtime_ns == before
    again = json.loads((root / "report.json").read_text())
    assert again["test_metrics"] == report["test_metrics"]


def test_run_is_bit_reproducible(dataset, tmp_path):
    cfg = write_cfg(tmp_path, dataset)
    preds = []
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        root = only_run_dir(tmp_path / name)
        preds.append([(root / "seeds" / f"seed_{s}_test_pred.npy").read_bytes() for s in (0, 1)])
        preds[-1] += [(root / "checkpoints" / f"seed_{s}.ckpt").read_bytes() for s in (0, 1)]
        preds[-1].append(metrics_table(root))
    assert preds[0] == preds[1]


def test_parallel_jobs_match_serial(dataset, tmp_path):
    cfg = write_cfg(tmp_path, dataset)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    a, b = only_run_dir(tmp_path / "s"), only_run_dir(tmp_path / "p")
    assert metrics_table(a) == metrics_table(b)


@pytest.mark.parametrize("body, needle", [
    ("{not json", "JSON"),
    (json.dumps({"dataset_dir": "x", "modle": {}}), "modle"),
    (json.dumps({"dataset_dir": "x", "train": {"lr": 1e-3, "epochs": 3}}), "epochs"),
    (json.dumps({"dataset_dir": "x", "objective": {"kind": "nope"}}), "nope"),
])
def test_malformed_config_creates_nothing(tmp_path, capsys, body, needle):
    cfg = tmp_path / "bad.json"
    cfg.write_text(body)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and needle in err
    assert not out.exists()


def test_missing_config_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 1
    assert "none.json" in capsys.readouterr().err


def test_train_is_scratch(dataset, tmp_path):
    cfg = write_cfg(tmp_path, dataset, seeds=1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    root = only_run_dir(tmp_path / "o")
    assert root.relative_to(tmp_path / "o").parts[2] == "scratch"
    assert json.loads((root / "report.json").read_text())["pretrain_curves"] == [[]]


def test_pretrain_then_finetune(dataset, tmp_path, capsys):
    cfg = write_cfg(tmp_path, dataset)
    out = tmp_path / "o"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "0"]) == 0
    ckpt = capsys.readouterr().out.strip()
    assert ckpt.endswith("pretrained_seed_0.ckpt")
    assert main(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "0"]) == 1
    capsys.readouterr()
    assert main(["finetune", "--config", str(cfg), "--checkpoint", ckpt, "--seed", "0"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["metric"] == "roc_auc" and 0 <= res["test"] <= 1


def test_report_compares_runs(dataset, tmp_path, capsys):
    out = tmp_path / "o"
    for kind, name in (("mask", "a.json"), ("rec", "b.json")):
        cfg = write_cfg(tmp_path, dataset, name=name, objective={"kind": kind}, seeds=1)
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    runs = sorted(str(p.parent) for p in out.rglob("report.json"))
    capsys.readouterr()
    assert main(["report", *runs]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and "delta" in lines[0]
    assert main(["report"]) == 1


def test_hpo_writes_trials_and_best_config(dataset, tmp_path, capsys):
    cfg = write_cfg(tmp_path, dataset, hpo={"n_trials": 2, "space": {"layers": [1, 2]}})
    out = tmp_path / "o"
    assert main(["hpo", "--config", str(cfg), "--out", str(out)]) == 0
    best = next(out.rglob("best_config.json"))
    with open(best.parent / "trials.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    tuned = json.loads(best.read_text())
    assert "hpo" not in tuned and tuned["model"]["layers"] in (1, 2)
    # the tuned config is directly runnable
    best_cfg = tmp_path / "tuned.json"
    best_cfg.write_text(json.dumps({**tuned, "seeds": 1}))
    assert main(["run", "--config", str(best_cfg), "--out", str(tmp_path / "r")]) == 0


def test_efficient_ensemble(dataset, tmp_path, capsys):
    cfg = write_cfg(tmp_path, dataset, seeds=15, ensemble={"mode": "efficient"})
    assert main(["ensemble", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["mode"] == "efficient" and len(res["ensembles"]) == 3


def test_probe_writes_csv(tmp_path, capsys):
    cfg = tmp_path / "probe.json"
    cfg.write_text(json.dumps({"synth": {"n": 300, "depth": 3, "seeds": [0]}, "model": MODEL,
                               "train": TRAIN, "probe": {"hidden": 8, "epochs": 1}}))
    assert main(["probe", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "probe" / "probe.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 24 and {r["init_kind"] for r in rows} == {"scratch", "mask", "mask_target"}


def test_prepare_from_csv(tmp_path):
    r = np.random.default_rng(0)
    path = tmp_path / "t.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "color", "y"])
        for _ in range(50):
            w.writerow([r.normal(), r.normal(), r.choice(["red", "blue"]), r.normal()])
    cfg = tmp_path / "prep.json"
    cfg.write_text(json.dumps({"name": "toy", "source": {"kind": "csv", "path": str(path), "target": "y",
                                                          "task": "regression", "cat_columns": ["color"],
                                                          "sizes": [30, 10, 10]}}))
    assert main(["prepare", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    schema = json.loads((tmp_path / "ds" / "schema.json").read_text())
    assert schema["name"] == "toy"


def test_prepare_unknown_source(tmp_path, capsys):
    cfg = tmp_path / "prep.json"
    cfg.write_text(json.dumps({"source": {"kind": "parquet"}}))
    assert main(["prepare", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 1
    assert "parquet" in capsys.readouterr().err
