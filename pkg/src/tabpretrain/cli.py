"""Command-line entry point: `python -m tabpretrain <command> --config cfg.json`."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import hpo, synth
from .metrics import MetricKind, metric_for
from .model import ModelState
from .trainer import (ConfigError, PipelineConfig, RunRecord, SeedResult, ensemble, evaluate,
                      finetune, pretrain, build_for, run_efficient, run_pipeline, _seeds)

logger = logging.getLogger("tabpretrain")

COMMANDS = ("prepare", "pretrain", "finetune", "train", "run", "hpo", "ensemble", "synth",
            "probe", "report")
OUT_ENV = "TABPRETRAIN_OUT"
CONFIG_KEYS = {"dataset_dir", "model", "objective", "train", "seeds", "hpo", "ensemble", "synth",
               "probe", "source", "name"}


class CliError(Exception):
    pass


class RunExists(CliError):
    pass


# -------------------------------------------------------------------- config


def read_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{p}: unknown keys {sorted(unknown)}")
    return cfg


def pipeline_config(cfg: dict, scratch: bool = False) -> PipelineConfig:
    d = {"model": cfg.get("model", {}), "objective": None if scratch else cfg.get("objective"),
         "train": cfg.get("train", {})}
    return PipelineConfig.from_dict(d)


def seed_list(cfg: dict, override: int | None = None) -> list[int]:
    if override is not None:
        return [override]
    seeds = cfg.get("seeds", 15)
    return list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]


def dataset_dir(cfg: dict) -> Path:
    if "dataset_dir" not in cfg:
        raise ConfigError("config needs 'dataset_dir'")
    p = Path(cfg["dataset_dir"])
    if not (p / "schema.json").exists():
        raise ConfigError(f"dataset_dir {p} has no schema.json")
    return p


def run_dir(out_root: Path, ds_name: str, pcfg: PipelineConfig, tag: str = "") -> Path:
    model = "mlp" if pcfg.model.embedding.kind == "none" else f"mlp-{pcfg.model.embedding.kind}"
    return out_root / ds_name / model / (pcfg.objective_name + tag) / pcfg.config_hash()


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV, "out"))


def _write_config(path: Path, cfg: dict, pcfg: PipelineConfig | None):
    stamped = dict(cfg)
    if pcfg is not None:
        stamped["resolved"] = pcfg.to_dict()
        stamped["config_hash"] = pcfg.config_hash()
    (path / "config.json").write_text(json.dumps(stamped, indent=2, default=str))


# ------------------------------------------------------------------ records


def _seed_path(root: Path, seed: int) -> Path:
    return root / "seeds" / f"seed_{seed}.json"


def _save_seed(root: Path, r: SeedResult, checkpoint: str | None) -> None:
    (root / "seeds").mkdir(exist_ok=True)
    np.save(root / "seeds" / f"seed_{r.seed}_test_pred.npy", r.test_pred)
    payload = {"seed": r.seed, "val_metric": r.val_metric, "test_metric": r.test_metric,
               "seconds": r.seconds, "pretrain_curve": [list(p) for p in r.pretrain_curve],
               "checkpoint": checkpoint}
    _seed_path(root, r.seed).write_text(json.dumps(payload))


def _load_seed(root: Path, seed: int) -> SeedResult | None:
    p = _seed_path(root, seed)
    if not p.exists():
        return None
    d = json.loads(p.read_text())
    pred = np.load(root / "seeds" / f"seed_{seed}_test_pred.npy")
    r = SeedResult(seed, d["val_metric"], d["test_metric"], pred, np.zeros(0), d["seconds"],
                   d["pretrain_curve"])
    return r


def write_record(root: Path, record: RunRecord) -> None:
    (root / "report.json").write_text(json.dumps(record.to_dict(), indent=2))
    with open(root / "seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", f"val_{record.metric}", f"test_{record.metric}", "seconds"])
        for s, v, t, sec in zip(record.seeds, record.val_metrics, record.test_metrics, record.seconds):
            w.writerow([s, f"{v:.6g}", f"{t:.6g}", f"{sec:.6g}"])
    lines = [f"config {record.config_hash}", f"metric {record.metric}",
             f"seeds {len(record.seeds)}" + (" (partial)" if record.partial else ""),
             f"test mean {record.mean:.6g} std {record.std:.6g}" if record.seeds else "no results"]
    lines += record.notes
    (root / "report.txt").write_text("\n".join(lines) + "\n")


def read_record(root: Path) -> dict:
    p = Path(root) / "report.json"
    if not p.exists():
        raise CliError(f"{root} has no report.json")
    return json.loads(p.read_text())


def _prepare_run_dir(root: Path, resume_ok: bool = True) -> None:
    if (root / "report.json").exists():
        raise RunExists(f"{root} already holds a finished run; delete it to rerun")
    if root.exists() and not resume_ok:
        raise RunExists(f"{root} exists")
    root.mkdir(parents=True, exist_ok=True)


# ------------------------------------------------------------------ commands


def cmd_run(args, cfg, scratch=False):
    pcfg = pipeline_config(cfg, scratch=scratch)
    ddir = dataset_dir(cfg)
    seeds = seed_list(cfg, args.seed)
    ds = data_mod.load(ddir)
    prep = data_mod.prepare(ds)
    root = run_dir(_out_root(args), ds.name, pcfg)
    _prepare_run_dir(root)
    _write_config(root, cfg, pcfg)
    (root / "checkpoints").mkdir(exist_ok=True)

    record = RunRecord(pcfg.config_hash(), metric_for(prep.task, ds.name).value,
                       notes=["hyperparameter search: random search"])
    todo = []
    for s in seeds:
        done = _load_seed(root, s)
        if done is not None:
            logger.info("seed %d already complete, resuming", s)
            record.add(done)
        else:
            todo.append(s)

    def finish(r: SeedResult):
        ckpt = root / "checkpoints" / f"seed_{r.seed}.ckpt"
        if r.state is not None:
            r.state.save(ckpt)
        _save_seed(root, r, str(ckpt) if r.state is not None else None)
        record.add(r)
        record.checkpoints.append(str(ckpt))

    if args.jobs > 1 and len(todo) > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(args.jobs) as pool:
            futures = {s: pool.submit(run_pipeline, prep, pcfg, s, None, True) for s in todo}
            for s, fut in futures.items():
                try:
                    finish(fut.result())
                except Exception as exc:  # noqa: BLE001
                    record.failures[s] = f"{type(exc).__name__}: {exc}"
    else:
        for s in todo:
            try:
                finish(run_pipeline(prep, pcfg, s, keep_states=True))
            except Exception as exc:  # noqa: BLE001
                record.failures[s] = f"{type(exc).__name__}: {exc}"
    _sort_record(record)
    write_record(root, record)
    print(f"{root}\t{record.metric}\t{record.mean:.6g}\t{record.std:.6g}")
    return 0 if not record.partial else 1


def _sort_record(record: RunRecord) -> None:
    order = np.argsort(record.seeds)
    for name in ("seeds", "val_metrics", "test_metrics", "seconds", "pretrain_curves",
                 "test_predictions"):
        values = getattr(record, name)
        setattr(record, name, [values[i] for i in order])


def cmd_pretrain(args, cfg):
    pcfg = pipeline_config(cfg)
    if pcfg.objective is None:
        raise ConfigError("pretrain needs an 'objective'")
    ds = data_mod.load(dataset_dir(cfg))
    prep = data_mod.prepare(ds)
    seed = args.seed if args.seed is not None else seed_list(cfg)[0]
    root = run_dir(_out_root(args), ds.name, pcfg, tag="_pretrain")
    root.mkdir(parents=True, exist_ok=True)
    ckpt = root / f"pretrained_seed_{seed}.ckpt"
    if ckpt.exists():
        raise RunExists(f"{ckpt} exists; delete it to pretrain again")
    _write_config(root, cfg, pcfg)
    init_rng, pre_rng, _ = _seeds(seed)
    res = pretrain(build_for(prep, pcfg, init_rng), prep, pcfg.objective, pcfg.train, pre_rng)
    res.state.save(ckpt, step=res.iters, extra={"curve": res.curve, "best_iter": res.best_iter})
    print(ckpt)
    return 0


def cmd_finetune(args, cfg):
    if not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint")
    pcfg = pipeline_config(cfg, scratch=True)
    ds = data_mod.load(dataset_dir(cfg))
    prep = data_mod.prepare(ds)
    state = ModelState.load(args.checkpoint)
    seed = args.seed if args.seed is not None else seed_list(cfg)[0]
    _, _, fine_rng = _seeds(seed)
    metric = metric_for(prep.task, ds.name)
    if pcfg.train.no_finetune:
        val, _ = evaluate(state, prep, "val", metric)
        test, _ = evaluate(state, prep, "test", metric)
    else:
        res = finetune(state, prep, pcfg.train, fine_rng, metric)
        val, test = res.val_metric, res.test_metric
        out = Path(args.checkpoint).with_name(f"finetuned_seed_{seed}.ckpt")
        res.state.save(out)
    print(json.dumps({"seed": seed, "metric": metric.value, "val": val, "test": test}))
    return 0


def cmd_hpo(args, cfg):
    base = pipeline_config(cfg)
    ds = data_mod.load(dataset_dir(cfg))
    prep = data_mod.prepare(ds)
    h = cfg.get("hpo", {})
    space = hpo.SearchSpace(**h.get("space", {}))
    n_trials = int(h.get("n_trials", 100))
    metric = metric_for(prep.task, ds.name)
    kind = base.objective.kind if base.objective else None
    root = run_dir(_out_root(args), ds.name, base, tag="_hpo")
    _prepare_run_dir(root, resume_ok=False)
    _write_config(root, cfg, base)

    def pipeline(params, trial_seed):
        return run_pipeline(prep, hpo.apply_overrides(base, params), trial_seed).val_metric

    seed = args.seed if args.seed is not None else int(h.get("seed", 0))
    result = hpo.search(space, pipeline, n_trials, seed, metric.higher_is_better, kind)
    result.write_log(root / "trials.csv")
    best = hpo.apply_overrides(base, result.best_params)
    tuned = {**cfg, **best.to_dict()}
    tuned.pop("hpo", None)
    (root / "best_config.json").write_text(json.dumps(tuned, indent=2, default=str))
    (root / "report.json").write_text(json.dumps(
        {"best_value": result.best_value, "best_params": result.best_params, "metric": metric.value,
         "n_trials": n_trials, "failed": sum(t.value is None for t in result.trials),
         "note": result.note}, indent=2))
    print(f"{root / 'best_config.json'}\t{metric.value}\t{result.best_value:.6g}")
    return 0


def cmd_ensemble(args, cfg):
    ds = data_mod.load(dataset_dir(cfg))
    prep = data_mod.prepare(ds)
    metric = metric_for(prep.task, ds.name)
    y_test = prep.y[prep.splits["test"]]
    if args.run_dir:
        rec = read_record(Path(args.run_dir))
        preds = [np.load(Path(args.run_dir) / "seeds" / f"seed_{s}_test_pred.npy") for s in rec["seeds"]]
        mode = "standard"
        singles = rec["test_metrics"]
    else:
        pcfg = pipeline_config(cfg)
        mode = cfg.get("ensemble", {}).get("mode", "standard")
        seeds = seed_list(cfg)
        if mode == "efficient":
            record = run_efficient(prep, pcfg, pretrain_seed=seeds[0], seeds=seeds)
        else:
            from .trainer import run_seeds

            record = run_seeds(prep, pcfg, seeds, jobs=args.jobs)
        preds, singles = record.test_predictions, record.test_metrics
        root = run_dir(_out_root(args), ds.name, pcfg, tag=f"_ensemble_{mode}")
        _prepare_run_dir(root, resume_ok=False)
        _write_config(root, cfg, pcfg)
        write_record(root, record)
    result = ensemble(preds, y_test, metric, mode)
    result["single_mean"] = float(np.mean(singles))
    print(json.dumps(result))
    return 0


def cmd_synth(args, cfg):
    s = cfg.get("synth", {})
    seed = args.seed if args.seed is not None else int(s.get("seed", 0))
    spec = synth.SyntheticSpec(**{k: v for k, v in s.items() if k not in ("seed", "seeds")}, seed=seed)
    out = Path(args.out or cfg.get("dataset_dir") or f"synth_{seed}")
    if (out / "schema.json").exists():
        raise RunExists(f"{out} already holds a dataset")
    gen = synth.generate(spec)
    data_mod.save(gen.dataset, out)
    with open(out / "p.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "importance", "importance_rank"])
        for j, (p, r) in enumerate(zip(gen.importance, synth.importance_rank(gen.importance))):
            w.writerow([j, repr(float(p)), int(r)])
    print(out)
    return 0


def cmd_probe(args, cfg):
    s = cfg.get("synth", {})
    seeds = s.get("seeds", list(range(10)))
    spec = synth.SyntheticSpec(**{k: v for k, v in s.items() if k not in ("seed", "seeds")})
    probe_cfg = synth.ProbeConfig(**cfg.get("probe", {}))
    base = {"model": cfg.get("model", {}), "train": cfg.get("train", {})}

    def pipeline_for(kind):
        obj = None if kind == "scratch" else {**cfg.get("objective", {}), "kind": kind}
        return PipelineConfig.from_dict({**base, "objective": obj})

    for kind in synth.INIT_KINDS:
        pipeline_for(kind)  # validate before any work
    out = Path(args.out or os.environ.get(OUT_ENV, "out")) / "probe"
    out.mkdir(parents=True, exist_ok=True)
    path = out / "probe.csv"
    if path.exists():
        raise RunExists(f"{path} exists")
    rows = synth.decodability_study(spec, seeds, pipeline_for, probe_cfg)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset_seed", "feature", "importance_rank", "importance", "rmse", "init_kind"])
        for r in rows:
            w.writerow([r.dataset_seed, r.feature, r.importance_rank, f"{r.importance:.6g}",
                        f"{r.rmse:.6g}", r.init_kind])
    print(path)
    return 0


def cmd_prepare(args, cfg):
    source = cfg.get("source", {})
    kind = source.get("kind")
    out = Path(args.out or cfg.get("dataset_dir", ""))
    if not str(out):
        raise ConfigError("prepare needs --out or dataset_dir")
    if (out / "schema.json").exists():
        raise RunExists(f"{out} already holds a dataset")
    from . import sources

    if kind == "california":
        ds = sources.california(seed=int(source.get("split_seed", 0)), data_home=source.get("data_home"))
    elif kind == "churn":
        ds = sources.churn(source["path"], seed=int(source.get("split_seed", 0)))
    elif kind == "csv":
        ds = sources.from_csv(source["path"], source["target"], data_mod.TaskType(source["task"]),
                              cat_columns=source.get("cat_columns", []),
                              sizes=tuple(source["sizes"]), seed=int(source.get("split_seed", 0)),
                              batch_size=int(source.get("batch_size", 128)), name=cfg.get("name"))
    else:
        raise ConfigError(f"unknown source kind {kind!r}; expected california, churn or csv")
    data_mod.save(ds, out)
    print(out)
    return 0


def cmd_report(args, cfg=None):
    if not args.runs:
        raise ConfigError("report needs at least one run directory")
    records = [(Path(r), read_record(Path(r))) for r in args.runs]
    base = records[0][1]
    higher = MetricKind(base["metric"]).higher_is_better
    header = f"{'run':<60} {'metric':>9} {'mean':>10} {'std':>10} {'delta':>10} {'n':>3}"
    print(header)
    print("-" * len(header))
    for path, rec in records:
        delta = rec["mean"] - base["mean"]
        flag = "" if delta == 0 else (" better" if (delta > 0) == higher else " worse")
        print(f"{str(path)[-60:]:<60} {rec['metric']:>9} {rec['mean']:>10.6g} {rec['std']:>10.6g} "
              f"{delta:>+10.4g} {len(rec['seeds']):>3}{flag}")
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabpretrain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./out)")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int)
        if name == "report":
            p.add_argument("runs", nargs="*")
            p.add_argument("--config")
        else:
            p.add_argument("--config", required=name != "report")
        if name == "finetune":
            p.add_argument("--checkpoint")
        if name == "ensemble":
            p.add_argument("--run-dir")
    return parser


HANDLERS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train": lambda a, c: cmd_run(a, c, scratch=True),
    "run": cmd_run,
    "hpo": cmd_hpo,
    "ensemble": cmd_ensemble,
    "synth": cmd_synth,
    "probe": cmd_probe,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = read_config(args.config) if args.config else {}
        return HANDLERS[args.command](args, cfg)
    except (CliError, ConfigError, data_mod.DataError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
