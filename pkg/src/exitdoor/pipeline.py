"""Experiment stages behind the CLI.

Each stage reads its inputs from, and writes its artifacts to, a stage
directory under the run directory::

    clean/     clean control backbone
    inject/    backdoored backbone and the injection log
    baseline/  BadNets positive control
    victim/    one JSON record per (N_v, seed) cell plus the flat grid
    defend/    one JSON record per (target, method) unit plus entropies
    report/    aggregate CSV/JSON tables and plots

Every stage writes ``manifest.json`` (config hash, seed, code version) last,
so a directory without one holds no finished result.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import AttackConfig, badnets_baseline, inject_backdoor
from .config import ExperimentConfig
from .datasets import LabeledImageSet, load_dataset, split_disjoint, subsample
from .defenses import (DFTNDConfig, NeuralCleanseConfig, StripConfig, UnlearnConfig, df_tnd, finetune,
                       neural_cleanse, strip_detect, unlearn)
from .evaluate import compute_acc, compute_asr, victim_simulation
from .models import build_backbone, load_checkpoint, num_attack_ics, save_checkpoint, train_backbone
from .multiexit import ExitPolicy
from .trigger import TriggerSpec, apply_trigger, make_checkerboard_trigger

log = logging.getLogger(__name__)

STAGES = ("clean", "inject", "baseline", "victim", "defend")
CHECKPOINTS = {"clean": "clean", "backdoored": "inject", "badnets": "baseline"}


class StageError(RuntimeError):
    pass


class NoResultsError(StageError):
    pass


# ---------------------------------------------------------------- files

def _atomic_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return ""
    return str(value)


def load_schema() -> dict:
    return json.loads((resources.files("exitdoor") / "schema" / "results_schema.json").read_text())


def write_csv(path: Path, table: str, rows: list[dict]) -> None:
    """Write ``rows`` with the column order declared for ``table`` in the schema file."""
    columns = [c["name"] for c in load_schema()["tables"][table]["columns"]]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        missing = set(columns) - set(row)
        if missing:
            raise KeyError(f"{table} row lacks columns {sorted(missing)}")
        writer.writerow([_cell(row[c]) for c in columns])
    _atomic_bytes(path, buf.getvalue().encode())


def code_version() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def manifest(cfg: ExperimentConfig, stage: str) -> dict:
    return {"stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed, "code_version": code_version(),
            "config": cfg.model_dump(exclude={"output"})}


def _open_stage(out: Path, stage: str, cfg: ExperimentConfig, force: bool) -> Path:
    """Create the stage directory, refusing to mix results from a different config."""
    d = out / stage
    old = d / "manifest.json"
    if old.exists() and not force:
        prev = read_json(old)
        if prev.get("config_hash") != cfg.digest():
            raise StageError(f"resume conflict: {d} holds results of config {prev.get('config_hash', '?')[:12]}, "
                             f"current config is {cfg.digest()[:12]}; pass --force or use a fresh --out-dir")
    if old.exists():
        old.unlink()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _close_stage(d: Path, cfg: ExperimentConfig) -> None:
    write_json(d / "manifest.json", manifest(cfg, d.name))


def _checkpoint(out: Path, target: str) -> Path:
    path = out / CHECKPOINTS[target] / "model.pt"
    if not path.exists():
        stage = {"clean": "train", "backdoored": "inject", "badnets": "baseline"}[target]
        raise StageError(f"missing checkpoint {path}; run `exitdoor {stage}` first")
    return path


# ---------------------------------------------------------------- data

@dataclass
class ExperimentData:
    train: LabeledImageSet
    test: LabeledImageSet
    attacker: LabeledImageSet
    victim: LabeledImageSet


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    ds = cfg.dataset
    train = load_dataset(ds.name, "train")
    test = load_dataset(ds.name, "test")
    if ds.subsample < 1.0:
        train = subsample(train, ds.subsample, ds.seed)
    attacker, victim = split_disjoint(train, [ds.attacker_fraction, ds.victim_fraction], ds.seed)
    return ExperimentData(train, test, attacker, victim)


def make_trigger(cfg: ExperimentConfig, image_shape) -> TriggerSpec:
    t = cfg.attack.trigger
    return make_checkerboard_trigger(t.size, tuple(image_shape), t.corner)


def attack_config(cfg: ExperimentConfig, image_shape) -> AttackConfig:
    fields = cfg.attack.model_dump(exclude={"trigger"})
    return AttackConfig(**fields, trigger=make_trigger(cfg, image_shape), seed=cfg.seed)


def vanilla_metrics(model, data: ExperimentData, cfg: ExperimentConfig) -> dict:
    trigger = make_trigger(cfg, data.test.image_shape)
    out = {"acc_top1": compute_acc(model, data.test, 1),
           "asr": compute_asr(model, data.test, trigger, cfg.attack.target_label)}
    if data.test.num_classes > 5:
        out["acc_top5"] = compute_acc(model, data.test, 5)
    return out


def _check_target_label(cfg: ExperimentConfig, data: ExperimentData) -> None:
    if cfg.attack.target_label >= data.train.num_classes:
        raise StageError(f"attack.target_label {cfg.attack.target_label} is not a class of "
                         f"{cfg.dataset.name} ({data.train.num_classes} classes)")


# ---------------------------------------------------------------- stages

def run_train(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    data = prepare_data(cfg)
    _check_target_label(cfg, data)
    d = _open_stage(out, "clean", cfg, force)
    model = build_backbone(cfg.model.arch, data.train.num_classes, cfg.seed)
    model, history = train_backbone(model, data.train, cfg.train_spec())
    save_checkpoint(model, d / "model.pt", {"role": "clean"})
    metrics = vanilla_metrics(model, data, cfg)
    write_json(d / "history.json", history)
    write_json(d / "metrics.json", metrics)
    _close_stage(d, cfg)
    return metrics


def run_inject(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    data = prepare_data(cfg)
    _check_target_label(cfg, data)
    clean = load_checkpoint(_checkpoint(out, "clean"))
    d = _open_stage(out, "inject", cfg, force)
    model, record = inject_backdoor(clean, data.attacker, attack_config(cfg, data.train.image_shape))
    save_checkpoint(model, d / "model.pt", {"role": "backdoored"})
    metrics = vanilla_metrics(model, data, cfg)
    write_json(d / "log.json", record)
    write_json(d / "metrics.json", metrics)
    _close_stage(d, cfg)
    return metrics


def run_baseline(cfg: ExperimentConfig, out: Path, force: bool = False) -> dict:
    data = prepare_data(cfg)
    _check_target_label(cfg, data)
    d = _open_stage(out, "baseline", cfg, force)
    acfg = attack_config(cfg, data.train.image_shape)
    acfg.poison_fraction = cfg.baseline.poison_fraction
    fresh = build_backbone(cfg.model.arch, data.train.num_classes, cfg.seed)
    model = badnets_baseline(fresh, data.train, acfg, cfg.train_spec(), cfg.baseline.opacity_min)
    save_checkpoint(model, d / "model.pt", {"role": "badnets"})
    metrics = vanilla_metrics(model, data, cfg)
    write_json(d / "metrics.json", metrics)
    _close_stage(d, cfg)
    return metrics


def _victim_kwargs(cfg: ExperimentConfig) -> dict:
    v, a = cfg.victim, cfg.attack
    return {
        "ratio": a.exit_layer_ratio,
        "target_label": a.target_label,
        "policy": ExitPolicy(v.threshold) if v.threshold is not None else None,
        "ic_epochs": v.ic_epochs if v.ic_epochs is not None else a.ic_epochs,
        "ic_lr": v.ic_lr if v.ic_lr is not None else a.ic_lr,
        "ic_weight_decay": v.ic_weight_decay if v.ic_weight_decay is not None else a.ic_weight_decay,
        "early_fraction": v.early_fraction,
    }


def _victim_row(model, data: ExperimentData, cfg: ExperimentConfig, start: int, seed: int) -> dict:
    trigger = make_trigger(cfg, data.test.image_shape)
    rep = victim_simulation(model, data.victim, data.test, start, trigger=trigger, seed=seed,
                            **_victim_kwargs(cfg))
    final = model.num_blocks + 1
    clean_total = sum(rep.exit_histogram.values())
    trig_total = sum(rep.triggered_exit_histogram.values())
    return {
        "arch": cfg.model.arch, "dataset": cfg.dataset.name, "n_v": start, "seed": seed,
        "num_attack_ics": num_attack_ics(model.num_blocks, cfg.attack.exit_layer_ratio),
        "threshold": float(rep.context["threshold"]),
        "acc_top1": rep.acc_topk[1], "asr": rep.asr,
        "early_exit_fraction": 1.0 - rep.exit_histogram.get(final, 0) / clean_total,
        "triggered_early_exit_fraction": 1.0 - rep.triggered_exit_histogram.get(final, 0) / trig_total,
        "exit_histogram": {str(k): v for k, v in rep.exit_histogram.items()},
        "triggered_exit_histogram": {str(k): v for k, v in rep.triggered_exit_histogram.items()},
    }


def _victim_cell(cfg_dump: dict, checkpoint: str, start: int, seed: int, path: str) -> str:
    cfg = ExperimentConfig.model_validate(cfg_dump)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        row = _victim_row(load_checkpoint(checkpoint), prepare_data(cfg), cfg, start, seed)
    finally:
        torch.set_num_threads(threads)
    write_json(Path(path), row)
    return path


def _run_pool(fn, jobs: int, arg_list: list[tuple]) -> list:
    if jobs <= 1 or len(arg_list) <= 1:
        return [fn(*args) for args in arg_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *args) for args in arg_list]
        return [f.result() for f in futures]


def run_victim_eval(cfg: ExperimentConfig, out: Path, jobs: int = 1, checkpoint: str | Path | None = None,
                    force: bool = False) -> list[dict]:
    ckpt = Path(checkpoint) if checkpoint is not None else _checkpoint(out, "backdoored")
    if not ckpt.exists():
        raise StageError(f"missing checkpoint {ckpt}")
    d = _open_stage(out, "victim", cfg, force)
    cells = d / "cells"
    cells.mkdir(exist_ok=True)
    args = [(cfg.model_dump(), str(ckpt), start, seed, str(cells / f"nv{start}_seed{seed}.json"))
            for start in cfg.victim.starts for seed in cfg.victim.seeds]
    paths = _run_pool(_victim_cell, jobs, args)
    rows = [read_json(p) for p in paths]
    write_csv(d / "grid.csv", "victim_grid", rows)
    _close_stage(d, cfg)
    return rows


def _detector_unit(cfg_dump: dict, out: str, target: str, method: str, path: str) -> str:
    cfg = ExperimentConfig.model_validate(cfg_dump)
    data = prepare_data(cfg)
    model = load_checkpoint(_checkpoint(Path(out), target))
    trigger = make_trigger(cfg, data.test.image_shape)
    dc = cfg.defense
    record = {"target": target, "method": method}
    if method == "neural_cleanse":
        verdict = neural_cleanse(model, data.test, NeuralCleanseConfig(**dc.neural_cleanse.model_dump(),
                                                                       seed=cfg.seed))
    elif method == "strip":
        sc = dc.strip.model_dump()
        n = sc.pop("samples")
        keep = data.test.labels != cfg.attack.target_label
        clean_x = data.test.images[:n]
        trig_x = apply_trigger(data.test.images[keep][:n], trigger)
        clean_e, trig_e, verdict = strip_detect(model, clean_x, trig_x, data.victim.images,
                                                StripConfig(**sc, seed=cfg.seed))
        buf = io.BytesIO()
        np.savez(buf, clean=clean_e, triggered=trig_e)
        _atomic_bytes(Path(path).with_suffix(".npz"), buf.getvalue())
    elif method == "df_tnd":
        verdict = df_tnd(model, DFTNDConfig(**dc.df_tnd.model_dump(), seed=cfg.seed), data.test.image_shape)
    else:
        raise ValueError(f"unknown detector {method!r}")
    record.update(verdict.to_dict())
    write_json(Path(path), record)
    return path


def _removal_unit(cfg_dump: dict, out: str, target: str, method: str, path: str) -> str:
    cfg = ExperimentConfig.model_validate(cfg_dump)
    data = prepare_data(cfg)
    model = load_checkpoint(_checkpoint(Path(out), target))
    dc = cfg.defense
    clean = subsample(data.victim, dc.clean_fraction, cfg.seed)
    if method == "unlearn":
        uc = dc.unlearn.model_dump()
        epochs = uc.pop("epochs")
        repaired = unlearn(model, clean, epochs, UnlearnConfig(**uc, seed=cfg.seed))
    elif method == "finetune":
        fc = dc.finetune
        epochs = fc.epochs
        repaired = finetune(model, clean, fc.epochs, fc.lr, fc.batch_size, cfg.seed, fc.momentum, fc.weight_decay)
    else:
        raise ValueError(f"unknown remover {method!r}")
    before = vanilla_metrics(model, data, cfg)
    after = vanilla_metrics(repaired, data, cfg)
    record = {"target": target, "method": method, "epochs": epochs,
              "acc_before": before["acc_top1"], "acc_after": after["acc_top1"],
              "clean_samples": len(clean),
              "vanilla_asr_before": before["asr"], "vanilla_asr_after": after["asr"]}
    victim = [_victim_row(repaired, data, cfg, s, cfg.victim.seeds[0]) for s in cfg.victim.starts]
    record["victim_asr_after"] = {str(r["n_v"]): r["asr"] for r in victim}
    record["victim_asr_after_mean"] = float(np.mean([r["asr"] for r in victim]))
    write_json(Path(path), record)
    return path


def _unit(kind: str, *args) -> str:
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return (_detector_unit if kind == "detector" else _removal_unit)(*args)
    finally:
        torch.set_num_threads(threads)


def run_defend(cfg: ExperimentConfig, out: Path, jobs: int = 1, force: bool = False) -> list[dict]:
    for target in cfg.defense.targets:
        _checkpoint(out, target)
    d = _open_stage(out, "defend", cfg, force)
    units = d / "units"
    units.mkdir(exist_ok=True)
    args = []
    for target in cfg.defense.targets:
        for method in cfg.defense.methods:
            if method in ("neural_cleanse", "strip", "df_tnd"):
                kind = "detector"
            elif target == "clean":
                continue  # nothing to remove from the clean control
            else:
                kind = "removal"
            args.append((kind, cfg.model_dump(), str(out), target, method, str(units / f"{target}_{method}.json")))
    paths = _run_pool(_unit, jobs, args)
    records = [read_json(p) for p in paths]
    _close_stage(d, cfg)
    return records


# ---------------------------------------------------------------- report

def _manifests(out: Path) -> dict[str, dict]:
    found = {}
    for stage in STAGES:
        path = out / stage / "manifest.json"
        if path.exists():
            found[stage] = read_json(path)
    return found


def run_report(out: Path, force: bool = False, plots: bool = True) -> dict:
    out = Path(out)
    found = _manifests(out)
    if not found:
        raise NoResultsError(f"no results found in {out}")
    keys = ("config_hash", "seed", "code_version")
    distinct = {k: sorted({str(m[k]) for m in found.values()}) for k in keys}
    mismatched = {k: v for k, v in distinct.items() if len(v) > 1}
    if mismatched and not force:
        detail = "; ".join(f"{k}: {', '.join(v)}" for k, v in mismatched.items())
        raise StageError(f"manifests disagree ({detail}); pass --force to aggregate anyway")

    rd = out / "report"
    rd.mkdir(parents=True, exist_ok=True)
    summary = {"stages": sorted(found), "manifest": {k: v[0] if len(v) == 1 else v for k, v in distinct.items()}}

    vanilla = []
    for role, stage in (("clean", "clean"), ("backdoored", "inject"), ("badnets", "baseline")):
        if stage in found:
            m = read_json(out / stage / "metrics.json")
            vanilla.append({"model": role, "acc_top1": m["acc_top1"], "acc_top5": m.get("acc_top5"),
                            "asr": m["asr"]})
    if vanilla:
        write_csv(rd / "vanilla.csv", "vanilla", vanilla)
        summary["vanilla"] = {r["model"]: r for r in vanilla}

    if "victim" in found:
        rows = sorted((read_json(p) for p in (out / "victim" / "cells").glob("*.json")),
                      key=lambda r: (r["n_v"], r["seed"]))
        write_csv(rd / "victim_grid.csv", "victim_grid", rows)
        by_nv = {}
        for r in rows:
            by_nv.setdefault(r["n_v"], []).append(r)
        means = [{"arch": rs[0]["arch"], "dataset": rs[0]["dataset"], "n_v": nv, "seeds": len(rs),
                  "asr_mean": float(np.mean([r["asr"] for r in rs])),
                  "asr_min": float(np.min([r["asr"] for r in rs])),
                  "acc_top1_mean": float(np.mean([r["acc_top1"] for r in rs]))}
                 for nv, rs in sorted(by_nv.items())]
        write_csv(rd / "victim_summary.csv", "victim_summary", means)
        summary["victim"] = means
        if plots:
            from .plots import plot_asr_curve
            plot_asr_curve(rows, rd / "asr_vs_nv.png")

    if "defend" in found:
        units = [read_json(p) for p in sorted((out / "defend" / "units").glob("*.json"))]
        detectors = [{"target": u["target"], "method": u["method"], "statistic": u["statistic"],
                      "threshold": u["threshold"], "direction": u["direction"], "flagged": u["flagged"],
                      "suspect_class": u.get("suspect_class")} for u in units if "statistic" in u]
        removal = [{k: u[k] for k in ("target", "method", "epochs", "clean_samples", "acc_before", "acc_after",
                                      "vanilla_asr_before", "vanilla_asr_after", "victim_asr_after_mean")}
                   for u in units if "statistic" not in u]
        write_csv(rd / "detectors.csv", "detectors", detectors)
        write_csv(rd / "removal.csv", "removal", removal)
        summary["detectors"] = detectors
        summary["removal"] = removal
        entropies = {p.stem.removesuffix("_strip"): dict(np.load(p))
                     for p in sorted((out / "defend" / "units").glob("*_strip.npz"))}
        if plots and entropies:
            from .plots import plot_entropy_histograms
            plot_entropy_histograms(entropies, rd / "strip_entropy.png")

    write_json(rd / "summary.json", summary)
    return summary
