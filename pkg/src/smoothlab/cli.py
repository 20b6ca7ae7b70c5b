"""Command-line pipeline driver.

    lab <gen-data|pretrain|finetune|certify|report|ablate>
        --config <path> [--out <dir>] [--seed <u64>] [--override key=value ...]

One config file drives every stage; artifacts land in the output directory
and are byte-identical across re-runs with the same inputs.  Exit codes:
0 success, 2 configuration error, 3 missing prerequisite, 4 numeric failure.
``LAB_THREADS`` caps certification worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ftcadis, net, plots, world
from .certify import EvalReport, MixturePipeline, evaluate
from .config import (ConfigError, ExperimentConfig, MissingArtifactError, load_config,
                     method_label)
from .net import NonFiniteError
from .numerics import RngStream

REPORT_FORMAT_VERSION = 1


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _load_dataset(cfg: ExperimentConfig):
    path = _require(cfg.output_dir / "dataset.json", "dataset file")
    saved_world, splits = world.load_datasets(path)
    return saved_world, splits


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("LAB_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig) -> None:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    root = RngStream(cfg.seed).child("data")
    train = world.sample_dataset(cfg.world, cfg.data.n_train, root.child("train"))
    test = world.sample_dataset(cfg.world, cfg.data.n_test, root.child("test"))
    path = cfg.output_dir / "dataset.json"
    world.save_datasets(path, cfg.world, {"train": train, "test": test})
    acc = world.bayes_accuracy(cfg.world, train)
    print(f"wrote {path}: n_train={len(train)} n_test={len(test)} "
          f"K={cfg.world.num_classes} d={cfg.world.dim} bayes_accuracy={acc:.4f}")


def cmd_pretrain(cfg: ExperimentConfig) -> None:
    saved_world, splits = _load_dataset(cfg)
    clf, accuracy = ftcadis.pretrain(
        splits["train"], cfg.net, epochs=cfg.pretrain.epochs, lr=cfg.pretrain.lr,
        seed=cfg.seed, weight_decay=cfg.pretrain.weight_decay,
        batch_size=cfg.pretrain.batch_size)
    path = cfg.output_dir / "pretrained.json"
    net.save_checkpoint(clf, path)
    print(f"wrote {path}: clean train accuracy {accuracy:.4f}")


def _train_report_rows(report: ftcadis.TrainReport) -> tuple[list[str], list[list]]:
    header = ["epoch", "sce", "madv", "total", "mask_ratio", "cold_start_ratio",
              "nh_histogram"]
    rows = [[e.epoch, e.sce, e.madv, e.total, e.mask_ratio, e.cold_start_ratio,
             "|".join(str(c) for c in e.nh_histogram)] for e in report.epochs]
    return header, rows


def cmd_finetune(cfg: ExperimentConfig) -> None:
    saved_world, splits = _load_dataset(cfg)
    clf = net.load_checkpoint(_require(cfg.output_dir / "pretrained.json",
                                       "pretrained checkpoint"))
    if cfg.lora is not None:
        clf = net.attach_adapters(clf, cfg.lora, cfg.seed)
    schedule = cfg.schedule.build()
    label = method_label(cfg.finetune)
    if cfg.lora is not None:
        label += "_lora" 
    try:
        tuned, report = ftcadis.finetune(clf, splits["train"], cfg.finetune,
                                         saved_world, schedule)
    except ftcadis.NonFiniteLossError as exc:
        net.save_checkpoint(exc.last_good, cfg.output_dir / f"ckpt_{label}.last_good.json")
        raise
    net.save_checkpoint(tuned, cfg.output_dir / f"ckpt_{label}.json")
    _write_json(cfg.output_dir / f"train_report_{label}.json", report.to_dict())
    header, rows = _train_report_rows(report)
    _write_csv(cfg.output_dir / f"train_report_{label}.csv", header, rows)
    final = report.epochs[-1] if report.epochs else None
    mask = f" mask_ratio={final.mask_ratio:.3f}" if final else ""
    print(f"wrote ckpt_{label}.json ({len(report.epochs)} epochs){mask}")


def _eval_paths(out: Path, label: str) -> tuple[Path, Path, Path]:
    return (out / f"eval_{label}.json",
            out / f"eval_{label}_samples.csv",
            out / f"eval_{label}_accuracy.csv")


def _write_eval(out: Path, label: str, report: EvalReport) -> None:
    json_path, samples_path, accuracy_path = _eval_paths(out, label)
    doc = report.to_dict()
    doc["method"] = label
    _write_json(json_path, doc)
    _write_csv(samples_path,
               ["index", "label", "prediction", "p_lower", "radius"],
               [[i, report.labels[i], report.predictions[i], report.p_lowers[i],
                 report.radii[i]] for i in range(len(report.labels))])
    _write_csv(accuracy_path, ["radius", "certified_accuracy"],
               [[r, v] for r, v in sorted(report.certified_accuracy.items())])


def cmd_certify(cfg: ExperimentConfig) -> None:
    saved_world, splits = _load_dataset(cfg)
    ckpt_name = cfg.certify_checkpoint or f"ckpt_{method_label(cfg.finetune)}.json"
    ckpt_path = _require(cfg.output_dir / ckpt_name, "classifier checkpoint")
    label = cfg.certify_label
    if label is None:
        stem = ckpt_path.stem
        label = stem[5:] if stem.startswith("ckpt_") else stem
    clf = net.load_checkpoint(ckpt_path)
    schedule = cfg.schedule.build()
    pipeline = MixturePipeline(saved_world, schedule, clf)
    test = splits["test"]
    report = evaluate(pipeline, test, cfg.certify, RngStream(cfg.seed).child("certify"),
                      workers=_workers())
    _write_eval(cfg.output_dir, label, report)
    print(f"certified {len(test)} points as {label}: ACR={report.acr:.4f} "
          f"clean_acc={report.clean_accuracy:.4f} abstain={report.abstain_rate:.3f}")


def _report_rows(out: Path) -> list[dict]:
    rows = []
    for path in sorted(out.glob("eval_*.json")):
        doc = json.loads(path.read_text())
        rows.append({
            "method": doc.get("method", path.stem[5:]),
            "sigma": doc["sigma"],
            "acr": doc["acr"],
            "clean_accuracy": doc["clean_accuracy"],
            "abstain_rate": doc["abstain_rate"],
            "certified_accuracy": {float(r): v for r, v in doc["certified_accuracy"].items()},
        })
    return rows


def cmd_report(cfg: ExperimentConfig) -> None:
    out = cfg.output_dir
    rows = _report_rows(out)
    if not rows:
        raise MissingArtifactError(f"no eval_*.json files found in {out}")
    grid = sorted({r for row in rows for r in row["certified_accuracy"]})
    header = ["method", "sigma", "acr", "clean_accuracy", "abstain_rate"] + \
             [f"acc@{r:g}" for r in grid]
    table = [[row["method"], row["sigma"], row["acr"], row["clean_accuracy"],
              row["abstain_rate"]] + [row["certified_accuracy"].get(r, "") for r in grid]
             for row in rows]
    _write_csv(out / "report.csv", header, table)
    _write_json(out / "report.json", {
        "format_version": REPORT_FORMAT_VERSION, "kind": "report", "rows": [
            {k: row[k] for k in ("method", "sigma", "acr", "clean_accuracy", "abstain_rate")}
            | {"certified_accuracy": {repr(r): v for r, v in row["certified_accuracy"].items()}}
            for row in rows
        ]})
    plots.certified_accuracy_figure(rows, out / "report_certified_accuracy.png")
    curves = {}
    for path in sorted(out.glob("train_report_*.json")):
        doc = json.loads(path.read_text())
        curves[path.stem[len("train_report_"):]] = [e["mask_ratio"] for e in doc["epochs"]]
    if curves:
        plots.mask_ratio_figure(curves, out / "report_mask_ratio.png")
    print(f"wrote report.csv ({len(rows)} rows) and figures in {out}")


_ABLATE_VARIANTS = {
    "ours": lambda c: c,
    "no_selection": lambda c: replace(c, sce_selection=False),
    "no_mask": lambda c: replace(c, madv_mask=False),
    "hard_label_max": lambda c: replace(c, adv_variant="hard_label_max"),
    "soft_label_avg": lambda c: replace(c, adv_variant="soft_label_avg"),
    "hard_label_avg": lambda c: replace(c, adv_variant="hard_label_avg"),
    "frozen_selection": lambda c: replace(c, update_selection=False),
    "ce_baseline": ftcadis.ce_baseline_config,
}


def cmd_ablate(cfg: ExperimentConfig) -> None:
    saved_world, splits = _load_dataset(cfg)
    clf = net.load_checkpoint(_require(cfg.output_dir / "pretrained.json",
                                       "pretrained checkpoint"))
    if cfg.lora is not None:
        clf = net.attach_adapters(clf, cfg.lora, cfg.seed)
    schedule = cfg.schedule.build()
    test = splits["test"]
    grid = cfg.certify.radius_grid
    run_rows = []
    summary_rows = []
    for variant in cfg.ablate.variants:
        if variant not in _ABLATE_VARIANTS:
            raise ConfigError(f"ablate.variants: unknown variant {variant!r}")
        per_seed = []
        for seed in cfg.ablate.seeds:
            ft_cfg = replace(_ABLATE_VARIANTS[variant](cfg.finetune), seed=int(seed))
            tuned, _ = ftcadis.finetune(clf, splits["train"], ft_cfg, saved_world, schedule)
            pipeline = MixturePipeline(saved_world, schedule, tuned)
            report = evaluate(pipeline, test, cfg.certify,
                              RngStream(cfg.seed).child("ablate-certify", int(seed)),
                              workers=_workers())
            per_seed.append(report)
            run_rows.append([variant, cfg.certify.sigma, int(seed), report.acr,
                             report.clean_accuracy, report.abstain_rate] +
                            [report.certified_accuracy[r] for r in grid])
            print(f"ablate {variant} seed={seed}: ACR={report.acr:.4f}")
        acrs = [r.acr for r in per_seed]
        summary_rows.append(
            [variant, cfg.certify.sigma, len(acrs), float(np.mean(acrs)),
             float(np.max(acrs) - np.min(acrs))] +
            [float(np.mean([r.certified_accuracy[g] for r in per_seed])) for g in grid])
    acc_cols = [f"acc@{g:g}" for g in grid]
    _write_csv(cfg.output_dir / "ablation_runs.csv",
               ["variant", "sigma", "seed", "acr", "clean_accuracy", "abstain_rate"] + acc_cols,
               run_rows)
    _write_csv(cfg.output_dir / "ablation.csv",
               ["variant", "sigma", "n_seeds", "acr_mean", "acr_spread"] +
               [f"{c}_mean" for c in acc_cols],
               summary_rows)
    print(f"wrote ablation.csv ({len(summary_rows)} variants)")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "certify": cmd_certify,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the experiment YAML")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--seed", type=int, default=None, help="override top-level seed")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.override, out=args.out,
                          seed=args.seed)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
