"""Command-line surface: gendata, train, gridsearch, eval.

Every command echoes its fully resolved configuration into the output
directory before doing any work, and is reproducible: the (config, seed)
pair determines every emitted artifact. Exit codes: 0 ok, 1 runtime
failure, 2 usage/config error.
"""

import argparse
import json
import os
import sys
from collections import OrderedDict

import numpy as np

from . import __version__
from .attention import export_mask
from .checkpoint import load_checkpoint
from .config import ConfigError, build_manifest, build_model_spec, build_train_config, echo_config, load_config
from .kernels import BACKEND
from .metrics import (
    cohens_kappa,
    confusion_matrix,
    ensemble_preactivation,
    format_report,
    localization_score,
    roi_area_fraction,
    select_best_branch,
    write_predictions_csv,
)
from .models import build_model
from .synthdata import build_dataset, dataset_checksum, load_dataset, save_dataset
from .training import evaluate, fit, grid_search_weights, predict

OUT_ROOT_ENV = "KNEEATTN_OUT_ROOT"


def _resolve_out(path):
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _overrides(args):
    ov = {}
    if getattr(args, "seed", None) is not None:
        ov["data.seed"] = args.seed
        ov["train.seed"] = args.seed
        ov["model.seed"] = args.seed
    return ov


def _load_data(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return load_dataset(path)


def cmd_gendata(args):
    cfg = load_config(args.config, _overrides(args))
    out = _resolve_out(args.out or cfg["out_dir"])
    echo_config(cfg, out)
    manifest = build_manifest(cfg)
    samples = build_dataset(manifest)
    save_dataset(samples, manifest, out)

    counts = OrderedDict()
    for s in samples:
        counts.setdefault(s.split, [0] * 5)[s.label] += 1
    print(f"dataset written to {out} ({len(samples)} samples, checksum {dataset_checksum(out)[:12]})")
    for split in ("train", "val", "test"):
        if split in counts:
            print(f"  {split:5s}: total {sum(counts[split]):4d}  per grade {counts[split]}")
    return 0


def _mask_probe(samples):
    """One fixed validation sample per grade, for per-epoch mask exports."""
    probe = []
    seen = set()
    for s in samples:
        if s.split == "val" and s.label not in seen:
            probe.append(s)
            seen.add(s.label)
    return probe


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args))
    out = _resolve_out(args.out or cfg["out_dir"])
    echo_config(cfg, out)
    _, samples = _load_data(args.data)
    spec = build_model_spec(cfg)
    _check_input_size(spec, samples)
    train_config = build_train_config(cfg)
    model = build_model(spec)
    print(f"backbone {spec.backbone} ({model.parameter_count} parameters), kernels: {BACKEND}")

    probe = _mask_probe(samples)
    mask_dir = os.path.join(out, "masks")

    def on_epoch(m, epoch, row):
        preds = predict(m, probe, batch_size=len(probe))
        for bname in m.branches:
            for i, s in enumerate(probe):
                export_mask(
                    preds[bname]["masks"][i], mask_dir,
                    branch=bname, epoch=epoch, sample_id=s.sample_id, image_hw=spec.input_hw,
                )
        print(f"  epoch {epoch:3d}  lr {row['lr']:.2e}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}")

    metrics = fit(model, samples, train_config, out_dir=out, on_epoch=on_epoch)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(metrics.summary(), fh, indent=2)
    print(f"best epoch {metrics.best_epoch} (val loss {metrics.best_val_loss:.4f}); artifacts in {out}")
    return 0


def cmd_gridsearch(args):
    cfg = load_config(args.config, _overrides(args))
    out = _resolve_out(args.out or cfg["out_dir"])
    echo_config(cfg, out)
    _, samples = _load_data(args.data)
    spec = build_model_spec(cfg)
    _check_input_size(spec, samples)
    result = grid_search_weights(
        spec,
        samples,
        build_train_config(cfg),
        w0_grid=tuple(cfg["grid"]["w0"]),
        w1_grid=tuple(cfg["grid"]["w1"]),
        budget_epochs=int(cfg["grid"]["budget_epochs"]),
    )
    result.to_csv(os.path.join(out, "grid.csv"))
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"best_weights": list(result.best_weights), "cells": len(result.rows)}, fh, indent=2)
    print(f"{len(result.rows)} cells searched; best weights {result.best_weights} "
          f"(val loss {result.best_row['val_loss']:.4f}); table in {out}/grid.csv")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config, _overrides(args))
    out = _resolve_out(args.out or cfg["out_dir"])
    echo_config(cfg, out)
    _, samples = _load_data(args.data)
    spec = build_model_spec(cfg)
    _check_input_size(spec, samples)
    model = build_model(spec)
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model.load_state(load_checkpoint(args.checkpoint))

    batch = int(cfg["eval"]["batch_size"])
    val = [s for s in samples if s.split == "val"]
    test = [s for s in samples if s.split == "test"]
    test_labels = np.array([s.label for s in test])

    val_metrics = evaluate(model, val, batch_size=batch)
    test_metrics = evaluate(model, test, batch_size=batch)
    preds = predict(model, test, batch_size=batch)

    heads = [n for n in val_metrics["heads"]]
    best = select_best_branch(OrderedDict((n, val_metrics["heads"][n]) for n in heads))
    lines = [f"kneeattn evaluation ({spec.backbone}, fusion={spec.fusion}, kernels={BACKEND})",
             f"parameters: {model.parameter_count}", ""]

    for name in heads:
        probs = preds[name]["probs"] if name != "fused" else preds["fused"]["probs"]
        cm = confusion_matrix(test_labels, probs.argmax(axis=1), spec.classes)
        kappa, band = cohens_kappa(cm)
        marker = "  <- selected on validation" if name == best else ""
        lines.append(
            f"{name}: test acc {test_metrics['heads'][name]['acc']:.4f}  "
            f"loss {test_metrics['heads'][name]['loss']:.4f}  kappa {kappa:.4f} ({band}){marker}"
        )
        write_predictions_csv(
            os.path.join(out, f"predictions_{name}.csv"), [s.sample_id for s in test], test_labels, probs
        )

    if cfg["eval"]["ensemble"] and len([n for n in heads if n != "fused"]) >= 2:
        logit_sets = [preds[n]["logits"] for n in heads if n != "fused"]
        fused = ensemble_preactivation(logit_sets)
        cm = confusion_matrix(test_labels, fused.argmax(axis=1), spec.classes)
        kappa, band = cohens_kappa(cm)
        acc = float((fused.argmax(axis=1) == test_labels).mean())
        lines.append(f"ensemble (mean pre-activation): test acc {acc:.4f}  kappa {kappa:.4f} ({band})")
        write_predictions_csv(
            os.path.join(out, "predictions_ensemble.csv"), [s.sample_id for s in test], test_labels, fused
        )

    # unsupervised localization: mask mass inside the generator's ROI
    lines.append("")
    loc_summary = {}
    for bname in model.branches:
        scores = [
            localization_score(preds[bname]["masks"][i], s.roi, spec.input_hw) for i, s in enumerate(test)
        ]
        baseline = [roi_area_fraction(s.roi, spec.input_hw) for s in test]
        loc_summary[bname] = {
            "mean_score": float(np.mean(scores)),
            "median_score": float(np.median(scores)),
            "uniform_baseline": float(np.mean(baseline)),
        }
        lines.append(
            f"localization {bname}: mean {np.mean(scores):.4f}  median {np.median(scores):.4f}  "
            f"uniform baseline {np.mean(baseline):.4f}"
        )

    n_export = int(cfg["eval"]["export_masks"])
    if n_export > 0:
        mask_dir = os.path.join(out, "masks")
        for bname in model.branches:
            for i, s in enumerate(test[:n_export]):
                export_mask(preds[bname]["masks"][i], mask_dir, branch=bname, epoch=0,
                            sample_id=s.sample_id, image_hw=spec.input_hw)

    best_probs = preds[best]["probs"] if best != "fused" else preds["fused"]["probs"]
    cm_best = confusion_matrix(test_labels, best_probs.argmax(axis=1), spec.classes)
    report = format_report(
        f"selected head: {best}",
        cm_best,
        extras={"parameters": model.parameter_count, **{f"loc_{k}": v for k, v in loc_summary.items()}},
    )
    text = "\n".join(lines) + "\n\n" + report
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def _check_input_size(spec, samples):
    got = samples[0].image.shape[:2]
    if tuple(spec.input_hw) != tuple(got):
        raise ValueError(f"model input size {spec.input_hw} does not match dataset images {got}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="kneeattn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gendata", help="generate the synthetic dataset")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.set_defaults(fn=cmd_gendata)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", required=True, help="dataset directory from gendata")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gridsearch", help="2-D loss-weight grid search")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gridsearch)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
