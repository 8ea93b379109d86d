"""Command-line pipeline driver: one binary, eight subcommands.

Each command reads a key=value config file (plus flag overrides), writes its
artifacts into the configured output directory, and echoes the resolved
settings there as effective.cfg. Randomness flows from the single --seed
value, split per stage, so identical inputs and settings reproduce identical
artifacts. Errors derived from QanaError exit with code 2 and a one-line
typed message on stderr.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as runcfg
from . import data, report, synth
from .arch import QanaConfig, build_qana
from .convert import convert, cost_report, verify_conversion
from .errors import ConfigError, DataError, QanaError
from .modelfile import load_model, save_model
from .rng import stage_rng
from .runtime import (ClassThresholds, DecodeConfig, calibrate_thresholds,
                      predict, simulate_many)
from .snn import load_snn, save_snn
from .train import TrainConfig, evaluate, incremental_finetune, train

log = logging.getLogger("qana")


def _class_names(k):
    if k == len(synth.PATTERN_NAMES):
        return synth.PATTERN_NAMES
    return tuple(f"class_{i}" for i in range(k))


def _out_dir(command, cfg, seed):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(runcfg.effective_text(command, cfg, seed))
    return out


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON-serializable: {type(o).__name__}")


def _write_json(path, obj):
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _split_samples(dataset, split):
    samples = dataset.split(split)
    if not samples:
        have = sorted(set(dataset.splits.values()))
        raise DataError(f"split {split!r} has no samples (dataset has: "
                        f"{', '.join(have) or 'none'})")
    return samples


def _pixel_batch(samples):
    x = np.stack([s.pixels for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ====== commands ======

def cmd_synth(cfg, seed):
    if cfg["size_min"] > cfg["size_max"] or cfg["size_min"] < 1:
        raise ConfigError(f"bad raw size range [{cfg['size_min']}, "
                          f"{cfg['size_max']}]")
    out = _out_dir("synth", cfg, seed)
    summary = synth.generate_dataset(
        out, n_majority=cfg["n_majority"], imbalance=cfg["imbalance"],
        seed=seed, size_range=(cfg["size_min"], cfg["size_max"]),
        num_classes=cfg["num_classes"])
    _write_json(out / "summary.json", summary)

    rows = data.load_labels(out / "labels.csv", cfg["num_classes"])
    preview, labels, seen = [], [], {}
    for sid, fname, label in rows:
        if seen.get(label, 0) >= 4:
            continue
        seen[label] = seen.get(label, 0) + 1
        raw = data.load_image(out / "images" / fname)
        preview.append(data.preprocess(raw, label, sid).pixels)
        labels.append(label)
    report.save_sample_grid(out / "preview.png", np.stack(preview), labels,
                            _class_names(cfg["num_classes"]))
    print(f"synth: {summary['total']} images over {cfg['num_classes']} classes "
          f"-> {out} (train/val/test = {summary['train']}/{summary['val']}"
          f"/{summary['test']})")


def cmd_preprocess(cfg, seed):
    out = _out_dir("preprocess", cfg, seed)
    dataset, rejects = data.ingest(cfg["data"], cfg["num_classes"])
    lines = ["source_id,reason"] + [f"{sid},{reason}" for sid, reason in rejects]
    (out / "rejects.csv").write_text("\n".join(lines) + "\n")

    train_samples = dataset.split("train")
    before = np.zeros(cfg["num_classes"], dtype=int)
    for s in train_samples:
        before[s.label] += 1
    added = []
    if cfg["smote"]:
        scfg = data.SmoteConfig(k=cfg["smote_k"], seed=seed,
                                single_lambda=cfg["smote_single_lambda"])
        combined = data.smote_oversample(train_samples, scfg,
                                         cfg["num_classes"],
                                         rng=stage_rng(seed, "smote"))
        added = combined[len(train_samples):]
    splits = dict(dataset.splits)
    for s in added:
        splits[s.source_id] = "train"
    full = data.Dataset(dataset.samples + added, splits)
    data.save_processed(out / "processed.npz", full)
    after = np.zeros(cfg["num_classes"], dtype=int)
    for s in full.split("train"):
        after[s.label] += 1
    _write_json(out / "summary.json", {
        "rejected": len(rejects),
        "kept": len(dataset.samples),
        "synthetic_added": len(added),
        "train_counts_before": before.tolist(),
        "train_counts_after": after.tolist(),
    })
    print(f"preprocess: kept {len(dataset.samples)}, rejected {len(rejects)}, "
          f"added {len(added)} synthetic -> {out / 'processed.npz'}")


def cmd_train(cfg, seed):
    out = _out_dir("train", cfg, seed)
    dataset = data.load_processed(cfg["data"])
    train_samples = _split_samples(dataset, "train")
    val_samples = dataset.split("val") or None
    tcfg = TrainConfig(learning_rate=cfg["learning_rate"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       seed=seed, augment=cfg["augment"])
    if cfg["finetune_model"]:
        model, params, _ = load_model(cfg["finetune_model"])
        history = incremental_finetune(model, params, train_samples, tcfg)
        stage = "finetune"
    else:
        qcfg = QanaConfig(input_shape=train_samples[0].pixels.shape,
                          block_channels=cfg["block_channels"],
                          head_channels=cfg["head_channels"],
                          num_classes=cfg["num_classes"],
                          ghost_ratio=cfg["ghost_ratio"],
                          se_reduction=cfg["se_reduction"],
                          dropout_rate=cfg["dropout"])
        model, params = build_qana(qcfg, stage_rng(seed, "init"))
        history = train(model, params, train_samples, tcfg,
                        val_samples=val_samples)
        stage = "train"
    meta = {"stage": stage, "seed": seed, "epochs": cfg["epochs"],
            "final_train_acc": history[-1]["train_acc"]}
    if "val_acc" in history[-1]:
        meta["final_val_acc"] = history[-1]["val_acc"]
    save_model(out / "model.qana", model, params, meta)
    (out / "history.csv").write_text(report.history_csv(history))
    report.save_training_figure(out / "training.png", history)
    tail = ", ".join(f"{k}={v:.4f}" for k, v in history[-1].items()
                     if k != "epoch")
    print(f"{stage}: {len(history)} epochs on {len(train_samples)} samples "
          f"({tail}) -> {out / 'model.qana'}")


def cmd_eval(cfg, seed):
    out = _out_dir("eval", cfg, seed)
    model, params, _ = load_model(cfg["model"])
    dataset = data.load_processed(cfg["data"])
    samples = _split_samples(dataset, cfg["split"])
    rep = evaluate(model, params, samples, cfg["batch_size"])
    names = _class_names(model.config.num_classes)
    report.save_metrics(out, rep, names)
    report.save_confusion_figure(out / "confusion.png", rep, names)
    report.save_class_metric_figure(out / "class_metrics.png", rep, names)
    _write_json(out / "summary.json", {
        "split": cfg["split"], "n": len(samples), "top1": rep.top1,
        "macro_f1": rep.macro_f1, "macro_auc": rep.macro_auc,
    })
    print(report.metrics_text(rep, names))
    print(f"eval: {cfg['split']} top-1 {rep.top1:.4f}, "
          f"macro F1 {rep.macro_f1:.4f} -> {out}")


def _cost_text(cost):
    head = (f"{'node':<18} {'kind':<12} {'neurons':>9} {'synapses':>10} "
            f"{'est events':>12}")
    lines = [head, "-" * len(head)]
    for row in cost["nodes"]:
        est = f"{row['est_events']:.3g}" if "est_events" in row else "-"
        lines.append(f"{row['name']:<18} {row['kind']:<12} "
                     f"{row['neurons']:>9} {row['synapses']:>10} {est:>12}")
    lines.append("-" * len(head))
    total_est = f"{cost['est_events']:.3g}" if "est_events" in cost else "-"
    lines.append(f"{'total':<18} {'':<12} {cost['neurons']:>9} "
                 f"{cost['synapses']:>10} {total_est:>12}")
    return "\n".join(lines) + "\n"


def cmd_convert(cfg, seed):
    out = _out_dir("convert", cfg, seed)
    model, params, _ = load_model(cfg["model"])
    dataset = data.load_processed(cfg["data"])
    samples = _split_samples(dataset, cfg["split"])
    if cfg["calib_samples"] > 0:
        samples = samples[:cfg["calib_samples"]]
    pixels, _ = _pixel_batch(samples)
    snn, _, _, calib = convert(model, params, pixels, q=cfg["percentile"])
    save_snn(out / "network.qsnn", snn)
    cost = cost_report(snn, calib)
    _write_json(out / "cost.json", cost)
    (out / "cost.txt").write_text(_cost_text(cost))
    _write_json(out / "conversion.json", {
        "nodes": len(snn.nodes),
        "calibration_samples": calib.n_samples,
        "percentile": calib.percentile,
        "logit_offset": calib.logit_offset,
        "logit_range": [calib.logit_lo, calib.logit_hi],
        "stream_offsets": calib.offsets,
    })
    print(f"convert: {len(snn.nodes)} nodes, {cost['neurons']} neurons, "
          f"{cost['synapses']} synapses -> {out / 'network.qsnn'}")


def cmd_verify(cfg, seed):
    out = _out_dir("verify", cfg, seed)
    model, params, _ = load_model(cfg["model"])
    spec = load_snn(cfg["snn"])
    dataset = data.load_processed(cfg["data"])
    samples = _split_samples(dataset, cfg["split"])[:cfg["samples"]]
    pixels, _ = _pixel_batch(samples)
    reports = [verify_conversion(model, params, spec, pixels, T=t)
               for t in cfg["T"]]
    report.save_verify(out, reports)
    report.save_agreement_figure(out / "agreement.png", reports)
    _write_json(out / "verify.json", [r.as_dict() for r in reports])
    print(report.verify_text(reports))
    best = max(reports, key=lambda r: r.T)
    print(f"verify: agreement {best.agreement:.4f} at T={best.T} "
          f"on {best.n} probes -> {out}")


def cmd_calibrate(cfg, seed):
    out = _out_dir("calibrate", cfg, seed)
    spec = load_snn(cfg["snn"])
    dataset = data.load_processed(cfg["data"])
    samples = _split_samples(dataset, cfg["split"])
    if cfg["samples"] > 0:
        samples = samples[:cfg["samples"]]
    pixels, labels = _pixel_batch(samples)
    totals = simulate_many(spec, pixels, cfg["T"])
    thresholds = calibrate_thresholds(totals, labels)
    _write_json(out / "thresholds.json",
                {"T": cfg["T"], "theta": thresholds.theta.tolist()})
    names = _class_names(spec.num_classes)
    report.save_threshold_figure(out / "thresholds.png", thresholds, names)
    decisions = totals > thresholds.theta
    errors = int((decisions != (labels[:, None] == np.arange(spec.num_classes))).sum())
    _write_json(out / "summary.json", {
        "T": cfg["T"], "n": len(samples),
        "decision_errors": errors,
        "theta": thresholds.theta.tolist(),
    })
    print(f"calibrate: thresholds {thresholds.theta.tolist()} "
          f"({errors} decision errors on {len(samples)} samples) -> {out}")


def cmd_infer(cfg, seed):
    out = _out_dir("infer", cfg, seed)
    spec = load_snn(cfg["snn"])
    image_path = Path(cfg["image"])
    raw = data.load_image(image_path)
    sample = data.preprocess(raw, 0, image_path.stem)
    thresholds = None
    if cfg["thresholds"]:
        tpath = Path(cfg["thresholds"])
        if not tpath.exists():
            raise ConfigError(f"thresholds file missing: {tpath}")
        tj = json.loads(tpath.read_text())
        if tj["T"] != cfg["T"]:
            raise ConfigError(f"thresholds were calibrated at T={tj['T']} "
                              f"but this run uses T={cfg['T']}")
        thresholds = ClassThresholds(np.array(tj["theta"], dtype=np.int64))
    dcfg = DecodeConfig(alpha=cfg["alpha"], beta=cfg["beta"], T=cfg["T"])
    result = predict(spec, sample.pixels, dcfg, thresholds=thresholds,
                     trace=cfg["trace"])
    names = _class_names(spec.num_classes)
    _write_json(out / "prediction.json", {
        "image": image_path.name,
        "class_id": result.class_id,
        "class_name": names[result.class_id],
        "probs": result.probs.tolist(),
        "spike_counts": result.totals.tolist(),
        "suppressed": result.suppressed.tolist(),
        "T": cfg["T"],
        "total_events": result.stats["total_events"],
    })
    report.save_count_figure(out / "counts.png", result.totals, result.probs,
                             names)
    if cfg["trace"]:
        rows = ["step,layer,neuron,event"]
        rows += [f"{step},{layer},{neuron},{count}"
                 for step, layer, neuron, count in result.stats["trace_rows"]]
        (out / "trace.csv").write_text("\n".join(rows) + "\n")
    print(f"infer: {image_path.name} -> class {result.class_id} "
          f"({names[result.class_id]}), counts {result.totals.tolist()} "
          f"-> {out / 'prediction.json'}")


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "convert": cmd_convert,
    "verify": cmd_verify,
    "calibrate": cmd_calibrate,
    "infer": cmd_infer,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qana",
        description="Train a compact attention CNN, convert it to an integer "
                    "spiking network, and run event-driven inference.")
    parser.add_argument("command", choices=runcfg.COMMANDS)
    parser.add_argument("--config", metavar="FILE",
                        help="key = value settings file")
    parser.add_argument("--seed", type=int, default=0,
                        help="root seed; every stage derives from it")
    parser.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    parser.add_argument("--T", metavar="N",
                        help="override the simulation window (verify takes a "
                             "comma list)")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("--keys", action="store_true",
                        help="list the command's config keys and exit")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get("QANA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.keys:
        print(f"config keys for {args.command}:")
        print(runcfg.describe(args.command))
        return 0
    try:
        file_kv = runcfg.load_config(args.config) if args.config else {}
        overrides = {"out": args.out, "T": args.T}
        for pair in args.set:
            if "=" not in pair:
                raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
            key, _, value = pair.partition("=")
            overrides[key.strip()] = value.strip()
        cfg = runcfg.resolve(args.command, file_kv, overrides)
        _HANDLERS[args.command](cfg, args.seed)
    except QanaError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
