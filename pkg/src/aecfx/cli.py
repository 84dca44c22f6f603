"""Command-line pipeline: synth, prepare, train, detect, explain, evaluate.

Output tree under the run's output directory::

    prepared/{train,valid,test}/   window sets
    prepared/norm_stats.json       min-max statistics of the train split
    prepared/manifest.json         which file rows went where
    models/model.aecfx             trained auto-encoder
    models/history.csv             per-epoch losses
    reports/profile.json           threshold and validation statistics
    reports/detection.json         F1, recall, FPR and confusion counts
    reports/detection_windows.csv  per-window score, label, prediction
    explanations/<method>/records.txt   per-window explanation records
    explanations/<method>/metrics.json  validity, sparsity, distance
    reports/explanations.csv/.json      method comparison table
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, detector, evalx, explainer, synth
from .autoencoder import build_model, load_model, save_model, train
from .config import RunConfig, load_config
from .exceptions import AecfxError, ConfigurationError, DataError

logger = logging.getLogger("aecfx")

MODEL_FILE = "models/model.aecfx"


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def _split_rows(series: dataio.SeriesFile, normal_only: bool, fraction: float):
    """Chronological split of the usable rows into train and valid row masks."""
    usable = np.ones(len(series), dtype=bool)
    if normal_only:
        if series.labels is None:
            raise DataError(f"{series.path}: normal_only requires a label column")
        usable = series.labels == 0
    idx = np.flatnonzero(usable)
    cut = int(round(fraction * len(idx)))
    train_mask = np.zeros(len(series), dtype=bool)
    valid_mask = np.zeros(len(series), dtype=bool)
    train_mask[idx[:cut]] = True
    valid_mask[idx[cut:]] = True
    return train_mask, valid_mask


def _relative(path: Path, base: Path) -> str:
    try:
        return Path(path).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(path)


def _segments(series, mask):
    return [series.slice(a, b) for a, b in dataio.contiguous_runs(mask)]


def cmd_prepare(cfg: RunConfig) -> dict:
    cfg.check_inputs()
    schemas = {g.name: dataio.load_schema(cfg.group_schema_path(g)) for g in cfg.groups}
    channels = {s.channels for s in schemas.values()}
    if len(channels) != 1:
        raise ConfigurationError("all group schemas must list the same channels in the same order")
    (channels,) = channels
    data_dir = cfg.resolve(cfg.data_dir)
    parts = {"train": [], "valid": [], "test": []}
    manifest = {"train": [], "valid": [], "test": []}
    for group in cfg.groups:
        frac = group.train_fraction or cfg.train_fraction
        for path in cfg.group_files(group):
            series = dataio.load_series(path, schemas[group.name])
            # provenance is kept relative to the data directory so that runs
            # are comparable wherever the data lives
            series.path = _relative(path, data_dir)
            if group.role == "test":
                parts["test"].append(series)
                manifest["test"].append({"file": series.path, "rows": [[0, len(series)]]})
                continue
            if group.role == "train_valid":
                tmask, vmask = _split_rows(series, group.normal_only, frac)
                masks = {"train": tmask, "valid": vmask}
            else:
                tmask, vmask = _split_rows(series, group.normal_only, 0.5)
                masks = {group.role: tmask | vmask}
            for role, mask in masks.items():
                segs = _segments(series, mask)
                parts[role].extend(segs)
                manifest[role].append(
                    {"file": series.path, "rows": [[s.offset, s.offset + len(s)] for s in segs]}
                )
    for role in ("train", "valid", "test"):
        if not parts[role]:
            raise DataError(f"the {role} split is empty; check the groups in the config")
    stats = dataio.fit_norm(parts["train"])
    out = cfg.out / "prepared"
    counts = {}
    for role, segs in parts.items():
        sets = []
        for seg in segs:
            seg = dataio.apply_norm(seg, stats)
            ws = dataio.make_windows(seg, cfg.window_length, cfg.window_stride, cfg.label_rule)
            if role != "test":
                ws.labels = np.zeros(len(ws), dtype=np.int8)
            sets.append(ws)
        merged = dataio.concat_windowsets(sets, cfg.window_length, channels, cfg.window_stride, cfg.label_rule)
        if len(merged) == 0:
            raise DataError(f"the {role} split yields no windows of length {cfg.window_length}")
        merged.save(out / role)
        counts[role] = len(merged)
    _write_json(out / "norm_stats.json", stats.to_dict())
    _write_json(out / "manifest.json", {"counts": counts, "splits": manifest})
    logger.info("prepared windows: %s", counts)
    return counts


def _load_prepared(cfg: RunConfig, role: str) -> dataio.WindowSet:
    d = cfg.out / "prepared" / role
    if not (d / "meta.json").exists():
        raise DataError(f"no prepared {role} windows in {d}; run 'aecfx prepare' first")
    return dataio.WindowSet.load(d)


def _model_path(cfg: RunConfig, model: str | None) -> Path:
    return Path(model) if model else cfg.out / MODEL_FILE


def cmd_train(cfg: RunConfig, model_path: str | None = None) -> Path:
    tr = _load_prepared(cfg, "train")
    va = _load_prepared(cfg, "valid")
    n, length = tr.windows.shape[1:]
    model = build_model(cfg.architecture, n, length, seed=cfg.seed, **cfg.arch_options)
    logger.info("training %s model (%d parameters) on %d windows", cfg.architecture, model.n_parameters, len(tr))
    model, history = train(model, tr.windows, va.windows, cfg.train, log_every=1)
    path = save_model(model, _model_path(cfg, model_path), cfg.train)
    hist = cfg.out / "models" / "history.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "valid_loss"])
        for row in zip(history["epoch"], history["train_loss"], history["valid_loss"]):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    return path


def _require_model(cfg: RunConfig, model_path: str | None):
    path = _model_path(cfg, model_path)
    if not path.exists():
        raise DataError(f"model file {path} not found; run 'aecfx train' first")
    return load_model(path)


def cmd_detect(cfg: RunConfig, model_path: str | None = None) -> detector.DetectionReport:
    model = _require_model(cfg, model_path)
    va = _load_prepared(cfg, "valid")
    te = _load_prepared(cfg, "test")
    profile = detector.calibrate(model, va, cfg.k)
    report = detector.classify(model, profile, te)
    rep = cfg.out / "reports"
    _write_json(rep / "profile.json", profile.to_dict())
    report.write_json(rep / "detection.json")
    report.write_rows(rep / "detection_windows.csv")
    logger.info("detection: %s", json.dumps(report.to_dict()))
    return report


def _load_detection(cfg: RunConfig):
    rep = cfg.out / "reports"
    if not (rep / "profile.json").exists() or not (rep / "detection_windows.csv").exists():
        raise DataError(f"no detection results in {rep}; run 'aecfx detect' first")
    profile = detector.DetectorProfile.from_dict(json.loads((rep / "profile.json").read_text()))
    with open(rep / "detection_windows.csv", newline="") as fh:
        preds = np.array([int(r["prediction"]) for r in csv.DictReader(fh)], dtype=bool)
    return profile, preds


def cmd_explain(cfg: RunConfig, method: str, model_path: str | None = None) -> evalx.ExplanationMetrics:
    if method not in explainer.METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {explainer.METHODS}")
    model = _require_model(cfg, model_path)
    profile, preds = _load_detection(cfg)
    te = _load_prepared(cfg, "test")
    if len(preds) != len(te):
        raise DataError("detection results do not match the prepared test set; rerun 'aecfx detect'")
    flagged = te.subset(preds)
    exps = explainer.explain_windows(
        model, profile, flagged.windows, method, cfg.explainer, flagged.provenance,
        check_flagged=False,
    )
    d = cfg.out / "explanations" / method
    explainer.write_explanations(exps, d / "records.txt", cfg.epsilon)
    metrics = evalx.evaluate_explanations(
        exps, model, profile.threshold, cfg.epsilon, method,
        flagged_labels=flagged.labels if flagged.labels is not None and len(exps) else None,
    )
    _write_json(d / "metrics.json", metrics.to_dict())
    logger.info("%s: %s", method, json.dumps(metrics.to_dict()))
    return metrics


def cmd_evaluate(cfg: RunConfig, model_path: str | None = None) -> list[evalx.ExplanationMetrics]:
    """Recompute the comparison table from every method's exported records."""
    model = _require_model(cfg, model_path)
    profile, _ = _load_detection(cfg)
    te = _load_prepared(cfg, "test")
    label_of = {p: lab for p, lab in zip(te.provenance, te.labels)} if te.labels is not None else {}
    rows = []
    for method in explainer.METHODS:
        path = cfg.out / "explanations" / method / "records.txt"
        if not path.exists():
            continue
        exps = explainer.read_explanations(path)
        labels = [label_of[e.provenance] for e in exps] if label_of and exps else None
        rows.append(evalx.evaluate_explanations(exps, model, profile.threshold, cfg.epsilon, method, labels))
    if not rows:
        raise DataError("no explanation records found; run 'aecfx explain' first")
    rep = cfg.out / "reports"
    evalx.write_metrics_table(rows, rep / "explanations.csv")
    evalx.write_metrics_json(rows, rep / "explanations.json")
    return rows


def cmd_synth(cfg: RunConfig | None, out: str | None = None) -> dict:
    scfg = cfg.synth if cfg is not None else synth.SynthConfig()
    if out is None:
        if cfg is None:
            raise ConfigurationError("synth needs --out or --config")
        out = cfg.resolve(cfg.data_dir)
    return synth.write_dataset(out, scfg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aecfx", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    verbs = {
        "prepare": "load, split, normalize and window the data files",
        "train": "train the auto-encoder on the prepared windows",
        "detect": "calibrate the threshold and classify the test windows",
        "explain": "explain every flagged test window with one method",
        "evaluate": "tabulate validity, sparsity and distance per method",
        "synth": "write the synthetic scenario's data files",
        "run": "prepare, train, detect, explain and evaluate in one go",
    }
    for name, text in verbs.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=name != "synth", help="run config (YAML)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (data directory for synth)")
        if name in ("train", "detect", "explain", "evaluate", "run"):
            sp.add_argument("--model", help=f"model file (default <out>/{MODEL_FILE})")
        if name in ("explain", "run"):
            sp.add_argument("--method", default="ours" if name == "explain" else "all",
                            help="ours, counterfactual, reconstruction" + (" or all" if name == "run" else ""))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = None
        if args.config:
            out = args.out if args.command != "synth" else None
            cfg = load_config(args.config, seed=args.seed, output_dir=out)
        model = getattr(args, "model", None)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg, model)
        elif args.command == "detect":
            cmd_detect(cfg, model)
        elif args.command == "explain":
            cmd_explain(cfg, args.method, model)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, model)
        elif args.command == "run":
            cmd_prepare(cfg)
            cmd_train(cfg, model)
            cmd_detect(cfg, model)
            methods = explainer.METHODS if args.method == "all" else (args.method,)
            for m in methods:
                cmd_explain(cfg, m, model)
            cmd_evaluate(cfg, model)
    except (AecfxError, OSError) as exc:
        print(f"aecfx {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
