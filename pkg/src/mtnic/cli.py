"""Command-line front end.

    mtnic [--config FILE] [--seed N] [--out-dir DIR] [--threads N] [--set sec.key=val ...] COMMAND

Commands: gen-data, train-encoder, compress, train-wsi, evaluate, ablate.
Each run writes into ``<out_dir>/<command>-<digest>`` where the digest covers
the resolved configuration, and archives that configuration as
``config.ini``. The run directory is printed on stdout.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (NaN or Inf).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import config as config_mod
from . import metrics, pipeline, survival, synthdata
from .autodiff import NumericError, checkpoint
from .compression import CompressionError, compress, read_nicw, write_nicw
from .config import ConfigError, RunConfig
from .models import CANONICAL_TASKS, TASK_NAMES, EncoderSpec, ParamStore, WsiCnnSpec, init_encoder, init_head, pad_grid, spec_to_dict
from .synthdata import PatchDataset
from .training import predict, train_multitask

log = logging.getLogger("mtnic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    code = EXIT_DATA


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require_dir(value: str, key: str) -> Path:
    if not value:
        raise ConfigError(f"{key} is required")
    path = Path(value)
    if not path.is_dir():
        raise ConfigError(f"{key}: no such directory {value}")
    return path


def _require_file(value: str, key: str) -> Path:
    if not value:
        raise ConfigError(f"{key} is required")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{key}: no such file {value}")
    return path


def run_dir(cfg: RunConfig, command: str) -> Path:
    digest = hashlib.sha256(f"{command}\n{cfg.digest()}".encode()).hexdigest()[:12]
    out = Path(cfg["run"]["out_dir"]) / f"{command}-{digest}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(f"# command: {command}\n" + cfg.to_text())
    return out


# -- gen-data -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> Path:
    """Synthetic patch tasks (.npz), mini-WSIs (.ppm), labels and a survival cohort."""
    d, seed = cfg["data"], cfg["run"]["seed"]
    out = run_dir(cfg, "gen-data")
    (out / "patches").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    for name, ds in synthdata.gen_patch_tasks(seed, d["patches_per_task"], d["patch_size"]).items():
        to_u8 = lambda x: np.round(x * 255.0).astype(np.uint8)
        np.savez(out / "patches" / f"{name}.npz", train_x=to_u8(ds.train_x), train_y=ds.train_y, val_x=to_u8(ds.val_x), val_y=ds.val_y)
    ids, labels = [], []
    for i in range(d["n_images"]):
        wsi = synthdata.gen_mini_wsi(seed * 100003 + i, d["grid"], d["patch_size"])
        ids.append(f"wsi_{i:04d}")
        labels.append(wsi.label)
        synthdata.write_ppm(out / "images" / f"{ids[-1]}.ppm", wsi.image)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "target", "label", "risk"])
        for i, lab in zip(ids, labels):
            w.writerow([i, repr(lab.target), lab.label, repr(lab.risk)])
    survival.write_cohort_csv(out / "cohort.csv", ids, synthdata.gen_survival(seed, labels, d["censor_rate"]))
    return out


# -- train-encoder --------------------------------------------------------------


def load_patch_dataset(path: Path, name: str, n_classes: int) -> PatchDataset:
    try:
        with np.load(path) as z:
            arrays = {k: z[k] for k in ("train_x", "train_y", "val_x", "val_y")}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: not a patch dataset ({exc})") from None
    to_f = lambda x: x.astype(np.float64) / 255.0 if x.dtype == np.uint8 else x.astype(np.float64)
    return PatchDataset(name, n_classes, to_f(arrays["train_x"]), arrays["train_y"].astype(int), to_f(arrays["val_x"]), arrays["val_y"].astype(int))


def cmd_train_encoder(cfg: RunConfig) -> Path:
    """Multitask training of the encoder on ``<dataset_dir>/<task>.npz``; writes NICP checkpoints."""
    tasks = cfg["encoder"]["tasks"]
    root = _require_dir(cfg["encoder"]["dataset_dir"], "encoder.dataset_dir")
    paths = {t: root / f"{t}.npz" for t in tasks}
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise ConfigError(f"encoder.dataset_dir lacks task datasets: {', '.join(missing)}")
    spec = cfg.encoder_spec()
    classes = {t.name: t.class_count for t in CANONICAL_TASKS}
    datasets = {t: load_patch_dataset(paths[t], t, classes[t]) for t in tasks}
    for t, ds in datasets.items():
        if ds.train_x.shape[1:] != (spec.input_size, spec.input_size, spec.channels):
            raise DataError(f"task {t}: patches are {ds.train_x.shape[1:]}, encoder expects {spec.input_size}px RGB")
    out = run_dir(cfg, "train-encoder")
    rng = np.random.default_rng([cfg["run"]["seed"], 41])
    params = init_encoder(spec, rng)
    heads = {t.name: (cfg.head_spec(t.class_count), None) for t in CANONICAL_TASKS}
    heads = {n: (hs, init_head(hs, rng)) for n, (hs, _) in heads.items()}
    history = train_multitask(spec, params, heads, datasets, cfg.encoder_train_config())
    history.to_csv(out / "history.csv")
    checkpoint.save(out / "encoder.nicp", params.state())
    head_state = {f"{n}/{k}": v for n, (_, hp) in heads.items() for k, v in hp.state().items()}
    checkpoint.save(out / "heads.nicp", head_state)
    meta = {"spec": spec_to_dict(spec), "tasks": list(tasks), "sha256": _sha256(out / "encoder.nicp")}
    (out / "encoder.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def load_encoder(path: Path):
    """Returns (spec, params, expected_sha256, actual_sha256)."""
    meta_path = path.with_suffix(".json")
    if not meta_path.is_file():
        raise ConfigError(f"encoder metadata {meta_path} not found next to checkpoint")
    try:
        meta = json.loads(meta_path.read_text())
        spec = EncoderSpec(**meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{meta_path}: invalid encoder metadata ({exc})") from None
    params = ParamStore.from_state(checkpoint.load(path))
    return spec, params, meta.get("sha256", ""), _sha256(path)


# -- compress ------------------------------------------------------------------


def cmd_compress(cfg: RunConfig) -> Path:
    """One NICW per ``*.ppm`` in ``compress.images_dir`` plus ``manifest.csv``."""
    c = cfg["compress"]
    ckpt = _require_file(c["checkpoint"], "compress.checkpoint")
    images = sorted(_require_dir(c["images_dir"], "compress.images_dir").glob("*.ppm"))
    if not images:
        raise DataError(f"no .ppm images in {c['images_dir']}")
    spec, params, expected, actual = load_encoder(ckpt)
    warning = "" if expected == actual else f"checkpoint digest mismatch: expected {expected}, found {actual}"
    if warning:
        log.warning(warning)
    out = run_dir(cfg, "compress")
    (out / "nicw").mkdir(exist_ok=True)
    rows = []
    for img in images:
        ci = compress(img, spec, params, stride=c["stride"] or None, tissue_threshold=c["tissue_threshold"],
                      workers=cfg["run"]["threads"], digest=bytes.fromhex(actual))
        blob = write_nicw(ci, out / "nicw" / f"{img.stem}.nicw")
        rows.append([img.stem, ci.rows, ci.cols, ci.code_size, int(ci.validity.sum()), hashlib.sha256(blob).hexdigest(), actual, warning])
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "rows", "cols", "code_size", "valid_cells", "nicw_sha256", "encoder_sha256", "warning"])
        w.writerows(rows)
    return out


# -- train-wsi -----------------------------------------------------------------


def load_grids(folder: Path, ids: Optional[Sequence[str]] = None):
    files = sorted(folder.glob("*.nicw"))
    if ids is not None:
        by_id = {f.stem: f for f in files}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"no NICW file for {len(missing)} id(s), e.g. {missing[0]}")
        files = [by_id[i] for i in ids]
    if not files:
        raise DataError(f"no .nicw files in {folder}")
    grids = [read_nicw(f) for f in files]
    codes = {g.code_size for g in grids}
    if len(codes) != 1:
        raise DataError(f"mixed code sizes {sorted(codes)}")
    return [f.stem for f in files], grids


def stack_padded(grids, multiple: int, rows: int = 0, cols: int = 0) -> np.ndarray:
    """Zero-pad every grid to a common size that is a multiple of ``multiple``."""
    up = lambda n: -(-n // multiple) * multiple
    rows = max([rows] + [up(g.rows) for g in grids])
    cols = max([cols] + [up(g.cols) for g in grids])
    out = np.zeros((len(grids), rows, cols, grids[0].code_size))
    for i, g in enumerate(grids):
        emb = np.where(g.validity[..., None], g.embeddings.astype(np.float64), 0.0)
        padded, _ = pad_grid(emb, multiple)
        out[i, : padded.shape[0], : padded.shape[1]] = padded
    return out


def read_labels_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "image_id" not in rows[0]:
        raise DataError(f"{path}: expected columns image_id,target,label")
    return rows


def cmd_train_wsi(cfg: RunConfig) -> Path:
    """Cross-validated image-level training; per-fold NICP checkpoints and out-of-fold predictions."""
    w = cfg["wsi"]
    objective = w["objective"]
    folder = _require_dir(w["nicw_dir"], "wsi.nicw_dir")
    if objective == "cox":
        ids, records, _ = survival.read_cohort_csv(_require_file(w["cohort_csv"], "wsi.cohort_csv"))
        targets, label_col = records, [int(r.event) for r in records]
        pattern = ("train", "val", "test")
    else:
        rows = read_labels_csv(_require_file(w["labels_csv"], "wsi.labels_csv"))
        ids = [r["image_id"] for r in rows]
        col = "target" if objective == "mse" else "label"
        try:
            targets = np.array([float(r[col]) for r in rows]) if objective == "mse" else np.array([int(r[col]) for r in rows])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{w['labels_csv']}: bad {col} column ({exc})") from None
        label_col = targets.tolist()
        pattern = ("train", "val")
    ids, grids = load_grids(folder, ids)
    spec = cfg.wsi_spec(grids[0].code_size)
    if objective == "ce" and (targets.min() < 0 or targets.max() >= spec.n_classes):
        raise DataError(f"class labels must lie in [0,{spec.n_classes})")
    x = stack_padded(grids, spec.grid_multiple)
    out = run_dir(cfg, "train-wsi")
    cv = pipeline.cross_validate(x, targets, objective, spec, cfg.wsi_train_config(), w["folds"], pattern, cfg["run"]["seed"])
    (out / "wsi.json").write_text(json.dumps({"spec": spec_to_dict(spec), "objective": objective, "grid": list(x.shape[1:3])}, indent=2) + "\n")
    for r, (model, hist) in enumerate(zip(cv.models, cv.histories)):
        checkpoint.save(out / f"fold{r}.nicp", model.state())
        hist.to_csv(out / f"history_fold{r}.csv")
    metrics.write_predictions_csv(
        out / "predictions.csv",
        [(i, int(f), f"fold{int(f)}", float(p), lab) for i, f, p, lab in zip(ids, cv.folds, cv.predictions, label_col)],
    )
    if w["test_nicw_dir"]:
        test_ids, test_grids = load_grids(_require_dir(w["test_nicw_dir"], "wsi.test_nicw_dir"))
        tx = stack_padded(test_grids, spec.grid_multiple)
        per_model = [predict(spec, m, tx) for m in cv.models]
        per_model = [p[:, 1] if objective == "ce" else p for p in per_model]
        mean = metrics.ensemble_mean(per_model)
        rows = [(i, -1, f"fold{r}", float(p[k]), "") for r, p in enumerate(per_model) for k, i in enumerate(test_ids)]
        rows += [(i, -1, "ensemble", float(m), "") for i, m in zip(test_ids, mean)]
        metrics.write_predictions_csv(out / "test_predictions.csv", rows)
    return out


# -- evaluate ------------------------------------------------------------------


def _write_report(path: Path, items: List[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in items:
            w.writerow([k, repr(v) if isinstance(v, float) else v])
    for k, v in items:
        print(f"{k}\t{v}")


def _collapse(rows: List[dict]):
    """One prediction per sample: the ensemble row if present, else the mean over models."""
    preds, labels = defaultdict(list), {}
    ensemble = {r["sample_id"]: float(r["prediction"]) for r in rows if r["model"] == "ensemble"}
    for r in rows:
        if r["model"] != "ensemble":
            preds[r["sample_id"]].append(float(r["prediction"]))
        labels[r["sample_id"]] = r["label"]
    ids = list(labels)
    return ids, np.array([ensemble.get(i, np.mean(preds[i]) if preds[i] else np.nan) for i in ids]), labels


def cmd_evaluate(cfg: RunConfig) -> Path:
    """Spearman + CI (mse), AUC (ce), median-split KM + log-rank (cox), or task-inclusion correlations (ablation)."""
    e = cfg["evaluate"]
    objective = e["objective"]
    if objective == "ablation":
        rows = metrics.read_ablation_csv(_require_file(e["ablation_csv"], "evaluate.ablation_csv"))
        out = run_dir(cfg, "evaluate")
        rhos = metrics.task_inclusion_correlation(rows)
        _write_report(out / "report.csv", [("rows", len(rows))] + [(f"rho_{t}", float(r)) for t, r in zip(TASK_NAMES, rhos)])
        return out
    pred_rows = metrics.read_predictions_csv(_require_file(e["predictions"], "evaluate.predictions"))
    if not pred_rows:
        raise DataError("predictions file is empty")
    ids, preds, labels = _collapse(pred_rows)
    if objective == "cox":
        c_ids, records, _ = survival.read_cohort_csv(_require_file(e["cohort_csv"], "evaluate.cohort_csv"))
        by_id = dict(zip(c_ids, records))
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"cohort has no record for {missing[0]}")
        out = run_dir(cfg, "evaluate")
        recs = [by_id[i] for i in ids]
        split = survival.median_risk_split(preds, recs)
        low, high = [recs[i] for i in split.low], [recs[i] for i in split.high]
        items = [("n", len(ids)), ("median_risk", float(split.median)), ("n_low", len(low)), ("n_high", len(high)), ("degenerate", int(split.degenerate))]
        if low and high:
            stat, p = survival.log_rank_test(low, high)
            items += [("chi_square", float(stat)), ("p_value", float(p))]
        for name, group in (("low", low), ("high", high)):
            if group:
                survival.kaplan_meier(group).to_csv(out / f"km_{name}.csv")
        _write_report(out / "report.csv", items)
        return out
    try:
        y = np.array([float(labels[i]) for i in ids])
    except ValueError:
        raise DataError("prediction labels must be numeric") from None
    out = run_dir(cfg, "evaluate")
    if objective == "ce":
        _write_report(out / "report.csv", [("n", len(ids)), ("auc", metrics.auc_roc(preds, y.astype(int)))])
        return out
    rho = metrics.spearman(preds, y)
    items = [("n", len(ids)), ("rho", rho)]
    methods = ("fisher_z", "bootstrap") if e["ci_method"] == "both" else (e["ci_method"],)
    for m in methods:
        lo, hi = metrics.spearman_ci(preds, y, e["level"], m, e["n_boot"], cfg["run"]["seed"])
        items += [(f"ci_lo_{m}", lo), (f"ci_hi_{m}", hi)]
    _write_report(out / "report.csv", items)
    return out


# -- ablate --------------------------------------------------------------------


def experiment_config(cfg: RunConfig) -> pipeline.ExperimentConfig:
    d, e, w = cfg["data"], cfg["encoder"], cfg["wsi"]
    enc_train = cfg.encoder_train_config()
    img_train = cfg.wsi_train_config()
    keys = ("batch_size", "lr", "lr_floor", "patience", "min_delta", "beta1", "beta2", "adam_eps", "augment")
    return pipeline.ExperimentConfig(
        seed=cfg["run"]["seed"], tasks=e["tasks"], patch_size=d["patch_size"], encoder_width=e["width"], code_size=e["code_size"],
        head_hidden=e["head_hidden"], patches_per_task=d["patches_per_task"], encoder_epochs=e["epochs"],
        n_images=cfg["ablate"]["images"] or d["n_images"], grid=d["grid"], wsi_width=w["width"], wsi_dense=w["dense_units"],
        wsi_strides=w["strides"], image_epochs=w["epochs"], folds=w["folds"], censor_rate=d["censor_rate"],
        workers=cfg["run"]["threads"], wsi_dropout=w["dropout"], wsi_l2=w["l2"],
        encoder_train={k: getattr(enc_train, k) for k in keys}, image_train={k: getattr(img_train, k) for k in keys},
    )


def cmd_ablate(cfg: RunConfig) -> Path:
    """All 15 task subsets plus ``repeat_full`` extra 4-task encoders on synthetic data."""
    exp = experiment_config(cfg)
    out = run_dir(cfg, "ablate")
    rows = pipeline.run_ablation(exp, repeat_full=cfg["ablate"]["repeat_full"])
    metrics.write_ablation_csv(out / "ablation.csv", rows)
    rhos = metrics.task_inclusion_correlation(rows)
    _write_report(out / "report.csv", [("rows", len(rows))] + [(f"rho_{t}", float(r)) for t, r in zip(TASK_NAMES, rhos)])
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-encoder": cmd_train_encoder,
    "compress": cmd_compress,
    "train-wsi": cmd_train_wsi,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, suppress):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p.add_argument("--config", default=d(None), help="INI configuration file")
        p.add_argument("--seed", type=int, default=d(None))
        p.add_argument("--out-dir", default=d(None))
        p.add_argument("--threads", type=int, default=d(None), help="workers for parallel-safe stages (compression)")
        p.add_argument("--set", action="append", default=d([]), metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("-v", "--verbose", action="store_true", default=d(False))

    parser = argparse.ArgumentParser(prog="mtnic", description="Multitask neural image compression pipeline.")
    add_globals(parser, False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        add_globals(p, True)
        if name in ("train-encoder", "ablate"):
            p.add_argument("--tasks", help="'all' or comma-separated subset of " + ",".join(TASK_NAMES))
            p.add_argument("--code-size", type=int)
        if name == "ablate":
            p.add_argument("--repeat-full", type=int)
        if name in ("train-wsi", "evaluate"):
            p.add_argument("--objective")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.set or [])
    flag_keys = [
        ("seed", "run.seed"), ("out_dir", "run.out_dir"), ("threads", "run.threads"),
        ("tasks", "encoder.tasks"), ("code_size", "encoder.code_size"), ("repeat_full", "ablate.repeat_full"),
    ]
    for attr, key in flag_keys:
        if getattr(args, attr, None) is not None:
            overrides.append(f"{key}={getattr(args, attr)}")
    if getattr(args, "objective", None) is not None:
        section = "wsi" if args.command == "train-wsi" else "evaluate"
        overrides.append(f"{section}.objective={args.objective}")
    return config_mod.load(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CompressionError, checkpoint.CheckpointError, OSError, ValueError, KeyError, csv.Error) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
