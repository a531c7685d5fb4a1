"""Run configuration: a strict INI schema with defaults for every module.

Every key a command reads is declared in :data:`SCHEMA`; unknown sections or
keys are rejected. Defaults follow the published architecture and optimiser
settings (64px patches, 128 filters, C=128, batch 32 per task, lr 1e-3 for
the encoder and 1e-2 for the image-level CNN). Desk-scale runs override them
from a file or with ``--set section.key=value``.

The resolved configuration is written back as canonical text, and its SHA-256
names the run directory.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from .models import TASK_NAMES, EncoderSpec, HeadSpec, WsiCnnSpec
from .training import NO_AUGMENT, AugmentPolicy, TrainConfig


class ConfigError(ValueError):
    """Invalid, missing or unknown configuration; exit code 2."""

    code = 2


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _tasks(text: str) -> Tuple[str, ...]:
    if text.strip() == "all":
        return TASK_NAMES
    names = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [n for n in names if n not in TASK_NAMES]
    if bad or not names:
        raise ValueError(f"tasks must be 'all' or a subset of {','.join(TASK_NAMES)}")
    # canonical order, no duplicates
    return tuple(t for t in TASK_NAMES if t in names)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {'|'.join(options)}")
        return text

    return parse


def _fmt(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs"),
        "threads": (int, 1),
    },
    "data": {
        "patch_size": (int, 64),
        "patches_per_task": (int, 500),
        "n_images": (int, 200),
        "grid": (int, 32),
        "censor_rate": (float, 0.3),
    },
    "encoder": {
        "dataset_dir": (str, ""),
        "tasks": (_tasks, TASK_NAMES),
        "width": (int, 128),
        "layers": (int, 4),
        "code_size": (int, 128),
        "head_hidden": (int, 256),
        "head_dropout": (float, 0.1),
        "alpha": (float, 0.2),
        "bn_momentum": (float, 0.9),
        "bn_eps": (float, 1e-3),
        "batch_size": (int, 32),
        "lr": (float, 1e-3),
        "lr_floor": (float, 1e-5),
        "epochs": (int, 30),
        "patience": (int, 4),
        "min_delta": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "augment": (_bool, True),
    },
    "compress": {
        "checkpoint": (str, ""),
        "images_dir": (str, ""),
        "stride": (int, 0),
        "tissue_threshold": (_opt_float, None),
    },
    "wsi": {
        "objective": (_choice("mse", "ce", "cox"), "mse"),
        "nicw_dir": (str, ""),
        "labels_csv": (str, ""),
        "cohort_csv": (str, ""),
        "test_nicw_dir": (str, ""),
        "width": (int, 128),
        "strides": (_ints, (2, 2, 2, 2, 2, 2, 1, 1)),
        "dense_units": (int, 128),
        "dropout": (float, 0.2),
        "l2": (float, 1e-5),
        "n_classes": (int, 2),
        "batch_size": (int, 16),
        "lr": (float, 1e-2),
        "lr_floor": (float, 1e-5),
        "epochs": (int, 30),
        "patience": (int, 4),
        "min_delta": (float, 1e-4),
        "folds": (int, 4),
    },
    "evaluate": {
        "predictions": (str, ""),
        "objective": (_choice("mse", "ce", "cox", "ablation"), "mse"),
        "cohort_csv": (str, ""),
        "ablation_csv": (str, ""),
        "level": (float, 0.95),
        "ci_method": (_choice("fisher_z", "bootstrap", "both"), "fisher_z"),
        "n_boot": (int, 10000),
    },
    "ablate": {
        "repeat_full": (int, 4),
        "images": (int, 0),
    },
}


class RunConfig:
    """Parsed configuration: ``cfg["section"]["key"]`` gives typed values."""

    def __init__(self, values: Dict[str, Dict[str, Any]]):
        self.values = values

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.values[section]

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in SCHEMA.items():
            parser[section] = {k: _fmt(self.values[section][k]) for k in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self, exclude: Iterable[Tuple[str, str]] = (("run", "out_dir"), ("run", "threads"))) -> str:
        """SHA-256 of the canonical text, ignoring keys that do not change results."""
        skip = set(exclude)
        lines = [f"{s}.{k}={_fmt(self.values[s][k])}" for s, keys in SCHEMA.items() for k in keys if (s, k) not in skip]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    # -- typed views ---------------------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        e = self["encoder"]
        return EncoderSpec(
            input_size=self["data"]["patch_size"], width=e["width"], n_layers=e["layers"], code_size=e["code_size"],
            alpha=e["alpha"], bn_momentum=e["bn_momentum"], bn_eps=e["bn_eps"],
        )

    def head_spec(self, n_classes: int) -> HeadSpec:
        e = self["encoder"]
        return HeadSpec(e["code_size"], n_classes, hidden=e["head_hidden"], dropout=e["head_dropout"], alpha=e["alpha"])

    def encoder_train_config(self) -> TrainConfig:
        e = self["encoder"]
        return TrainConfig(
            seed=self["run"]["seed"], batch_size=e["batch_size"], lr=e["lr"], lr_floor=e["lr_floor"], max_epochs=e["epochs"],
            patience=e["patience"], min_delta=e["min_delta"], beta1=e["beta1"], beta2=e["beta2"], adam_eps=e["adam_eps"],
            augment=AugmentPolicy() if e["augment"] else NO_AUGMENT,
        )

    def wsi_spec(self, code_size: int) -> WsiCnnSpec:
        w = self["wsi"]
        output = {"mse": "regression", "ce": "classification", "cox": "risk"}[w["objective"]]
        return WsiCnnSpec(
            code_size, output=output, n_classes=w["n_classes"], width=w["width"], strides=w["strides"],
            dense_units=w["dense_units"], dropout=w["dropout"], l2=w["l2"],
        )

    def wsi_train_config(self) -> TrainConfig:
        w = self["wsi"]
        e = self["encoder"]
        return TrainConfig(
            seed=self["run"]["seed"], batch_size=w["batch_size"], lr=w["lr"], lr_floor=w["lr_floor"], max_epochs=w["epochs"],
            patience=w["patience"], min_delta=w["min_delta"], beta1=e["beta1"], beta2=e["beta2"], adam_eps=e["adam_eps"],
            augment=NO_AUGMENT,
        )


def defaults() -> Dict[str, Dict[str, Any]]:
    return {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


def _assign(values, section: str, key: str, text: str, origin: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    parse = SCHEMA[section][key][0]
    try:
        values[section][key] = parse(text)
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {exc}") from None


def parse_text(text: str, origin: str = "<config>", values=None) -> Dict[str, Dict[str, Any]]:
    values = values if values is not None else defaults()
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    for section in parser.sections():
        for key, raw in parser[section].items():
            _assign(values, section, key, raw, origin)
    return values


def load(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the INI file at ``path``, then ``section.key=value`` overrides."""
    values = defaults()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        parse_text(text, str(path), values)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        _assign(values, section, key, raw.strip(), "--set")
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    checks = [
        (cfg["run"]["threads"] >= 1, "run.threads must be >= 1"),
        (cfg["data"]["patch_size"] >= 8, "data.patch_size must be >= 8"),
        (16 <= cfg["data"]["grid"] <= 64, "data.grid must be within 16..64"),
        (0 <= cfg["data"]["censor_rate"] < 1, "data.censor_rate must be in [0,1)"),
        (cfg["encoder"]["lr"] > cfg["encoder"]["lr_floor"], "encoder.lr must exceed encoder.lr_floor"),
        (cfg["wsi"]["lr"] > cfg["wsi"]["lr_floor"], "wsi.lr must exceed wsi.lr_floor"),
        (cfg["encoder"]["batch_size"] > 0 and cfg["wsi"]["batch_size"] > 0, "batch sizes must be positive"),
        (cfg["wsi"]["folds"] >= 3, "wsi.folds must be >= 3"),
        (all(s in (1, 2) for s in cfg["wsi"]["strides"]) and len(cfg["wsi"]["strides"]) > 0, "wsi.strides must be 1s and 2s"),
        (0 <= cfg["wsi"]["dropout"] < 1 and 0 <= cfg["encoder"]["head_dropout"] < 1, "dropout rates must be in [0,1)"),
        (0 < cfg["evaluate"]["level"] < 1, "evaluate.level must be in (0,1)"),
        (cfg["ablate"]["repeat_full"] >= 0, "ablate.repeat_full must be >= 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
