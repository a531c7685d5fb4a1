"""End-to-end experiment drivers shared by the CLI, demos and acceptance tests.

Each driver is a deterministic function of its config: encoder training on
synthetic patch tasks, compression of synthetic mini-WSIs, cross-validated
image-level training, and the task-subset ablation sweep.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics, survival, synthdata
from .compression import compress, embed_patches
from .models import (
    TASK_NAMES,
    CANONICAL_TASKS,
    EncoderSpec,
    HeadSpec,
    ParamStore,
    WsiCnnSpec,
    init_encoder,
    init_head,
    init_wsi_cnn,
    pad_grid,
)
from .training import History, TrainConfig, image_level_config, multitask_config, predict, train_image_level, train_multitask

log = logging.getLogger(__name__)


@dataclass
class EncoderRun:
    spec: EncoderSpec
    params: ParamStore
    heads: Dict[str, Tuple[HeadSpec, ParamStore]]
    history: History


def train_encoder(
    tasks: Sequence[str],
    spec: EncoderSpec,
    config: TrainConfig,
    patches_per_task: int = 500,
    data_seed: Optional[int] = None,
    head_hidden: int = 256,
) -> EncoderRun:
    """Generate the chosen synthetic patch tasks and train encoder + heads on them.

    Heads are created for all four canonical tasks; only the selected ones train.
    """
    unknown = set(tasks) - set(TASK_NAMES)
    if unknown or not tasks:
        raise ValueError(f"tasks must be a non-empty subset of {TASK_NAMES}, got {list(tasks)}")
    data_seed = config.seed if data_seed is None else data_seed
    datasets = synthdata.gen_patch_tasks(data_seed, patches_per_task, spec.input_size, tasks=[t for t in TASK_NAMES if t in tasks])
    rng = np.random.default_rng([config.seed, 41])
    params = init_encoder(spec, rng)
    heads = {}
    for t in CANONICAL_TASKS:
        hspec = HeadSpec(spec.code_size, t.class_count, hidden=head_hidden)
        heads[t.name] = (hspec, init_head(hspec, rng))
    history = train_multitask(spec, params, heads, datasets, config)
    return EncoderRun(spec, params, heads, history)


def compress_images(images: Sequence[np.ndarray], spec: EncoderSpec, params: ParamStore, workers: int = 1) -> np.ndarray:
    """Compress uint8 images (as PPM streams) into a stacked [N,R,Q,C] array."""
    digest = params.digest()
    return np.stack(
        [compress(synthdata.ppm_bytes(img), spec, params, workers=workers, digest=digest).embeddings for img in images]
    )


def pad_grids(grids: np.ndarray, multiple: int) -> np.ndarray:
    return np.stack([pad_grid(g, multiple)[0] for g in grids])


@dataclass
class CvResult:
    predictions: np.ndarray  # out-of-fold (held-out role) prediction per sample
    folds: np.ndarray
    histories: List[History]
    models: List[ParamStore]


def cross_validate(
    grids: np.ndarray,
    targets,
    objective: str,
    spec: WsiCnnSpec,
    config: TrainConfig,
    k: int = 4,
    pattern: Sequence[str] = ("train", "val"),
    seed: int = 0,
) -> CvResult:
    """Train one image-level model per fold rotation; collect held-out predictions.

    ``grids`` must already be padded to ``spec.grid_multiple``. Classification
    predictions are the probability of class 1.
    """
    plan = metrics.kfold(len(grids), k, pattern, seed)
    preds = np.full(len(grids), np.nan)
    histories, models = [], []
    pick = (lambda idx: [targets[i] for i in idx]) if objective == "cox" else (lambda idx: np.asarray(targets)[idx])
    for r, roles in enumerate(plan.rotations()):
        rng = np.random.default_rng([seed, 51, r])
        params = init_wsi_cnn(spec, rng)
        cfg = replace(config, seed=int(rng.integers(2**31)))
        held = roles[plan.held_out_role]
        hist = train_image_level(spec, params, grids[roles["train"]], pick(roles["train"]), grids[roles["val"]], pick(roles["val"]), objective, cfg)
        out = predict(spec, params, grids[held])
        preds[held] = out[:, 1] if objective == "ce" else out
        histories.append(hist)
        models.append(params)
    return CvResult(preds, plan.assignment, histories, models)


# -- experiment presets ---------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Desk-scale pipeline settings.

    Defaults are a scaled configuration sized for a single CPU core: 16px
    patches with a narrower encoder, and an image-level CNN whose stride plan
    reduces a 32-cell grid to one cell.
    """

    seed: int = 0
    tasks: Tuple[str, ...] = ("mitosis", "colorectal")
    patch_size: int = 16
    encoder_width: int = 16
    code_size: int = 16
    head_hidden: int = 64
    patches_per_task: int = 600
    encoder_epochs: int = 10
    n_images: int = 200
    grid: int = 32
    wsi_width: int = 32
    wsi_dense: int = 32
    wsi_strides: Tuple[int, ...] = (2, 2, 2, 2, 2, 1, 1, 1)
    image_epochs: int = 30
    folds: int = 4
    censor_rate: float = 0.3
    workers: int = 1
    wsi_dropout: float = 0.2
    wsi_l2: float = 1e-5
    # extra TrainConfig fields for the two loops (lr, batch size, ...)
    encoder_train: Dict[str, object] = field(default_factory=dict)
    image_train: Dict[str, object] = field(default_factory=dict)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(input_size=self.patch_size, width=self.encoder_width, code_size=self.code_size)

    def wsi_spec(self, output: str) -> WsiCnnSpec:
        return WsiCnnSpec(
            self.code_size, output=output, width=self.wsi_width, dense_units=self.wsi_dense, strides=self.wsi_strides,
            dropout=self.wsi_dropout, l2=self.wsi_l2,
        )

    def encoder_config(self, seed: Optional[int] = None) -> TrainConfig:
        return multitask_config(**{"seed": self.seed if seed is None else seed, "max_epochs": self.encoder_epochs, **self.encoder_train})

    def image_config(self) -> TrainConfig:
        return image_level_config(**{"seed": self.seed, "max_epochs": self.image_epochs, **self.image_train})


@dataclass
class PipelineResult:
    predictions: np.ndarray
    labels: object
    score: float
    extra: dict = field(default_factory=dict)


def synthetic_cohort(cfg: ExperimentConfig):
    wsis = [synthdata.gen_mini_wsi(cfg.seed * 100003 + i, cfg.grid, cfg.patch_size) for i in range(cfg.n_images)]
    return wsis


def run_regression(cfg: ExperimentConfig, encoder: Optional[EncoderRun] = None, wsis=None) -> PipelineResult:
    """Encoder -> compression -> 4-fold CV regression; score is out-of-fold Spearman."""
    if encoder is None:
        encoder = train_encoder(cfg.tasks, cfg.encoder_spec(), cfg.encoder_config(), cfg.patches_per_task, head_hidden=cfg.head_hidden)
    wsis = wsis if wsis is not None else synthetic_cohort(cfg)
    spec = cfg.wsi_spec("regression")
    grids = pad_grids(compress_images([w.image for w in wsis], encoder.spec, encoder.params, cfg.workers), spec.grid_multiple)
    targets = np.array([w.label.target for w in wsis])
    cv = cross_validate(grids, targets, "mse", spec, cfg.image_config(), cfg.folds, seed=cfg.seed)
    return PipelineResult(cv.predictions, targets, metrics.spearman(cv.predictions, targets), {"cv": cv, "encoder": encoder})


def run_survival(cfg: ExperimentConfig, encoder: Optional[EncoderRun] = None, wsis=None) -> PipelineResult:
    """Encoder -> compression -> 4-fold (train/val/test) Cox training -> median split log-rank p."""
    if encoder is None:
        encoder = train_encoder(cfg.tasks, cfg.encoder_spec(), cfg.encoder_config(), cfg.patches_per_task, head_hidden=cfg.head_hidden)
    wsis = wsis if wsis is not None else synthetic_cohort(cfg)
    records = synthdata.gen_survival(cfg.seed, [w.label for w in wsis], cfg.censor_rate)
    spec = cfg.wsi_spec("risk")
    grids = pad_grids(compress_images([w.image for w in wsis], encoder.spec, encoder.params, cfg.workers), spec.grid_multiple)
    cv = cross_validate(
        grids, records, "cox", spec, cfg.image_config(), cfg.folds, ("train", "val", "test"), cfg.seed
    )
    split = survival.median_risk_split(cv.predictions, records)
    stat, p = survival.log_rank_test([records[i] for i in split.low], [records[i] for i in split.high])
    return PipelineResult(cv.predictions, records, p, {"cv": cv, "statistic": stat, "split": split, "encoder": encoder})


def task_subsets(tasks: Sequence[str] = TASK_NAMES) -> List[Tuple[str, ...]]:
    """All non-empty subsets, ordered by size then canonical order."""
    return [c for size in range(1, len(tasks) + 1) for c in itertools.combinations(tasks, size)]


def run_ablation(
    cfg: ExperimentConfig, repeat_full: int = 0, subsets: Optional[Sequence[Tuple[str, ...]]] = None
) -> List[metrics.AblationRow]:
    """Train an encoder per task subset (plus extra seeds of the full set) and
    score each by out-of-fold Spearman of the image-level regressor."""
    subsets = list(subsets) if subsets is not None else task_subsets()
    subsets += [tuple(TASK_NAMES)] * repeat_full
    wsis = synthetic_cohort(cfg)
    rows = []
    for i, subset in enumerate(subsets):
        run_cfg = replace(cfg, tasks=tuple(subset), seed=cfg.seed * 1000 + i)
        enc = train_encoder(
            subset, run_cfg.encoder_spec(), cfg.encoder_config(run_cfg.seed), cfg.patches_per_task,
            data_seed=cfg.seed, head_hidden=cfg.head_hidden,
        )
        res = run_regression(replace(run_cfg, seed=cfg.seed), enc, wsis)
        log.info("subset %s: spearman %.3f", "+".join(subset), res.score)
        rows.append(metrics.AblationRow(tuple(t in subset for t in TASK_NAMES), res.score))
    return rows
