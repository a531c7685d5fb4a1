"""Optimisation: Adam, plateau learning-rate decay, patch augmentation and
the patch-level multitask and image-level training loops.

Both loops are deterministic functions of ``config.seed`` and the data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import ops as F
from .models import (
    EncoderSpec,
    HeadSpec,
    ParamStore,
    WsiCnnSpec,
    encoder_forward,
    head_forward,
    l2_penalty,
    multitask_loss,
    wsi_forward,
)
from .survival import SurvivalRecord, cox_loss


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]]) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing (None) gradient counts as zero.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_update_store(state: AdamState, stores: Sequence[Tuple[str, ParamStore]]) -> None:
    params, grads = {}, {}
    for prefix, store in stores:
        for name, t in store.params.items():
            params[f"{prefix}/{name}"] = t.data
            grads[f"{prefix}/{name}"] = t.grad
    adam_step(state, params, grads)


# -- plateau schedule -----------------------------------------------------------


@dataclass
class PlateauSchedule:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without
    an improvement larger than ``min_delta``; stop once a decay would take it
    below ``floor``."""

    lr: float
    floor: float = 1e-5
    factor: float = 10.0
    patience: int = 4
    min_delta: float = 1e-4
    mode: str = "max"
    best: Optional[float] = None
    wait: int = 0
    decays: int = 0
    stopped: bool = False


def plateau_step(sched: PlateauSchedule, metric: float) -> Optional[float]:
    """Record one epoch's metric; returns the learning rate for the next epoch
    or None when training should stop."""
    if sched.stopped:
        return None
    sign = 1.0 if sched.mode == "max" else -1.0
    if sched.best is None or sign * (metric - sched.best) > sched.min_delta:
        sched.best = metric
        sched.wait = 0
        return sched.lr
    sched.wait += 1
    if sched.wait < sched.patience:
        return sched.lr
    sched.wait = 0
    new_lr = sched.lr / sched.factor
    # relative slack absorbs rounding in repeated division (1e-3/10/10 != 1e-5)
    if new_lr < sched.floor * (1 - 1e-9):
        sched.stopped = True
        return None
    sched.lr = new_lr
    sched.decays += 1
    return sched.lr


# -- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Generic morphology and colour jitter; each enabled transform fires with p=0.5."""

    enabled: bool = True
    rotate: bool = True
    flip: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    hue_shift: float = 0.1


NO_AUGMENT = AugmentPolicy(enabled=False)


def rotate90(patch: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(patch, k, axes=(0, 1))


def augment_patch(patch: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy = AugmentPolicy()) -> np.ndarray:
    """Random rotation/flip/brightness/contrast/hue jitter of a [P,P,3] patch in [0,1]."""
    if not policy.enabled:
        return patch
    # fixed number of draws per call keeps the stream aligned across policies
    fire = rng.random(5) < 0.5
    k = int(rng.integers(4))
    b, c = rng.uniform(-1, 1, 2)
    shift = rng.uniform(-1, 1, 3)
    out = patch
    if policy.rotate and fire[0]:
        out = rotate90(out, k)
    if policy.flip and fire[1]:
        out = out[:, ::-1] if k % 2 else out[::-1]
    out = np.array(out, dtype=np.float64)
    if policy.brightness and fire[2]:
        out *= 1.0 + policy.brightness * b
    if policy.contrast and fire[3]:
        mean = out.mean()
        out = (out - mean) * (1.0 + policy.contrast * c) + mean
    if policy.hue_shift and fire[4]:
        out += policy.hue_shift * shift
    return np.clip(out, 0.0, 1.0)


# -- configs and history ------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-3
    lr_floor: float = 1e-5
    max_epochs: int = 30
    patience: int = 4
    min_delta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: AugmentPolicy = AugmentPolicy()
    restore_best: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.lr <= self.lr_floor:
            raise ValueError("initial learning rate must exceed the floor")


def multitask_config(**kw) -> TrainConfig:
    """Patch-level defaults: 32 samples per task, lr 1e-3 down to 1e-5."""
    return TrainConfig(**{"batch_size": 32, "lr": 1e-3, "lr_floor": 1e-5, **kw})


def image_level_config(**kw) -> TrainConfig:
    """Image-level defaults: 16-sample batches, lr 1e-2 down to 1e-5, no augmentation."""
    return TrainConfig(**{"batch_size": 16, "lr": 1e-2, "lr_floor": 1e-5, "augment": NO_AUGMENT, **kw})


@dataclass
class History:
    columns: List[str]
    rows: List[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# -- multitask loop -----------------------------------------------------------


def evaluate_heads(enc_spec, enc_params, heads, datasets, batch_size: int = 256) -> Dict[str, float]:
    from .compression import embed_patches

    acc = {}
    with no_grad():
        for name, ds in datasets.items():
            codes = embed_patches(enc_spec, enc_params, ds.val_x, batch_size)
            spec, params = heads[name]
            probs = head_forward(spec, params, Tensor(codes), "infer").data
            acc[name] = float((probs.argmax(axis=1) == ds.val_y).mean())
    return acc


def train_multitask(
    enc_spec: EncoderSpec,
    enc_params: ParamStore,
    heads: Mapping[str, Tuple[HeadSpec, ParamStore]],
    datasets: Mapping,
    config: TrainConfig,
) -> History:
    """Jointly train the shared encoder and the heads of the tasks in ``datasets``.

    Heads without a dataset are left untouched. One epoch is a pass over the
    smallest training set in ``config.batch_size`` samples per task. The
    learning rate follows a plateau schedule on mean validation accuracy.
    Parameters are updated in place; the returned history has one row per
    epoch.
    """
    names = list(datasets)
    if not names:
        raise ValueError("no task datasets given")
    for n in names:
        if len(datasets[n].train_x) == 0 or len(datasets[n].val_x) == 0:
            raise ValueError(f"task {n} has an empty split")
        if n not in heads:
            raise ValueError(f"no head for task {n}")
    rng = np.random.default_rng([config.seed, 21])
    bs = config.batch_size
    steps = max(1, min(len(datasets[n].train_x) for n in names) // bs)
    adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    sched = PlateauSchedule(config.lr, config.lr_floor, patience=config.patience, min_delta=config.min_delta, mode="max")
    history = History(["epoch", "lr", "train_loss"] + [f"val_acc_{n}" for n in names] + ["val_acc_mean"])
    stores = [("encoder", enc_params)] + [(n, heads[n][1]) for n in names]
    best = None
    for epoch in range(1, config.max_epochs + 1):
        orders = {n: rng.permutation(len(datasets[n].train_x)) for n in names}
        losses = []
        for s in range(steps):
            batches = []
            for n in names:
                idx = orders[n][(s * bs) % len(orders[n]) :][:bs]
                ds = datasets[n]
                x = np.stack([augment_patch(p, rng, config.augment) for p in ds.train_x[idx]])
                batches.append((x, ds.train_y[idx]))
            for _, store in stores:
                store.zero_grad()
            loss, _ = multitask_loss(
                enc_spec, enc_params, [heads[n][0] for n in names], [heads[n][1] for n in names], batches, "train", rng
            )
            loss.backward()
            adam_update_store(adam, stores)
            losses.append(loss.item())
        acc = evaluate_heads(enc_spec, enc_params, heads, {n: datasets[n] for n in names})
        mean_acc = float(np.mean([acc[n] for n in names]))
        history.append(
            epoch=epoch, lr=adam.lr, train_loss=float(np.mean(losses)), **{f"val_acc_{n}": acc[n] for n in names}, val_acc_mean=mean_acc
        )
        if config.restore_best and (best is None or mean_acc > best[0]):
            best = (mean_acc, [store.copy() for _, store in stores])
        lr = plateau_step(sched, mean_acc)
        if lr is None:
            break
        adam.lr = lr
    if config.restore_best and best is not None:
        for (_, store), saved in zip(stores, best[1]):
            store.load_state(saved)
    return history


# -- image-level loop ---------------------------------------------------------

OBJECTIVES = ("mse", "ce", "cox")


def _data_loss(objective: str, out: Tensor, targets, idx: np.ndarray) -> Optional[Tensor]:
    if objective == "mse":
        return F.mse(out, np.asarray(targets, dtype=np.float64)[idx])
    if objective == "ce":
        return F.cross_entropy(out, np.asarray(targets)[idx])
    recs = [targets[i] for i in idx]
    if not any(r.event for r in recs):
        return None
    return cox_loss(out, recs)


def predict(spec: WsiCnnSpec, params: ParamStore, grids: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(grids), batch_size):
            outs.append(wsi_forward(spec, params, grids[i : i + batch_size], "infer").data)
    return np.concatenate(outs)


def image_level_loss(spec, params, grids, targets, objective, idx, mode, rng) -> Optional[Tensor]:
    out = wsi_forward(spec, params, grids[idx], mode, rng)
    data = _data_loss(objective, out, targets, idx)
    if data is None:
        return None
    return data + l2_penalty(spec, params)


def _validation_loss(spec, params, grids, targets, objective) -> Optional[float]:
    if len(grids) == 0:
        return None
    out = Tensor(predict(spec, params, grids))
    loss = _data_loss(objective, out, targets, np.arange(len(grids)))
    return None if loss is None else loss.item()


def train_image_level(
    spec: WsiCnnSpec,
    params: ParamStore,
    train_grids: np.ndarray,
    train_targets,
    val_grids: np.ndarray,
    val_targets,
    objective: str,
    config: TrainConfig,
) -> History:
    """Train the image-level CNN on padded [N,H,W,C] grids.

    ``objective`` is ``mse`` (float targets), ``ce`` (integer classes) or
    ``cox`` (:class:`SurvivalRecord` targets; each mini-batch forms its own
    risk sets and batches without an event are skipped). The L2 penalty is
    always added. The plateau schedule tracks validation loss; the best
    validation weights are restored at the end when ``config.restore_best``.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "cox" and not any(r.event for r in train_targets):
        raise ValueError("cox objective needs at least one observed event")
    n = len(train_grids)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng([config.seed, 31])
    adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
    sched = PlateauSchedule(config.lr, config.lr_floor, patience=config.patience, min_delta=config.min_delta, mode="min")
    history = History(["epoch", "lr", "train_loss", "val_loss"])
    best = None
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            params.zero_grad()
            loss = image_level_loss(spec, params, train_grids, train_targets, objective, idx, "train", rng)
            if loss is None:
                continue
            loss.backward()
            adam_update_store(adam, [("wsi", params)])
            losses.append(loss.item())
        if not losses:
            raise ValueError("no usable training batch this epoch (no observed events?)")
        train_loss = float(np.mean(losses))
        val_loss = _validation_loss(spec, params, val_grids, val_targets, objective)
        metric = train_loss if val_loss is None else val_loss
        history.append(epoch=epoch, lr=adam.lr, train_loss=train_loss, val_loss=val_loss if val_loss is not None else float("nan"))
        if config.restore_best and (best is None or metric < best[0]):
            best = (metric, params.copy())
        lr = plateau_step(sched, metric)
        if lr is None:
            break
        adam.lr = lr
    if config.restore_best and best is not None:
        params.load_state(best[1])
    return history
