"""Network builders: the multitask patch encoder, task heads, and the
image-level CNN that reads compressed grids.

Parameters live in a :class:`ParamStore` (trainable tensors plus batch-norm
running buffers) so that specs stay declarative and stores can be
checkpointed, copied and shared read-only.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, checkpoint
from .autodiff import ops as F
from .autodiff.tensor import concat


@dataclass(frozen=True)
class TaskSpec:
    name: str
    class_count: int


CANONICAL_TASKS: Tuple[TaskSpec, ...] = (
    TaskSpec("lymph", 2),
    TaskSpec("mitosis", 2),
    TaskSpec("prostate", 2),
    TaskSpec("colorectal", 9),
)
TASK_NAMES = tuple(t.name for t in CANONICAL_TASKS)


@dataclass(frozen=True)
class EncoderSpec:
    """Strided conv stack followed by one linear layer with ``code_size`` units.

    Defaults follow the published encoder: 64x64x3 patches, four stride-2
    3x3 convolutions of 128 filters with batch norm and leaky ReLU.
    ``input_size`` and ``width`` shrink it for desk-scale runs.
    """

    input_size: int = 64
    channels: int = 3
    width: int = 128
    n_layers: int = 4
    code_size: int = 128
    alpha: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-3

    @property
    def flat_size(self) -> int:
        side = self.input_size
        for _ in range(self.n_layers):
            side = F.conv_output_size(side, 3, 2, "same")
        return side * side * self.width


@dataclass(frozen=True)
class HeadSpec:
    code_size: int
    n_classes: int
    hidden: int = 256
    dropout: float = 0.1
    alpha: float = 0.2


@dataclass(frozen=True)
class WsiCnnSpec:
    """Image-level CNN over a [H,W,code_size] embedding grid.

    ``output`` is ``classification`` (softmax over ``n_classes``),
    ``regression`` or ``risk`` (one linear unit each).
    """

    code_size: int
    output: str = "regression"
    n_classes: int = 2
    width: int = 128
    strides: Tuple[int, ...] = (2, 2, 2, 2, 2, 2, 1, 1)
    dense_units: int = 128
    dropout: float = 0.2
    l2: float = 1e-5
    alpha: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-3

    @property
    def grid_multiple(self) -> int:
        return int(np.prod(self.strides))

    def __post_init__(self):
        if self.output not in ("classification", "regression", "risk"):
            raise ValueError(f"unknown output kind {self.output!r}")


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class ParamStore:
    """Named, ordered trainable tensors plus non-trainable buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.asarray(value, dtype=np.float64).copy()
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def tensors(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((f"param/{k}", v.data) for k, v in self.params.items())
        out.update((f"buffer/{k}", v) for k, v in self.buffers.items())
        return out

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.state())

    def digest(self) -> bytes:
        return checkpoint.digest(self.to_bytes())

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for key, value in state.items():
            kind, name = key.split("/", 1)
            if kind == "param":
                store.add(name, np.array(value, dtype=np.float64))
            elif kind == "buffer":
                store.add_buffer(name, value)
            else:
                raise KeyError(f"unknown entry kind in {key}")
        return store

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        return cls.from_state(checkpoint.loads(blob))

    def copy(self) -> "ParamStore":
        return ParamStore.from_state({k: v.copy() for k, v in self.state().items()})

    def load_state(self, other: "ParamStore") -> None:
        """Overwrite values in place from a store with identical names."""
        for k, t in self.params.items():
            t.data = other.params[k].data.copy()
        for k, b in self.buffers.items():
            b[...] = other.buffers[k]


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _add_bn(store: ParamStore, prefix: str, c: int) -> None:
    store.add(f"{prefix}.gamma", np.ones(c))
    store.add(f"{prefix}.beta", np.zeros(c))
    store.add_buffer(f"{prefix}.mean", np.zeros(c))
    store.add_buffer(f"{prefix}.var", np.ones(c))


def _bn(store: ParamStore, prefix: str, x: Tensor, mode: str, momentum: float, eps: float) -> Tensor:
    return F.batch_norm(
        x,
        store[f"{prefix}.gamma"],
        store[f"{prefix}.beta"],
        store.buffers[f"{prefix}.mean"],
        store.buffers[f"{prefix}.var"],
        mode=mode,
        momentum=momentum,
        eps=eps,
    )


# -- encoder ------------------------------------------------------------------


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    cin = spec.channels
    for i in range(spec.n_layers):
        store.add(f"conv{i}.w", _he(rng, (3, 3, cin, spec.width), 9 * cin))
        store.add(f"conv{i}.b", np.zeros(spec.width))
        _add_bn(store, f"bn{i}", spec.width)
        cin = spec.width
    store.add("embed.w", _he(rng, (spec.flat_size, spec.code_size), spec.flat_size) / math.sqrt(2.0))
    store.add("embed.b", np.zeros(spec.code_size))
    return store


def encoder_forward(spec: EncoderSpec, params: ParamStore, batch, mode: str = "infer") -> Tensor:
    """Embed a [N,P,P,3] batch of patches with values in [0,1] into [N,C]."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1:] != (spec.input_size, spec.input_size, spec.channels):
        raise ValueError(
            f"encoder expects [N,{spec.input_size},{spec.input_size},{spec.channels}] input, got {list(x.shape)}"
        )
    for i in range(spec.n_layers):
        x = F.conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=2, padding="same")
        x = _bn(params, f"bn{i}", x, mode, spec.bn_momentum, spec.bn_eps)
        x = F.leaky_relu(x, spec.alpha)
    x = x.reshape(x.shape[0], -1)
    return F.dense(x, params["embed.w"], params["embed.b"])


# -- heads ----------------------------------------------------------------


def init_head(spec: HeadSpec, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    store.add("hidden.w", _he(rng, (spec.code_size, spec.hidden), spec.code_size))
    store.add("hidden.b", np.zeros(spec.hidden))
    store.add("out.w", _he(rng, (spec.hidden, spec.n_classes), spec.hidden) / math.sqrt(2.0))
    store.add("out.b", np.zeros(spec.n_classes))
    return store


def head_forward(
    spec: HeadSpec, params: ParamStore, code: Tensor, mode: str = "infer", rng: Optional[np.random.Generator] = None
) -> Tensor:
    x = F.dropout(code, spec.dropout, mode, "element", rng)
    x = F.leaky_relu(F.dense(x, params["hidden.w"], params["hidden.b"]), spec.alpha)
    x = F.dropout(x, spec.dropout, mode, "element", rng)
    return F.softmax(F.dense(x, params["out.w"], params["out.b"]))


def multitask_loss(
    enc_spec: EncoderSpec,
    enc_params: ParamStore,
    head_specs: Sequence[HeadSpec],
    head_params: Sequence[ParamStore],
    batches: Sequence[Tuple[np.ndarray, np.ndarray]],
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, List[Tensor]]:
    """Average categorical cross-entropy over one batch per task.

    All task batches go through the encoder together, so batch-norm
    statistics are computed over the mixed batch. Returns the scalar loss
    and the per-task cross-entropies.
    """
    if not (len(head_specs) == len(head_params) == len(batches)) or not batches:
        raise ValueError("need exactly one head spec, head store and batch per task")
    sizes = [len(b[0]) for b in batches]
    codes = encoder_forward(enc_spec, enc_params, np.concatenate([b[0] for b in batches]), mode)
    losses = []
    start = 0
    for spec, params, (_, labels), n in zip(head_specs, head_params, batches, sizes):
        probs = head_forward(spec, params, codes[start : start + n], mode, rng)
        losses.append(F.cross_entropy(probs, labels))
        start += n
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses)), losses


# -- image-level CNN ----------------------------------------------------------


def init_wsi_cnn(spec: WsiCnnSpec, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    cin = spec.code_size
    for i in range(len(spec.strides)):
        store.add(f"sep{i}.depth", _he(rng, (3, 3, cin), 9))
        store.add(f"sep{i}.point", _he(rng, (1, 1, cin, spec.width), cin))
        store.add(f"sep{i}.b", np.zeros(spec.width))
        _add_bn(store, f"sepbn{i}", spec.width)
        cin = spec.width
    store.add("fc.w", _he(rng, (spec.width, spec.dense_units), spec.width))
    store.add("fc.b", np.zeros(spec.dense_units))
    _add_bn(store, "fcbn", spec.dense_units)
    n_out = spec.n_classes if spec.output == "classification" else 1
    store.add("out.w", _he(rng, (spec.dense_units, n_out), spec.dense_units) / math.sqrt(2.0))
    store.add("out.b", np.zeros(n_out))
    return store


def wsi_features(
    spec: WsiCnnSpec, params: ParamStore, grid, mode: str = "infer", rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Run the separable conv stack; returns the [N,h,w,width] activation."""
    x = grid if isinstance(grid, Tensor) else Tensor(grid)
    if x.ndim != 4 or x.shape[3] != spec.code_size:
        raise ValueError(f"grid must be [N,H,W,{spec.code_size}], got {list(x.shape)}")
    for i, stride in enumerate(spec.strides):
        x = F.depthwise_separable_conv2d(x, params[f"sep{i}.depth"], params[f"sep{i}.point"], params[f"sep{i}.b"], stride)
        x = _bn(params, f"sepbn{i}", x, mode, spec.bn_momentum, spec.bn_eps)
        x = F.leaky_relu(x, spec.alpha)
        x = F.dropout(x, spec.dropout, mode, "channel", rng)
    return x


def wsi_forward(
    spec: WsiCnnSpec, params: ParamStore, grid, mode: str = "infer", rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Class probabilities [N,K] for classification, scalars [N] otherwise.

    Grids larger than ``grid_multiple`` leave a spatial map after the conv
    stack; it is averaged to a single vector before the dense layer.
    """
    x = F.spatial_mean(wsi_features(spec, params, grid, mode, rng))
    x = F.dense(x, params["fc.w"], params["fc.b"])
    x = F.leaky_relu(_bn(params, "fcbn", x, mode, spec.bn_momentum, spec.bn_eps), spec.alpha)
    out = F.dense(x, params["out.w"], params["out.b"])
    if spec.output == "classification":
        return F.softmax(out)
    return out.reshape(-1)


def l2_weights(params: ParamStore) -> List[Tensor]:
    """Conv and dense kernels subject to the L2 penalty (biases and BN excluded)."""
    return [t for name, t in params.params.items() if name.endswith((".depth", ".point", ".w"))]


def l2_penalty(spec: WsiCnnSpec, params: ParamStore) -> Tensor:
    return F.sum_of_squares(l2_weights(params)) * spec.l2


def pad_grid(grid: np.ndarray, multiple: int = 64, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-pad a [H,W,C] grid on the right/bottom to extents divisible by ``multiple``.

    Returns the padded grid and its validity mask; padded cells are invalid.
    """
    h, w, _ = grid.shape
    ht, wt = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    if (ht, wt) == (h, w):
        return grid, mask
    out = np.zeros((ht, wt, grid.shape[2]), dtype=grid.dtype)
    out[:h, :w] = grid
    full = np.zeros((ht, wt), dtype=bool)
    full[:h, :w] = mask
    return out, full
