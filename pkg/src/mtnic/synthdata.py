"""Deterministic synthetic stand-ins for the patch tasks, mini whole-slide
images and survival cohorts.

All randomness comes from numpy's PCG64 bit generator seeded with integer
sequences such as ``default_rng([seed, 3])`` for one mini-WSI, and values
are drawn in a fixed order (layout, motif parameters in reading order, pixel
noise, textures), so every output is a pure function of its seed.

Rendering model
---------------
A patch is a base tissue colour with an "ink" texture drawn on top:

* ``dots``     hard-edged discs; ``scale`` is the radius as a fraction of P
* ``stripes``  bands of period ``scale * P`` at angle ``orientation``
* ``checker``  squares of side ``scale * P``
* ``gradient`` linear blend from base to ink along ``orientation``
* ``flat``     base colour only

``density`` is the target ink coverage. Gaussian noise (sigma 0.03, clipped
at +-0.1) is added to base pixels only; ink pixels keep their exact 8-bit
ink colour. The proliferative motif is fine dots drawn in
``PROLIF_INK = (77, 26, 140)``; no other texture uses green level 26 and
base pixels never reach it, which lets a pixel recount identify
proliferative patches exactly.

Mini-WSI statistic
------------------
The regression target is ``k / (R*Q)`` where ``k`` patches form one
4-connected proliferative region grown from a random seed cell, ``k`` drawn
uniformly from 0..R*Q. The binary class is ``target > 0.5`` and the latent
risk is ``RISK_SCALE * (target - 0.5)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .survival import SurvivalRecord

PROLIF_INK = (77, 26, 140)
DOT_INK = (77, 31, 140)
STRIPE_INK = (120, 48, 150)
CHECKER_INK = (110, 40, 120)
ALT_INK = (140, 70, 40)
BASE_COLOR = (235, 180, 210)
NOISE_SIGMA = 0.03
NOISE_CLIP = 0.1
RISK_SCALE = 4.0
VALIDATION_FRACTION = 0.2


@dataclass(frozen=True)
class MotifSpec:
    kind: str
    density: float = 0.3
    orientation: float = 0.0
    scale: float = 0.1
    base_color: Tuple[float, float, float] = tuple(c / 255 for c in BASE_COLOR)
    ink: Tuple[int, int, int] = DOT_INK


@dataclass
class PatchDataset:
    name: str
    n_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


@dataclass(frozen=True)
class MiniWsiLabel:
    target: float
    label: int
    risk: float


@dataclass
class MiniWsi:
    image: np.ndarray  # uint8 [H,W,3]
    label: MiniWsiLabel
    layout: np.ndarray  # bool [R,Q], proliferative cells
    patch_size: int


@functools.lru_cache(maxsize=8)
def _coords(p: int):
    y, x = np.mgrid[0:p, 0:p].astype(np.float64) + 0.5
    y.flags.writeable = x.flags.writeable = False
    return y, x


def render_motif(spec: MotifSpec, patch_size: int, rng: np.random.Generator, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Render one [P,P,3] uint8 patch."""
    return render_motifs([spec], patch_size, rng, None if noise is None else noise[None])[0]


def render_motifs(specs: Sequence[MotifSpec], patch_size: int, rng: np.random.Generator, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Render a batch of patches as uint8 [N,P,P,3].

    ``noise`` supplies standard normal values of shape [N,P,P,3]; otherwise
    they are drawn from ``rng`` first. Texture randomness is then drawn per
    kind in the order dots, stripes, checker.
    """
    p, n = patch_size, len(specs)
    y, x = _coords(p)
    kinds = np.array([s.kind for s in specs])
    unknown = set(kinds) - {"dots", "stripes", "checker", "gradient", "flat"}
    if unknown:
        raise ValueError(f"unknown motif kind(s) {sorted(unknown)}")
    density = np.array([s.density for s in specs])
    angle = np.array([s.orientation for s in specs])
    scale = np.array([s.scale for s in specs]) * p
    base = np.array([s.base_color for s in specs], dtype=np.float64)
    ink8 = np.array([s.ink for s in specs], dtype=np.uint8)
    if noise is None:
        noise = rng.standard_normal((n, p, p, 3))
    img = base[:, None, None, :] + np.clip(NOISE_SIGMA * noise, -NOISE_CLIP, NOISE_CLIP)
    mask = np.zeros((n, p, p), dtype=bool)

    idx = np.flatnonzero(kinds == "dots")
    if idx.size:
        radius = np.maximum(scale[idx], 0.75)
        counts = np.maximum(1, np.round(density[idx] * p * p / (np.pi * radius**2)).astype(int))
        centers = rng.uniform(0, p, (idx.size, counts.max(), 2))
        owner, slot = np.nonzero(np.arange(counts.max())[None, :] < counts[:, None])
        cy, cx = centers[owner, slot, 0], centers[owner, slot, 1]
        r2 = radius[owner] ** 2
        # stamp each dot over the pixels in a window around its center
        k = int(np.ceil(radius.max())) + 1
        off = np.arange(-k, k + 1)
        py = np.floor(cy).astype(int)[:, None, None] + off[None, :, None]
        px = np.floor(cx).astype(int)[:, None, None] + off[None, None, :]
        hit = ((py + 0.5 - cy[:, None, None]) ** 2 + (px + 0.5 - cx[:, None, None]) ** 2 <= r2[:, None, None])
        hit &= (py >= 0) & (py < p) & (px >= 0) & (px < p)
        sel = np.nonzero(hit)
        sub = np.zeros((idx.size, p, p), dtype=bool)
        sub[owner[sel[0]], py[sel[0], sel[1], 0], px[sel[0], 0, sel[2]]] = True
        mask[idx] = sub
        # always ink at least one pixel so the motif is never blank
        first = np.minimum(centers[:, 0].astype(int), p - 1)
        mask[idx, first[:, 0], first[:, 1]] = True

    idx = np.flatnonzero(kinds == "stripes")
    if idx.size:
        u = (x * np.cos(angle[idx])[:, None, None] + y * np.sin(angle[idx])[:, None, None]) / scale[idx][:, None, None]
        mask[idx] = np.mod(u + rng.uniform(size=idx.size)[:, None, None], 1.0) < density[idx][:, None, None]

    idx = np.flatnonzero(kinds == "checker")
    if idx.size:
        side = scale[idx][:, None, None]
        off = rng.uniform(0, 1, (idx.size, 2)) * scale[idx][:, None]
        mask[idx] = (np.floor((y + off[:, 0, None, None]) / side) + np.floor((x + off[:, 1, None, None]) / side)) % 2 == 0

    idx = np.flatnonzero(kinds == "gradient")
    if idx.size:
        u = x * np.cos(angle[idx])[:, None, None] + y * np.sin(angle[idx])[:, None, None]
        lo = u.min(axis=(1, 2), keepdims=True)
        hi = u.max(axis=(1, 2), keepdims=True)
        t = ((u - lo) / (hi - lo) * density[idx][:, None, None])[..., None]
        img[idx] = img[idx] * (1 - t) + (ink8[idx] / 255.0)[:, None, None, :] * t

    out = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return np.where(mask[..., None], ink8[:, None, None, :], out)


# -- motif families -------------------------------------------------------------


def _base(rng: np.random.Generator, lo: float = 0.7, hi: float = 1.0) -> Tuple[float, float, float]:
    factor = rng.uniform(lo, hi)
    jitter = rng.uniform(-0.03, 0.03, 3)
    return tuple(min(max(c / 255.0 * factor + j, 0.45), 1.0) for c, j in zip(BASE_COLOR, jitter))


def _angle(rng):
    return rng.uniform(0, np.pi)


def prolif_motif(rng, base=None) -> MotifSpec:
    return MotifSpec("dots", rng.uniform(0.25, 0.35), 0.0, 0.06, base or _base(rng), PROLIF_INK)


def coarse_dots_motif(rng, base=None) -> MotifSpec:
    return MotifSpec("dots", rng.uniform(0.25, 0.35), 0.0, 0.18, base or _base(rng), DOT_INK)


def stripes_motif(rng, base=None, scale=None) -> MotifSpec:
    scale = scale if scale is not None else rng.choice([0.2, 0.5])
    return MotifSpec("stripes", rng.uniform(0.25, 0.4), _angle(rng), scale, base or _base(rng), STRIPE_INK)


def checker_motif(rng, base=None, scale=None) -> MotifSpec:
    scale = scale if scale is not None else rng.choice([0.15, 0.35])
    return MotifSpec("checker", 0.5, 0.0, scale, base or _base(rng), CHECKER_INK)


def gradient_motif(rng, base=None) -> MotifSpec:
    return MotifSpec("gradient", rng.uniform(0.3, 0.6), _angle(rng), 1.0, base or _base(rng), STRIPE_INK)


def flat_motif(rng, base=None) -> MotifSpec:
    return MotifSpec("flat", 0.0, 0.0, 1.0, base or _base(rng), DOT_INK)


_DISTRACTORS = (coarse_dots_motif, coarse_dots_motif, stripes_motif, checker_motif, gradient_motif, flat_motif)


def _any_motif(rng, base=None) -> MotifSpec:
    makers = (prolif_motif,) + _DISTRACTORS
    return makers[rng.integers(len(makers))](rng, base)


def _colorectal_motif(cls: int, rng) -> MotifSpec:
    base = _base(rng)
    if cls == 0:
        return prolif_motif(rng, base)
    if cls == 1:
        return coarse_dots_motif(rng, base)
    if cls == 2:
        return stripes_motif(rng, base, 0.2)
    if cls == 3:
        return stripes_motif(rng, base, 0.5)
    if cls == 4:
        return checker_motif(rng, base, 0.15)
    if cls == 5:
        return checker_motif(rng, base, 0.35)
    if cls == 6:
        return gradient_motif(rng, base)
    if cls == 7:
        return flat_motif(rng, base)
    return MotifSpec("dots", rng.uniform(0.25, 0.35), 0.0, 0.1, base, ALT_INK)


def _task_motif(task: str, cls: int, rng) -> MotifSpec:
    if task == "lymph":
        base = _base(rng, 0.85, 1.0) if cls == 0 else _base(rng, 0.5, 0.62)
        return _any_motif(rng, base)
    if task == "mitosis":
        if cls == 1:
            return (prolif_motif, coarse_dots_motif)[rng.integers(2)](rng)
        return (stripes_motif, checker_motif, gradient_motif, flat_motif)[rng.integers(4)](rng)
    if task == "prostate":
        return stripes_motif(rng) if cls == 1 else checker_motif(rng)
    if task == "colorectal":
        return _colorectal_motif(cls, rng)
    raise ValueError(f"unknown task {task!r}")


TASK_CLASSES = {"lymph": 2, "mitosis": 2, "prostate": 2, "colorectal": 9}


def gen_patch_task(task: str, seed: int, patches: int, patch_size: int = 64) -> PatchDataset:
    """One balanced labelled patch dataset with a random 20% validation split."""
    k = TASK_CLASSES[task]
    task_id = list(TASK_CLASSES).index(task)
    labels = np.arange(patches) % k
    rng = np.random.default_rng([seed, 1, task_id])
    specs = [_task_motif(task, int(cls), rng) for cls in labels]
    images = render_motifs(specs, patch_size, rng) / 255.0
    order = np.random.default_rng([seed, 2, task_id]).permutation(patches)
    n_val = int(round(VALIDATION_FRACTION * patches))
    val, train = order[:n_val], order[n_val:]
    return PatchDataset(task, k, images[train], labels[train], images[val], labels[val])


def gen_patch_tasks(seed: int, patches_per_task: int, patch_size: int = 64, tasks: Sequence[str] = tuple(TASK_CLASSES)) -> Dict[str, PatchDataset]:
    return {t: gen_patch_task(t, seed, patches_per_task, patch_size) for t in tasks}


def grow_region(rng: np.random.Generator, rows: int, cols: int, count: int) -> np.ndarray:
    """A 4-connected set of ``count`` cells grown by random frontier expansion."""
    layout = np.zeros((rows, cols), dtype=bool)
    if count == 0:
        return layout
    start = (int(rng.integers(rows)), int(rng.integers(cols)))
    layout[start] = True
    frontier = [start]
    placed = 1
    while placed < count:
        i = int(rng.integers(len(frontier)))
        r, c = frontier[i]
        nbrs = [(r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))]
        free = [(a, b) for a, b in nbrs if 0 <= a < rows and 0 <= b < cols and not layout[a, b]]
        if not free:
            frontier.pop(i)
            continue
        cell = free[int(rng.integers(len(free)))]
        layout[cell] = True
        frontier.append(cell)
        placed += 1
    return layout


def gen_mini_wsi(seed: int, grid: int = 32, patch_size: int = 64, coverage: Optional[float] = None) -> MiniWsi:
    """Render a ``grid`` x ``grid`` patch mini-WSI with its global label.

    ``coverage`` fixes the proliferative fraction (rounded to whole cells);
    by default the cell count is uniform over 0..grid*grid.
    """
    if not 16 <= grid <= 64:
        raise ValueError("grid must lie in 16..64 patches")
    rng = np.random.default_rng([seed, 3])
    cells = grid * grid
    count = int(rng.integers(cells + 1)) if coverage is None else int(round(coverage * cells))
    layout = grow_region(rng, grid, grid, count)
    p = patch_size
    kinds = rng.integers(len(_DISTRACTORS), size=cells)
    specs = [prolif_motif(rng) if prolif else _DISTRACTORS[k](rng) for prolif, k in zip(layout.reshape(-1), kinds)]
    patches = render_motifs(specs, p, rng)
    image = patches.reshape(grid, grid, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(grid * p, grid * p, 3)
    target = count / cells
    return MiniWsi(image, MiniWsiLabel(target, int(target > 0.5), RISK_SCALE * (target - 0.5)), layout, p)


def recount_coverage(image: np.ndarray, patch_size: int) -> float:
    """Fraction of grid cells containing at least one proliferative ink pixel."""
    h, w, _ = image.shape
    r, q = h // patch_size, w // patch_size
    hit = np.all(image[: r * patch_size, : q * patch_size] == np.asarray(PROLIF_INK, dtype=np.uint8), axis=2)
    cells = hit.reshape(r, patch_size, q, patch_size).any(axis=(1, 3))
    return cells.sum() / (r * q)


def gen_survival(seed: int, labels: Sequence[MiniWsiLabel], censor_rate: float, base_hazard: float = 1.0 / 40.0) -> List[SurvivalRecord]:
    """Exponential death times with hazard ``base_hazard * exp(risk)`` (months).

    Each subject is censored independently with probability ``censor_rate``
    at a uniform fraction of its death time.
    """
    if not 0 <= censor_rate < 1:
        raise ValueError("censor_rate must lie in [0, 1)")
    rng = np.random.default_rng([seed, 5])
    risks = np.array([lab.risk for lab in labels], dtype=np.float64)
    death = rng.exponential(1.0, len(risks)) / (base_hazard * np.exp(risks))
    censored = rng.random(len(risks)) < censor_rate
    frac = rng.random(len(risks))
    times = np.where(censored, frac * death, death)
    return [SurvivalRecord(float(t), not bool(c)) for t, c in zip(times, censored)]


# -- PPM I/O ----------------------------------------------------------------


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 encoding of a uint8 [H,W,3] image."""
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))


def read_ppm(path_or_stream) -> np.ndarray:
    from .compression import read_ppm_header

    fh = open(path_or_stream, "rb") if not hasattr(path_or_stream, "read") else path_or_stream
    try:
        w, h = read_ppm_header(fh)
        raw = fh.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise EOFError("truncated PPM payload")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    finally:
        if fh is not path_or_stream:
            fh.close()
