"""Neural image compression of large rasters into embedding grids.

An image is read from a binary PPM stream one horizontal strip of patches at
a time, every patch on a uniform grid is embedded by the encoder, and the
embeddings are placed at their grid position. Partial patches at the right
and bottom edges are discarded.

NICW file layout (little-endian)::

    offset size
    0      4    magic b"NICW"
    4      2    u16 version (1)
    6      4    u32 rows R
    10     4    u32 cols Q
    14     4    u32 code size C
    18     2    u16 patch size P
    20     2    u16 stride S
    22     2    u16 flags (bit 0: validity mask present)
    24     32   encoder checkpoint SHA-256
    56     4RQC binary32 embeddings, row-major [R,Q,C]
    ...    ceil(RQ/8) mask bits, cell i at bit (i % 8) of byte i // 8
    ...    4    u32 CRC-32 of the embedding and mask bytes
"""

from __future__ import annotations

import io
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, List, Optional, Tuple, Union

import numpy as np

from .autodiff import no_grad
from .models import EncoderSpec, ParamStore, encoder_forward

NICW_MAGIC = b"NICW"
NICW_VERSION = 1
HEADER = struct.Struct("<4sHIIIHHH32s")
WHITE_LUMINANCE = 0.86


class CompressionError(Exception):
    code = 3


class TruncatedStreamError(CompressionError):
    code = 4


class NicwError(CompressionError):
    code = 10


class BadMagicError(NicwError):
    code = 11


class BadVersionError(NicwError):
    code = 12


class CrcMismatchError(NicwError):
    code = 13


class TruncatedFileError(NicwError):
    code = 14


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_size: int
    stride: int
    width: int
    height: int

    @property
    def coords(self) -> List[Tuple[int, int, int, int]]:
        """(row, col, x_offset, y_offset) in reading order."""
        return [(r, c, c * self.stride, r * self.stride) for r in range(self.rows) for c in range(self.cols)]

    def __len__(self) -> int:
        return self.rows * self.cols


def plan_grid(width: int, height: int, patch_size: int = 64, stride: int = 64) -> PatchGrid:
    if patch_size < 1 or stride < 1:
        raise ValueError("patch size and stride must be positive")
    if width < patch_size or height < patch_size:
        raise ValueError(f"image {width}x{height} is smaller than one {patch_size}px patch")
    return PatchGrid(
        rows=(height - patch_size) // stride + 1,
        cols=(width - patch_size) // stride + 1,
        patch_size=patch_size,
        stride=stride,
        width=width,
        height=height,
    )


@dataclass
class CompressedImage:
    embeddings: np.ndarray  # [R,Q,C]
    validity: np.ndarray  # bool [R,Q]
    patch_size: int
    stride: int
    encoder_digest: bytes = b"\0" * 32
    source: str = ""

    @property
    def rows(self) -> int:
        return self.embeddings.shape[0]

    @property
    def cols(self) -> int:
        return self.embeddings.shape[1]

    @property
    def code_size(self) -> int:
        return self.embeddings.shape[2]


def compression_ratio(patch_size: int, code_size: int, bytes_per_value: int = 4) -> float:
    """Raw 8-bit RGB bytes per patch over stored embedding bytes."""
    return (patch_size * patch_size * 3) / (code_size * bytes_per_value)


# -- PPM streaming ----------------------------------------------------------


def _token(fh: BinaryIO) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise TruncatedStreamError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm_header(fh: BinaryIO) -> Tuple[int, int]:
    """Parse a binary P6 header; leaves the stream at the first pixel byte."""
    if _token(fh) != b"P6":
        raise CompressionError("only binary PPM (P6) images are supported")
    width, height, maxval = (int(_token(fh)) for _ in range(3))
    if maxval != 255:
        raise CompressionError(f"only 8-bit PPM is supported (maxval {maxval})")
    return width, height


def iter_strips(fh: BinaryIO, grid: PatchGrid):
    """Yield ``(row, strip)`` with ``strip`` the uint8 [P,W,3] rows of one grid row.

    At most ``P`` image rows are held at a time.
    """
    row_bytes = grid.width * 3
    buf = np.empty((0, grid.width, 3), dtype=np.uint8)
    buf_start = 0
    next_row = 0
    for r in range(grid.rows):
        top = r * grid.stride
        if top > next_row:
            skip = (top - next_row) * row_bytes
            if len(fh.read(skip)) != skip:
                raise TruncatedStreamError("PPM pixel data ended early")
            next_row = top
            buf, buf_start = buf[:0], top
        else:
            buf = buf[top - buf_start :]
            buf_start = top
        need = top + grid.patch_size - next_row
        raw = fh.read(need * row_bytes)
        if len(raw) != need * row_bytes:
            raise TruncatedStreamError("PPM pixel data ended early")
        buf = np.concatenate([buf, np.frombuffer(raw, dtype=np.uint8).reshape(need, grid.width, 3)])
        next_row += need
        yield r, buf[: grid.patch_size]


def strip_patches(strip: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Cut a strip into [Q,P,P,3] float patches in [0,1]."""
    p, s = grid.patch_size, grid.stride
    return np.stack([strip[:, c * s : c * s + p] for c in range(grid.cols)]).astype(np.float64) / 255.0


def background_fraction(patches: np.ndarray) -> np.ndarray:
    """Per-patch fraction of near-white pixels (luminance > 0.86)."""
    lum = patches @ np.array([0.299, 0.587, 0.114])
    return (lum > WHITE_LUMINANCE).mean(axis=(1, 2))


def embed_patches(spec: EncoderSpec, params: ParamStore, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = np.empty((len(patches), spec.code_size))
    with no_grad():
        for i in range(0, len(patches), batch_size):
            out[i : i + batch_size] = encoder_forward(spec, params, patches[i : i + batch_size], "infer").data
    return out


def compress(
    source: Union[str, Path, bytes, BinaryIO],
    spec: EncoderSpec,
    params: ParamStore,
    stride: Optional[int] = None,
    tissue_threshold: Optional[float] = None,
    workers: int = 1,
    batch_size: int = 256,
    source_id: str = "",
    digest: Optional[bytes] = None,
) -> CompressedImage:
    """Compress a PPM image into a :class:`CompressedImage`.

    ``tissue_threshold`` enables background filtering: a patch whose
    near-white fraction exceeds it is marked invalid and left as zeros.
    ``workers > 1`` embeds strips on a thread pool; results are identical to
    the sequential run.
    """
    p = spec.input_size
    stride = stride or p
    if isinstance(source, (bytes, bytearray)):
        fh, owned = io.BytesIO(source), True
    elif isinstance(source, (str, Path)):
        fh, owned = open(source, "rb"), True
        source_id = source_id or Path(source).stem
    else:
        fh, owned = source, False
    try:
        width, height = read_ppm_header(fh)
        grid = plan_grid(width, height, p, stride)
        emb = np.zeros((grid.rows, grid.cols, spec.code_size))
        valid = np.ones((grid.rows, grid.cols), dtype=bool)

        def work(r, patches):
            keep = np.ones(len(patches), dtype=bool)
            if tissue_threshold is not None:
                keep = background_fraction(patches) <= tissue_threshold
            valid[r] = keep
            if keep.any():
                emb[r, keep] = embed_patches(spec, params, patches[keep], batch_size)

        if workers <= 1:
            for r, strip in iter_strips(fh, grid):
                work(r, strip_patches(strip, grid))
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(work, r, strip_patches(strip, grid)) for r, strip in iter_strips(fh, grid)]
                for f in futures:
                    f.result()
    finally:
        if owned:
            fh.close()
    return CompressedImage(emb, valid, p, stride, digest if digest is not None else params.digest(), source_id)


def naive_compress(
    image: np.ndarray, spec: EncoderSpec, params: ParamStore, stride: Optional[int] = None, tissue_threshold: Optional[float] = None
) -> CompressedImage:
    """Full-memory reference: one encoder call per patch."""
    p = spec.input_size
    stride = stride or p
    h, w, _ = image.shape
    grid = plan_grid(w, h, p, stride)
    emb = np.zeros((grid.rows, grid.cols, spec.code_size))
    valid = np.ones((grid.rows, grid.cols), dtype=bool)
    pixels = image.astype(np.float64) / 255.0
    with no_grad():
        for r, c, x, y in grid.coords:
            patch = pixels[y : y + p, x : x + p][None]
            if tissue_threshold is not None and background_fraction(patch)[0] > tissue_threshold:
                valid[r, c] = False
                continue
            emb[r, c] = encoder_forward(spec, params, patch, "infer").data[0]
    return CompressedImage(emb, valid, p, stride, params.digest())


# -- NICW codec ---------------------------------------------------------------


def nicw_bytes(ci: CompressedImage) -> bytes:
    r, q, c = ci.embeddings.shape
    digest = bytes(ci.encoder_digest)
    if len(digest) != 32:
        raise ValueError("encoder digest must be 32 bytes")
    header = HEADER.pack(NICW_MAGIC, NICW_VERSION, r, q, c, ci.patch_size, ci.stride, 1, digest)
    payload = np.ascontiguousarray(ci.embeddings, dtype="<f4").tobytes()
    payload += np.packbits(np.asarray(ci.validity, dtype=bool).reshape(-1), bitorder="little").tobytes()
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def parse_nicw(blob: bytes, source: str = "") -> CompressedImage:
    if len(blob) < HEADER.size + 4:
        raise TruncatedFileError("file shorter than NICW header")
    magic, version, r, q, c, p, s, flags, digest = HEADER.unpack_from(blob)
    if magic != NICW_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != NICW_VERSION:
        raise BadVersionError(f"unsupported NICW version {version}")
    n_emb = 4 * r * q * c
    n_mask = (r * q + 7) // 8 if flags & 1 else 0
    end = HEADER.size + n_emb + n_mask
    if len(blob) != end + 4:
        raise TruncatedFileError(f"expected {end + 4} bytes, found {len(blob)}")
    payload = blob[HEADER.size : end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) != crc:
        raise CrcMismatchError("payload CRC-32 mismatch")
    emb = np.frombuffer(payload[:n_emb], dtype="<f4").astype(np.float32).reshape(r, q, c)
    if flags & 1:
        mask = np.unpackbits(np.frombuffer(payload[n_emb:], dtype=np.uint8), bitorder="little")[: r * q].astype(bool).reshape(r, q)
    else:
        mask = np.ones((r, q), dtype=bool)
    return CompressedImage(emb, mask, p, s, digest, source)


def write_nicw(ci: CompressedImage, path: Union[str, Path]) -> bytes:
    blob = nicw_bytes(ci)
    Path(path).write_bytes(blob)
    return blob


def read_nicw(path: Union[str, Path]) -> CompressedImage:
    return parse_nicw(Path(path).read_bytes(), Path(path).stem)
