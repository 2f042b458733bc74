"""On-disk formats: PGM images, CSV tables, model checkpoints, manifests.

Checkpoint layout (all little-endian)::

    b"SSDM"                      magic
    u32 version                  currently 1
    u32 dim                      flattened input/output size
    u32 time_freqs
    u32 flags                    bit 0: linear skip layer present
                                 bit 1: output preconditioning present
                                 bit 2: local convolutional branch present
    u32 n_hidden
    u32 hidden[n_hidden]
    f64 sigma_data               only when bit 1 is set
    u32 local_hidden, height, width   only when bit 2 is set
    f64 params...                W0, b0, W1, b1, ..., [W_skip], [local] (row-major)
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .flow_trainer import VelocityModel

__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "write_pgm",
    "read_pgm",
    "image_grid",
    "write_csv",
    "read_csv",
    "write_json",
    "sha256_file",
    "atomic_write_bytes",
]

CHECKPOINT_MAGIC = b"SSDM"
CHECKPOINT_VERSION = 1
FLAG_SKIP = 1
FLAG_PRECOND = 2
FLAG_LOCAL = 4


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: VelocityModel, path: str | os.PathLike) -> None:
    flags = (
        (FLAG_SKIP if model.skip else 0)
        | (FLAG_PRECOND if model.sigma_data is not None else 0)
        | (FLAG_LOCAL if model.local_hidden else 0)
    )
    head = CHECKPOINT_MAGIC + struct.pack(
        f"<IIIII{len(model.hidden)}I",
        CHECKPOINT_VERSION,
        model.dim,
        model.time_freqs,
        flags,
        len(model.hidden),
        *model.hidden,
    )
    if model.sigma_data is not None:
        head += struct.pack("<d", model.sigma_data)
    if model.local_hidden:
        head += struct.pack("<III", model.local_hidden, *model.image_shape)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    atomic_write_bytes(path, head + body)


def load_checkpoint(path: str | os.PathLike) -> VelocityModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 24:
        raise CheckpointError(f"{path}: truncated header")
    version, dim, freqs, flags, n_hidden = struct.unpack_from("<IIIII", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if flags & ~(FLAG_SKIP | FLAG_PRECOND | FLAG_LOCAL):
        raise CheckpointError(f"{path}: unknown flags {flags:#x}")
    if len(raw) < 24 + 4 * n_hidden:
        raise CheckpointError(f"{path}: truncated header")
    hidden = struct.unpack_from(f"<{n_hidden}I", raw, 24)
    offset = 24 + 4 * n_hidden
    sigma_data = None
    if flags & FLAG_PRECOND:
        if len(raw) < offset + 8:
            raise CheckpointError(f"{path}: truncated header")
        (sigma_data,) = struct.unpack_from("<d", raw, offset)
        if not sigma_data > 0.0:
            raise CheckpointError(f"{path}: invalid sigma_data {sigma_data}")
        offset += 8
    local_hidden, image_shape = 0, None
    if flags & FLAG_LOCAL:
        if len(raw) < offset + 12:
            raise CheckpointError(f"{path}: truncated header")
        local_hidden, height, width = struct.unpack_from("<III", raw, offset)
        if local_hidden == 0:
            raise CheckpointError(f"{path}: local branch flagged with zero units")
        image_shape = (height, width)
        offset += 12
    try:
        model = VelocityModel(
            dim,
            hidden,
            freqs,
            zero_final=True,
            skip=bool(flags & FLAG_SKIP),
            sigma_data=sigma_data,
            local_hidden=local_hidden,
            image_shape=image_shape,
        )
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    params = []
    for p in model.params:
        nbytes = 8 * p.size
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated parameter data")
        params.append(np.frombuffer(chunk, dtype="<f8").reshape(p.shape).astype(np.float64))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    model.set_params(params)
    return model


def _pgm_text(img: np.ndarray, maxval: int) -> str:
    h, w = img.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in img]
    return "\n".join(lines) + "\n"


def write_pgm(path: str | os.PathLike, img: np.ndarray, maxval: int = 255) -> None:
    """ASCII PGM; float images are clamped to ``[0, 1]`` and scaled to ``maxval``."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2D")
    if np.issubdtype(img.dtype, np.floating):
        img = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    atomic_write_bytes(path, _pgm_text(img, maxval).encode("ascii"))


def read_pgm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(v) for v in tokens[4:]], dtype=np.int64)
    if values.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {values.size}")
    return values.reshape(h, w), maxval


def image_grid(images: np.ndarray, cols: int = 16, pad: int = 1, fill: float = 0.5) -> np.ndarray:
    """Tile ``(n, h, w)`` images into one canvas separated by ``pad`` pixels."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y : y + h, x : x + w] = images[i]
    return canvas


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Comma separated, header row, LF line endings, shortest round-trip floats."""
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(path: str | os.PathLike, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()
