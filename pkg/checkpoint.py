"""Binary checkpoint container.

Layout, all integers little-endian:
    b"SDRNN"
    u32  format version
    u32  metadata length, then that many bytes of UTF-8 JSON
    repeated until end of file:
        u32 name length, name (UTF-8), u32 ndim, u64 per dimension, row-major float64 data
"""
import dataclasses
import json
import logging
import struct

import numpy as np

from model import Architecture, Dims
from numerics import RNG_ALGORITHM
from train import TrainConfig
from utils import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"SDRNN"
FORMAT_VERSION = 1


def write_checkpoint(path, meta, arrays):
    meta = {**meta, "format_version": FORMAT_VERSION, "rng_algorithm": RNG_ALGORITHM}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for name, value in arrays.items():
            value = np.ascontiguousarray(value, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            f.write(value.tobytes(order="C"))
    logger.info("wrote checkpoint %s (%d arrays)", path, len(arrays))


def _take(buf, pos, n, path):
    if pos + n > len(buf):
        raise CheckpointError(f"{path}: truncated checkpoint")
    return buf[pos:pos + n], pos + n


def read_checkpoint(path):
    """Returns (metadata dict, ordered dict of float64 arrays)."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    head, pos = _take(buf, pos, 8, path)
    version, meta_len = struct.unpack("<II", head)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    blob, pos = _take(buf, pos, meta_len, path)
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}") from None
    if not isinstance(meta, dict):
        raise CheckpointError(f"{path}: metadata is not an object")

    arrays = {}
    while pos < len(buf):
        raw, pos = _take(buf, pos, 4, path)
        (name_len,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, name_len, path)
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupt tensor name at byte {pos - name_len}") from None
        raw, pos = _take(buf, pos, 4, path)
        (ndim,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, 8 * ndim, path)
        shape = struct.unpack(f"<{ndim}Q", raw)
        raw, pos = _take(buf, pos, 8 * int(np.prod(shape, dtype=np.int64)), path)
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return meta, arrays


def save_model(path, model, params, cfg, extra_meta=None, extra_arrays=None):
    meta = {
        "arch": model.arch,
        "dims": dataclasses.asdict(model.dims),
        "train_config": dataclasses.asdict(cfg),
        **(extra_meta or {}),
    }
    write_checkpoint(path, meta, {**params, **(extra_arrays or {})})


def load_model(path, expected_dims=None):
    """Rebuild the architecture and its parameters, refusing on any dimension mismatch."""
    meta, arrays = read_checkpoint(path)
    try:
        cfg = TrainConfig(**meta["train_config"])
        dims = Dims(**meta["dims"])
        model = Architecture.from_config(meta["arch"], dims, cfg)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid checkpoint header: {e}") from None
    if expected_dims is not None and expected_dims != dims:
        raise CheckpointError(f"{path}: checkpoint dims {dims} do not match data dims {expected_dims}")
    params = {}
    for name, shape in model.param_shapes().items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array '{name}'")
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: array '{name}' has shape {arrays[name].shape}, expected {tuple(shape)}")
        params[name] = arrays[name]
    return model, params, cfg, meta, arrays
