"""Binary checkpoints (magic "FSCK") and the append-only CSV metrics log."""

import csv
import json
import os
import struct

import numpy as np
from humanize import naturalsize

from modules import util
from modules.numeric import ModelParams
from modules.util import Failed

logger = util.logger

MAGIC = b"FSCK"
FORMAT_VERSION = 1


class Checkpoint:
    """
    In-memory checkpoint.

    File layout (little-endian): magic, u32 version, u16 + config hash, u64 step, parameter
    block of float32 tensors, optimizer block of float64 tensors, u64 + JSON (optimizer scalars,
    RNG state, stage tag, free-form meta). A tensor block is a u32 count followed by
    (u16 + name, u8 ndim, u32 per dim, raw values) records.
    """

    def __init__(self, tensors, step=0, config_hash="", optimizer=None, rng_state=None, stage=None, meta=None):
        self.tensors = tensors
        self.step = int(step)
        self.config_hash = config_hash or ""
        self.optimizer = optimizer or {}
        self.rng_state = rng_state
        self.stage = stage
        self.meta = meta or {}

    @classmethod
    def from_params(cls, params, step=0, config_hash="", optimizer=None, rng=None, stage=None, meta=None):
        tensors = {name: params.value(name) for name in params}
        rng_state = rng.bit_generator.state if rng is not None else None
        return cls(tensors, step, config_hash, optimizer, rng_state, stage, meta)

    def names(self, namespaces=None):
        if namespaces is None:
            return list(self.tensors)
        return [n for n in self.tensors if n.split(".", 1)[0] in tuple(namespaces)]

    def to_params(self, dtype=np.float32, configs=None):
        params = ModelParams(dtype=dtype, configs=configs)
        for name, value in self.tensors.items():
            params.add(name, value)
        return params

    def digest(self, namespaces=None):
        return self.to_params().digest(namespaces)

    def restore_rng(self):
        rng = np.random.default_rng()
        if self.rng_state:
            rng.bit_generator.state = self.rng_state
        return rng


def _write_block(handle, tensors, dtype):
    handle.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        value = np.ascontiguousarray(value, dtype=dtype)
        handle.write(struct.pack("<H", len(encoded)))
        handle.write(encoded)
        handle.write(struct.pack("<B", value.ndim))
        handle.write(struct.pack(f"<{value.ndim}I", *value.shape))
        handle.write(value.tobytes())


def _read_exact(handle, n, path):
    data = handle.read(n)
    if len(data) != n:
        raise Failed(f"Checkpoint Error: {path} is truncated")
    return data


def _read_block(handle, dtype, path):
    (count,) = struct.unpack("<I", _read_exact(handle, 4, path))
    tensors = {}
    itemsize = np.dtype(dtype).itemsize
    for _ in range(count):
        (length,) = struct.unpack("<H", _read_exact(handle, 2, path))
        name = _read_exact(handle, length, path).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(handle, 1, path))
        shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim, path))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(_read_exact(handle, size * itemsize, path), dtype=dtype).reshape(shape).copy()
    return tensors


def _split_optimizer(state):
    arrays = {}
    scalars = {}
    for key, value in (state or {}).items():
        if isinstance(value, dict):
            for name, array in value.items():
                arrays[f"{key}/{name}"] = array
        else:
            scalars[key] = value
    return arrays, scalars


def _join_optimizer(arrays, scalars):
    state = dict(scalars)
    for key, array in arrays.items():
        slot, name = key.split("/", 1)
        state.setdefault(slot, {})[name] = array
    if state.get("kind") == "adam":
        for slot in ("m", "v", "t"):
            state.setdefault(slot, {})
    return state


def write_checkpoint(checkpoint, path):
    """Write atomically: a temporary sibling file is renamed over `path`"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    arrays, scalars = _split_optimizer(checkpoint.optimizer)
    blob = json.dumps(
        util.to_plain(
            {"optimizer": scalars, "rng_state": checkpoint.rng_state, "stage": checkpoint.stage, "meta": checkpoint.meta}
        )
    ).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        encoded = checkpoint.config_hash.encode("ascii")
        handle.write(struct.pack("<H", len(encoded)))
        handle.write(encoded)
        handle.write(struct.pack("<Q", checkpoint.step))
        _write_block(handle, checkpoint.tensors, "<f4")
        _write_block(handle, arrays, "<f8")
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
    os.replace(tmp, path)
    logger.debug(f"Checkpoint written: {path} ({naturalsize(os.path.getsize(path), binary=True)}, step {checkpoint.step})")
    return path


def read_checkpoint(path):
    if not os.path.isfile(path):
        raise Failed(f"Checkpoint Error: {path} does not exist")
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != MAGIC:
            raise Failed(f"Checkpoint Error: {path} has magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(handle, 4, path))
        if version != FORMAT_VERSION:
            raise Failed(f"Checkpoint Error: {path} has format version {version}, this build reads {FORMAT_VERSION}")
        (length,) = struct.unpack("<H", _read_exact(handle, 2, path))
        config_hash = _read_exact(handle, length, path).decode("ascii")
        (step,) = struct.unpack("<Q", _read_exact(handle, 8, path))
        tensors = _read_block(handle, "<f4", path)
        arrays = _read_block(handle, "<f8", path)
        (length,) = struct.unpack("<Q", _read_exact(handle, 8, path))
        blob = json.loads(_read_exact(handle, length, path).decode("utf-8"))
    optimizer = _join_optimizer(arrays, blob.get("optimizer", {}))
    return Checkpoint(tensors, step, config_hash, optimizer, blob.get("rng_state"), blob.get("stage"), blob.get("meta"))


def save_checkpoint(params, state, path):
    """
    Args:
        params (ModelParams): values to persist.
        state (dict): step, config_hash, optimizer (state_dict), rng (numpy Generator), stage, meta.
    """
    checkpoint = Checkpoint.from_params(
        params,
        step=state.get("step", 0),
        config_hash=state.get("config_hash", ""),
        optimizer=state.get("optimizer"),
        rng=state.get("rng"),
        stage=state.get("stage"),
        meta=state.get("meta"),
    )
    return write_checkpoint(checkpoint, path)


def load_checkpoint(path, params, namespaces=None):
    """
    Copy the selected namespaces of a checkpoint into `params`.

    Parameters outside `namespaces` keep their current values. Every selected name must
    exist on both sides with the same shape.

    Returns:
        Checkpoint: the full checkpoint read from disk.
    """
    checkpoint = read_checkpoint(path)
    wanted = set(checkpoint.names(namespaces))
    current = set(params.names(namespaces))
    diffs = []
    for name in sorted(wanted | current):
        if name not in current:
            diffs.append(f"  {name}: in checkpoint {tuple(checkpoint.tensors[name].shape)}, not in model")
        elif name not in wanted:
            diffs.append(f"  {name}: in model {tuple(params.value(name).shape)}, not in checkpoint")
        elif checkpoint.tensors[name].shape != params.value(name).shape:
            diffs.append(
                f"  {name}: checkpoint {tuple(checkpoint.tensors[name].shape)} vs model {tuple(params.value(name).shape)}"
            )
    if diffs:
        raise Failed(f"Checkpoint Error: {path} does not match the configured architecture\n" + "\n".join(diffs))
    for name in sorted(wanted):
        params.assign(name, checkpoint.tensors[name])
    logger.debug(f"Loaded {len(wanted)} tensors ({', '.join(namespaces) if namespaces else 'all'}) from {path}")
    return checkpoint


class MetricsLog:
    """Append-only CSV of (step, stage, wall_time, metrics...) rows with strictly increasing steps"""

    def __init__(self, path, fields):
        self.path = path
        self.fields = ["step", "stage", "wall_time", *fields]
        self.last_step = None
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(self.path, "w", newline="", encoding="utf-8") as handle:
            csv.DictWriter(handle, fieldnames=self.fields).writeheader()

    def append(self, step, stage, wall_time, **metrics):
        if self.last_step is not None and step <= self.last_step:
            raise Failed(f"Metrics Error: step {step} is not after the last logged step {self.last_step}")
        unknown = set(metrics) - set(self.fields)
        if unknown:
            raise Failed(f"Metrics Error: unknown metric column(s) {sorted(unknown)}")
        row = {"step": step, "stage": stage, "wall_time": f"{wall_time:.3f}"}
        row.update({k: f"{v:.8g}" if isinstance(v, float) else v for k, v in metrics.items()})
        with open(self.path, "a", newline="", encoding="utf-8") as handle:
            csv.DictWriter(handle, fieldnames=self.fields).writerow(row)
        self.last_step = step

    def rows(self):
        with open(self.path, newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))
