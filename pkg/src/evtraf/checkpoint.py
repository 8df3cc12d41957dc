"""Binary model checkpoints.

Layout (little-endian): magic ``EVTM``, version, a length-prefixed JSON
header (model config, train config, node count, iteration counter,
seed, config hash), then named float32 parameter blocks, including the
optimizer moments under ``adam_m.*`` / ``adam_v.*``.  Saving the same
state twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointFormatError, ValidationError
from .model import DgcrnnModel, ModelConfig

MAGIC = b"EVTM"
VERSION = 1
_PRE = struct.Struct("<4sII")  # magic, version, header length


def save_checkpoint(
    path,
    model: DgcrnnModel,
    train_config=None,
    iteration=0,
    seed=0,
    config_hash="0" * 16,
    optimizer=None,
):
    header = {
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "nodes": model.n,
        "iteration": int(iteration),
        "seed": int(seed),
        "config_hash": str(config_hash),
    }
    blocks = {name: p.data for name, p in model.params.items()}
    if optimizer is not None:
        blocks.update(optimizer.state_arrays())
        header["optimizer_step"] = optimizer.t
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PRE.pack(MAGIC, VERSION, len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Parse a checkpoint; returns (header dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        pre = fh.read(_PRE.size)
        if len(pre) != _PRE.size:
            raise CheckpointFormatError(f"{path}: truncated preamble")
        magic, version, hlen = _PRE.unpack(pre)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise CheckpointFormatError(f"{path}: truncated header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: invalid header ({exc})") from None
        count_raw = fh.read(4)
        if len(count_raw) != 4:
            raise CheckpointFormatError(f"{path}: missing block count")
        (count,) = struct.unpack("<I", count_raw)
        blocks = {}
        for _ in range(count):
            ln = fh.read(2)
            if len(ln) != 2:
                raise CheckpointFormatError(f"{path}: truncated block name")
            (nlen,) = struct.unpack("<H", ln)
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(
                struct.unpack("<I", fh.read(4))[0] for _ in range(ndim)
            )
            size = int(np.prod(shape)) if shape else 1
            data = fh.read(size * 4)
            if len(data) != size * 4:
                raise CheckpointFormatError(f"{path}: truncated block {name!r}")
            blocks[name] = (
                np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)
            )
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes")
    return header, blocks


def load_model(path, graph):
    """Rebuild a model from a checkpoint, validating graph compatibility.

    Returns (model, header, blocks); optimizer blocks stay in `blocks`.
    """
    header, blocks = read_checkpoint(path)
    if header.get("nodes") != len(graph):
        raise CheckpointFormatError(
            f"checkpoint was trained on {header.get('nodes')} nodes, "
            f"graph has {len(graph)}"
        )
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValidationError) as exc:
        raise CheckpointFormatError(f"invalid model config in header: {exc}") from None
    model = DgcrnnModel(cfg, graph, seed=header.get("seed", 0))
    param_blocks = {
        k: v for k, v in blocks.items() if not k.startswith(("adam_m.", "adam_v."))
    }
    missing = set(model.params) - set(param_blocks)
    extra = set(param_blocks) - set(model.params)
    if missing or extra:
        raise CheckpointFormatError(
            f"parameter blocks do not match the architecture "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    try:
        model.set_parameters(param_blocks)
    except ValidationError as exc:
        raise CheckpointFormatError(str(exc)) from None
    return model, header, blocks
