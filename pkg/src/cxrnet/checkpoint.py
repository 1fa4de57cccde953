"""Binary checkpoint format: a fixed magic + version, a canonical-JSON metadata
preamble, then named little-endian float32 blobs, each integrity-checked by CRC32.

Layout: 8-byte magic | uint32 version | uint32 header length | header JSON | blobs.
The header records the model name and architecture digest so weights can never be
loaded into the wrong network, plus epoch, best validation loss, and train config.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .zoo import Model, spec_digest

MAGIC = b"CXRNETCK"
VERSION = 1
_PREAMBLE = struct.Struct("<8sII")  # magic, version, header length


@dataclass
class CheckpointData:
    header: dict
    params: dict
    buffers: dict
    opt_state: dict = field(default_factory=dict)


def _blob_entries(named_arrays: dict, kind: str, payloads: list) -> list:
    entries = []
    for name, arr in named_arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(np.shape(arr)),
                        "dtype": "<f4", "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        payloads.append(raw)
    return entries


def save_checkpoint(path, model: Model, *, epoch: int, best_val_loss: float,
                    train_config: dict | None = None, opt_state: dict | None = None,
                    opt_step: int = 0) -> None:
    """Parameters and batch-norm buffers as float32 blobs; bit-exact on reload."""
    payloads: list = []
    blobs = _blob_entries({k: t.data for k, t in model.parameters().items()}, "param", payloads)
    blobs += _blob_entries(model.buffers(), "buffer", payloads)
    if opt_state:
        blobs += _blob_entries(opt_state, "opt", payloads)
    header = {
        "format_version": VERSION,
        "model": model.spec.name,
        "spec_digest": spec_digest(model.spec),
        "epoch": epoch,
        "best_val_loss": float(best_val_loss),
        "train_config": train_config,
        "opt_step": opt_step,
        "blobs": blobs,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)


def read_checkpoint(path) -> CheckpointData:
    """Parse and integrity-check a checkpoint; corruption errors carry byte offsets."""
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise ValueError(f"checkpoint truncated at offset {len(data)}: "
                         f"preamble needs {_PREAMBLE.size} bytes")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = _PREAMBLE.size
    if pos + hlen > len(data):
        raise ValueError(f"checkpoint truncated at offset {len(data)}: "
                         f"header spans [{pos}, {pos + hlen})")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint header at offset {pos}: {exc}") from exc
    pos += hlen
    groups: dict = {"param": {}, "buffer": {}, "opt": {}}
    for blob in header["blobs"]:
        name, nbytes = blob["name"], blob["nbytes"]
        if pos + nbytes > len(data):
            raise ValueError(f"checkpoint truncated at offset {len(data)}: "
                             f"blob {name!r} spans [{pos}, {pos + nbytes})")
        raw = data[pos:pos + nbytes]
        if zlib.crc32(raw) != blob["crc32"]:
            raise ValueError(f"blob {name!r} failed its CRC32 check at offset {pos}")
        arr = np.frombuffer(raw, dtype=blob["dtype"]).reshape(blob["shape"]).copy()
        groups[blob["kind"]][name] = arr
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"unexpected {len(data) - pos} trailing bytes at offset {pos}")
    return CheckpointData(header=header, params=groups["param"],
                          buffers=groups["buffer"], opt_state=groups["opt"])


def restore_model(ckpt: CheckpointData, model: Model) -> CheckpointData:
    """Load parameters/buffers into `model`; refuses architecture mismatches."""
    want = spec_digest(model.spec)
    got = ckpt.header["spec_digest"]
    if got != want:
        raise ValueError(
            f"checkpoint was written for model {ckpt.header['model']!r} "
            f"(digest {got[:12]}…) and cannot be loaded into {model.spec.name!r} "
            f"(digest {want[:12]}…)")
    params = model.parameters()
    missing = params.keys() - ckpt.params.keys()
    extra = ckpt.params.keys() - params.keys()
    if missing or extra:
        raise ValueError(f"parameter names do not match: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, arr in ckpt.params.items():
        t = params[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ValueError(f"parameter {name!r} has shape {arr.shape}, "
                             f"expected {tuple(t.shape)}")
        t.data = arr.astype(t.data.dtype, copy=False)
        t.grad = None
    for name, arr in ckpt.buffers.items():
        model.set_buffer(name, arr)
    return ckpt


def load_model(path) -> tuple:
    """Rebuild the named zoo model from a checkpoint file: (model, CheckpointData)."""
    from .zoo import get_model_spec

    ckpt = read_checkpoint(path)
    model = Model(get_model_spec(ckpt.header["model"]), np.random.default_rng(0))
    restore_model(ckpt, model)
    return model, ckpt
