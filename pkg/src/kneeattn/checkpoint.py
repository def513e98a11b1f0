"""Parameter checkpoints: one binary file holding a versioned header with
layer-name-keyed shapes followed by raw little-endian float64 blobs."""

import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"KATTNCK1"
VERSION = 1


def save_checkpoint(state, path):
    """Write an ordered {name: array} mapping."""
    entries = [{"name": name, "shape": list(np.asarray(v).shape)} for name, v in state.items()]
    header = json.dumps({"version": VERSION, "params": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for v in state.values():
            fh.write(np.asarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint (bad magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        state = OrderedDict()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"truncated checkpoint: {entry['name']} expected {8 * n} bytes")
            state[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return state
