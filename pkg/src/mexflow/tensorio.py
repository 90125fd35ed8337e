"""Binary tensor snapshots and parameter-set checkpoints.

Snapshot layout: magic "MXTN", u8 version (1), u8 dtype (0 = float32,
1 = float64), u8 rank, little-endian u32 extents, then the row-major payload,
little-endian. A checkpoint is a directory of snapshots plus an index.json
mapping parameter names to files.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MXTN"
_DTYPES = {0: "<f4", 1: "<f8"}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    pass


def save_tensor(path, array, dtype=np.float32):
    arr = np.ascontiguousarray(array, dtype=dtype)
    code = _CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", 1, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(_DTYPES[code]).tobytes())


def load_tensor(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != 1:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", raw[7 : 7 + 4 * rank])
    payload = raw[7 + 4 * rank :]
    expected = int(np.prod(shape)) * int(_DTYPES[code][-1])
    if len(payload) != expected:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()


def save_params(directory, named_params, dtype=np.float64):
    """Write one snapshot per parameter plus an index.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(named_params):
        fname = name.replace("/", "_") + ".mxtn"
        save_tensor(directory / fname, named_params[name], dtype=dtype)
        index[name] = fname
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)


def load_params(directory):
    directory = Path(directory)
    with open(directory / "index.json") as fh:
        index = json.load(fh)
    return {name: load_tensor(directory / fname) for name, fname in index.items()}
