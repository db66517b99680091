"""Named random substreams and content hashing.

All randomness in a run derives from one root seed. A substream is identified
by a name and optional integer indices, so per-image streams do not depend on
worker count or processing order.
"""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np
import torch


def _key(name: str, *idx: int) -> list[int]:
    return [zlib.crc32(name.encode("utf-8"))] + [int(i) for i in idx]


def substream(root_seed: int, name: str, *idx: int) -> np.random.Generator:
    """Independent numpy Generator for ``(root_seed, name, *idx)``."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=_key(name, *idx))
    return np.random.Generator(np.random.PCG64(ss))


def substream_seed(root_seed: int, name: str, *idx: int) -> int:
    """A 63-bit integer seed for libraries that want one (torch, PIL)."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=_key(name, *idx))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def torch_generator(root_seed: int, name: str, *idx: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(root_seed, name, *idx))
    return g


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default).encode("utf-8")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def sha256_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def hash_arrays(arrays: dict) -> str:
    """Order-independent content hash of a name -> array mapping."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode("ascii"))
        h.update(repr(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
