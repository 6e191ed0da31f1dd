"""Network checkpoints: named float64 arrays behind a JSON header.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"NRCKPT01"
    bytes 8..15   uint64 header length H
    bytes 16..    H bytes of UTF-8 JSON header
    then          data section: arrays back to back, float64 little-endian,
                  C order, no padding

The header is an object with keys ``format`` (``"noisereg-checkpoint"``),
``version`` (1), ``network`` (the architecture, see ``Network.config``),
``meta`` (free-form), and ``arrays``: a list of
``{"name", "shape", "dtype": "<f8", "offset", "nbytes"}`` where ``offset``
counts from the start of the data section. Array order is the network's
parameter order followed by buffers, which keeps ``parameter_matrices``
ordering stable across save/load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import Network

MAGIC = b"NRCKPT01"
FORMAT = "noisereg-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


def save_checkpoint(net: Network, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    state = net.state_dict()
    entries, blobs, offset = [], [], 0
    for name, arr in state.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": FORMAT, "version": VERSION, "network": net.config(),
              "meta": meta or {}, "arrays": entries}
    raw = json.dumps(header, indent=1, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` without building a network."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')} v{header.get('version')}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: array {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    """Rebuild the network stored at ``path``; returns ``(network, meta)``."""
    header, arrays = read_checkpoint(path)
    net = Network.from_config(header["network"])
    net.load_state_dict(arrays)
    return net, header["meta"]
