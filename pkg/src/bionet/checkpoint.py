"""Binary checkpoint container.

Layout::

    BIONET-CHECKPOINT 1
    config {"t": 3, ...}
    seed 0
    arrays 123
    <name>\t<d0,d1,...>\t<byte offset>      (one line per array)
    end <data bytes>
    <raw little-endian float32 data>

Parameters come first (registry order), then batch-norm running statistics.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FormatError
from .graph import BioNet, BioNetConfig, build

MAGIC = "BIONET-CHECKPOINT 1"
_DTYPE = np.dtype("<f4")


def _arrays(net: BioNet) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in net.parameters().items()}
    arrays.update(net.buffers())
    return arrays


def save(net: BioNet, path: str | os.PathLike) -> int:
    """Write ``net`` to ``path``; returns the number of bytes written."""
    arrays = _arrays(net)
    lines = [MAGIC, "config " + json.dumps(net.config.to_dict(), sort_keys=True), f"seed {net.seed}",
             f"arrays {len(arrays)}"]
    offset = 0
    for name, a in arrays.items():
        lines.append(f"{name}\t{','.join(map(str, a.shape))}\t{offset}")
        offset += a.size * _DTYPE.itemsize
    lines.append(f"end {offset}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())
    return len(header) + offset


def _read_header(fh) -> tuple[dict, int, list[tuple[str, tuple[int, ...], int]], int]:
    def line() -> str:
        raw = fh.readline()
        if not raw.endswith(b"\n"):
            raise FormatError("truncated checkpoint header")
        try:
            return raw[:-1].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint header is not valid text") from exc

    if line() != MAGIC:
        raise FormatError("not a bionet checkpoint (bad magic line)")
    try:
        key, _, payload = line().partition(" ")
        if key != "config":
            raise ValueError("missing config line")
        config = json.loads(payload)
        key, _, seed = line().partition(" ")
        if key != "seed":
            raise ValueError("missing seed line")
        key, _, count = line().partition(" ")
        if key != "arrays":
            raise ValueError("missing arrays line")
        entries = []
        for _ in range(int(count)):
            name, shape, offset = line().split("\t")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            entries.append((name, dims, int(offset)))
        key, _, total = line().partition(" ")
        if key != "end":
            raise ValueError("missing end line")
        return config, int(seed), entries, int(total)
    except (ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupted checkpoint header: {exc}") from exc


def read_config(path: str | os.PathLike) -> BioNetConfig:
    with open(path, "rb") as fh:
        config, _, _, _ = _read_header(fh)
    return BioNetConfig(**config)


def load(path: str | os.PathLike, config: BioNetConfig | None = None) -> BioNet:
    """Rebuild a network and restore every parameter and running statistic.

    With ``config`` given, the checkpoint must match it array by array; the
    first mismatching block is named in the raised :class:`CheckpointError`.
    """
    with open(path, "rb") as fh:
        stored, seed, entries, total = _read_header(fh)
        blob = fh.read()
    if len(blob) != total:
        raise FormatError(f"checkpoint data is {len(blob)} bytes, header declares {total}")
    try:
        cfg = config if config is not None else BioNetConfig(**stored)
    except TypeError as exc:
        raise FormatError(f"checkpoint config is not a BioNetConfig: {exc}") from exc
    net = build(cfg, seed)
    expected = _arrays(net)
    found = {name: (dims, offset) for name, dims, offset in entries}
    for name, arr in expected.items():
        if name not in found:
            raise CheckpointError(f"block {_block(name)}: array {name} missing from checkpoint")
        dims, _ = found[name]
        if dims != arr.shape:
            raise CheckpointError(
                f"block {_block(name)}: {name} has shape {dims} in checkpoint, network expects {arr.shape}"
            )
    for name in found:
        if name not in expected:
            raise CheckpointError(f"block {_block(name)}: checkpoint array {name} has no place in the network")
    params = net.parameters()
    for name, arr in expected.items():
        dims, offset = found[name]
        count = int(np.prod(dims, dtype=np.int64))
        end = offset + count * _DTYPE.itemsize
        if offset < 0 or end > len(blob):
            raise FormatError(f"array {name} extends past the end of the checkpoint")
        value = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).reshape(dims).astype(np.float32)
        if name in params:
            params[name].data = value
        else:
            net.set_buffer(name, value)
    return net


def _block(name: str) -> str:
    return name.rsplit(".", 1)[0]
