"""Flat parameter vectors with a named layout, and their checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops

__all__ = ["CHECKPOINT_MAGIC", "CHECKPOINT_VERSION", "ModelParams", "load_checkpoint",
           "save_checkpoint"]

CHECKPOINT_MAGIC = b"NPKRY"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Flat parameter vector ``theta`` plus the slices that name its layers.

    ``layout`` maps a layer name to ``(start, stop, shape)``; the slices must
    tile ``theta`` exactly, in order. ``arch`` is a JSON-serializable
    description of the model that owns the parameters.
    """

    theta: np.ndarray
    layout: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        pos = 0
        for name, (start, stop, shape) in self.layout.items():
            if start != pos or stop - start != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"layout slice {name!r} does not tile the parameter vector")
            pos = stop
        if pos != self.theta.size:
            raise ValueError(f"layout covers {pos} entries, theta has {self.theta.size}")

    @property
    def size(self):
        return self.theta.size

    def copy(self, theta=None):
        return ModelParams(self.theta.copy() if theta is None else theta,
                           dict(self.layout), json.loads(json.dumps(self.arch)))

    def view(self, theta=None):
        """Map layer names to arrays (or tape Variables) shaped per the layout.

        ``theta`` defaults to the stored vector; pass a tape Variable to get
        recorded slices.
        """
        theta = self.theta if theta is None else theta
        out = {}
        for name, (start, stop, shape) in self.layout.items():
            out[name] = ops.reshape(ops.index(theta, slice(start, stop)), shape)
        return out


def _encode_header(params: ModelParams) -> bytes:
    layout = [[name, start, stop, list(shape)] for name, (start, stop, shape) in params.layout.items()]
    return json.dumps({"arch": params.arch, "layout": layout}, sort_keys=True).encode()


def save_checkpoint(path, params: ModelParams):
    """Write ``magic | u32 version | u32 header length | header | u64 n | f64[n]``."""
    header = _encode_header(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[5:13])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[13:13 + hlen])
    pos = 13 + hlen
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    theta = np.frombuffer(data[pos + 8:], dtype="<f8")
    if theta.size != n:
        raise ValueError(f"{path}: expected {n} parameters, found {theta.size}")
    layout = {name: (start, stop, tuple(shape)) for name, start, stop, shape in header["layout"]}
    return ModelParams(theta.astype(np.float64), layout, header["arch"])
