"""Binary batch container for input samples and solver truths.

Layout: 16-byte magic (``NPOLDS01`` zero-padded), little-endian uint64 header
length, UTF-8 JSON header, then raw float64 little-endian payload: the
``n x p`` parameter block followed by the ``n x channels x grid`` field block.
A ``<path>.json`` sidecar mirrors the header for quick inspection.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import rng
from .grids import Field, Grid, GridError, InputSample

MAGIC = b"NPOLDS01" + b"\x00" * 8
FORMAT_VERSION = 1


class DatasetError(IOError):
    pass


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _header(problem_id, kind, grid, n, seed, p_dim, channels, field_shape):
    return {
        "format_version": FORMAT_VERSION,
        "problem_id": problem_id,
        "kind": kind,
        "grid": grid.to_dict(),
        "n": int(n),
        "seed": int(seed),
        "dtype": "f64le",
        "params_per_sample": int(p_dim),
        "field_channels": int(channels),
        "field_shape": [int(s) for s in field_shape],
    }


def save_batch(path: str, samples: list[InputSample], *, seed: int, kind: str = "inputs",
               fields: list[Field] | None = None, grid: Grid | None = None) -> dict:
    """Write a batch file.  ``fields`` overrides the stored per-sample fields
    (used for solver-truth batches keyed to the same samples)."""
    if not samples:
        raise DatasetError("refusing to write an empty batch")
    flds = fields if fields is not None else [s.field for s in samples]
    if len(flds) != len(samples):
        raise DatasetError("fields/samples length mismatch")
    g = grid if grid is not None else flds[0].grid
    p_dim = len(samples[0].params)
    ch = flds[0].channels
    shape = flds[0].values.shape[1:]
    for s in samples:
        if len(s.params) != p_dim:
            raise DatasetError("inconsistent parameter dimensions in batch")
    for f in flds:
        if f.values.shape != (ch,) + shape:
            raise DatasetError("inconsistent field shapes in batch")
    header = _header(samples[0].problem_id, kind, g, len(samples), seed, p_dim, ch, shape)
    hbytes = _canonical_json(header).encode("utf-8")
    params = np.stack([s.params for s in samples]).astype("<f8")
    values = np.stack([f.values for f in flds]).astype("<f8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(params.tobytes())
        fh.write(values.tobytes())
    os.replace(tmp, path)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        fh.write(_canonical_json(header) + "\n")
    return header


def load_batch(path: str) -> tuple[dict, list[InputSample]]:
    """Read a batch file back into samples (header, samples)."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(16)
            if magic != MAGIC:
                raise DatasetError(f"{path}: bad magic, not a batch file")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            n = header["n"]
            p_dim = header["params_per_sample"]
            ch = header["field_channels"]
            shape = tuple(header["field_shape"])
            params = np.frombuffer(fh.read(n * p_dim * 8), dtype="<f8")
            values = np.frombuffer(fh.read(n * ch * int(np.prod(shape)) * 8), dtype="<f8")
    except (struct.error, json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"{path}: corrupt batch file ({exc})") from exc
    if params.size != n * p_dim or values.size != n * ch * int(np.prod(shape)):
        raise DatasetError(f"{path}: truncated batch file")
    params = params.reshape(n, p_dim)
    values = values.reshape((n, ch) + shape)
    grid = Grid.from_dict(header["grid"])
    field_grid = grid if grid.shape == shape else grid.spatial_grid()
    if field_grid.shape != shape:
        raise DatasetError(f"{path}: field shape does not match grid")
    samples = []
    for i in range(n):
        try:
            fld = Field(field_grid, values[i].copy())
        except GridError as exc:
            raise DatasetError(f"{path}: sample {i}: {exc}") from exc
        # Per-sample seeds follow the batch derivation rule (seed, index).
        samples.append(
            InputSample(
                header["problem_id"],
                params[i].copy(),
                rng.stream_key(header["seed"], i),
                fld,
            )
        )
    return header, samples
