import json
import os

import numpy as np
import pytest

from neuropol import datasets as ds
from neuropol import grids as gr


def test_roundtrip(tmp_path):
    batch = gr.sample_batch("poisson", 4, seed=3)
    path = os.path.join(tmp_path, "b.npolds")
    header = ds.save_batch(path, batch, seed=3)
    assert header["n"] == 4
    h2, loaded = ds.load_batch(path)
    assert h2 == header
    for a, b in zip(batch, loaded):
        assert np.array_equal(a.params, b.params)
        assert np.array_equal(a.field.values, b.field.values)
        assert a.seed == b.seed


def test_sidecar_mirrors_header(tmp_path):
    batch = gr.sample_batch("burgers", 2, seed=1)
    path = os.path.join(tmp_path, "b.npolds")
    header = ds.save_batch(path, batch, seed=1)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        assert json.load(fh) == header


def test_deterministic_bytes(tmp_path):
    batch = gr.sample_batch("nagumo", 3, seed=7)
    p1 = os.path.join(tmp_path, "a.npolds")
    p2 = os.path.join(tmp_path, "b.npolds")
    ds.save_batch(p1, batch, seed=7)
    ds.save_batch(p2, batch, seed=7)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_magic_and_truncation_errors(tmp_path):
    batch = gr.sample_batch("poisson", 2, seed=5)
    path = os.path.join(tmp_path, "b.npolds")
    ds.save_batch(path, batch, seed=5)
    raw = open(path, "rb").read()
    bad = os.path.join(tmp_path, "bad.npolds")
    with open(bad, "wb") as fh:
        fh.write(b"WRONGMAG" + raw[8:])
    with pytest.raises(ds.DatasetError):
        ds.load_batch(bad)
    trunc = os.path.join(tmp_path, "trunc.npolds")
    with open(trunc, "wb") as fh:
        fh.write(raw[:-40])
    with pytest.raises(ds.DatasetError):
        ds.load_batch(trunc)


def test_truth_batch_kind(tmp_path):
    from neuropol import solvers as sv

    grid = gr.default_grid("nagumo")
    batch = gr.sample_batch("nagumo", 2, seed=9, grid=grid)
    truths = [sv.solve_nagumo(s.field, grid=grid).solution for s in batch]
    path = os.path.join(tmp_path, "t.npolds")
    header = ds.save_batch(path, batch, seed=9, kind="truth", fields=truths, grid=grid)
    assert header["kind"] == "truth"
    assert tuple(header["field_shape"]) == (65, 65)
    _, loaded = ds.load_batch(path)
    assert loaded[0].field.values.shape == (1, 65, 65)


def test_empty_batch_rejected(tmp_path):
    with pytest.raises(ds.DatasetError):
        ds.save_batch(os.path.join(tmp_path, "e.npolds"), [], seed=0)
