import os

import numpy as np
import pytest
import torch

from mfgflow import _io


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    _io.atomic_write_text(p, "one")
    _io.atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]
    mode = os.stat(p).st_mode & 0o777
    assert mode == 0o666 & ~_io._UMASK


def test_failed_write_keeps_old_file(tmp_path, monkeypatch):
    p = tmp_path / "f.txt"
    _io.atomic_write_text(p, "old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        _io.atomic_write_text(p, "new")
    assert p.read_text() == "old"
    assert [q.name for q in tmp_path.iterdir()] == ["f.txt"]


def test_npz_round_trip(tmp_path):
    header = {"kind": "X", "values": [1, 2]}
    arrays = {"a": np.arange(5.0), "b/c": np.eye(2)}
    _io.save_npz(tmp_path / "x.npz", header, arrays)
    h, a = _io.load_npz(tmp_path / "x.npz")
    assert h == header and np.array_equal(a["b/c"], np.eye(2))


def test_seeded_streams():
    a = _io.normal(3, (4, 2), 1, 2)
    assert torch.equal(a, _io.normal(3, (4, 2), 1, 2))
    assert not torch.equal(a, _io.normal(3, (4, 2), 1, 3))
    assert _io.generator(1, 5).random() == _io.generator(1, 5).random()
