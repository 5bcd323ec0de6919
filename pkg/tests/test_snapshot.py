import struct

import numpy as np
import pytest

from twin.features import default_schema, init_tables
from twin.snapshot import (SnapshotError, load_checkpoint, load_tables, read_tensors, save_checkpoint,
                           save_tables, write_tensors)


class TestTensors:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 7))}
        write_tensors(tmp_path / "t.bin", tensors.items())
        back = read_tensors(tmp_path / "t.bin")
        assert list(back) == ["a", "b"]
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_layout_is_little_endian_row_major(self, tmp_path):
        write_tensors(tmp_path / "t.bin", [("w", np.array([[1.0, 2.0], [3.0, 4.0]]))])
        data = (tmp_path / "t.bin").read_bytes()
        assert data[:4] == b"TWIN"
        assert struct.unpack_from("<I", data, 4) == (1,)
        assert data[12:13] == b"w"
        assert struct.unpack_from("<II", data, 13) == (2, 2)
        assert struct.unpack_from("<4d", data, 21) == (1.0, 2.0, 3.0, 4.0)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"NOPE\x00\x00\x00\x00")
        with pytest.raises(SnapshotError):
            read_tensors(tmp_path / "t.bin")

    def test_truncated(self, tmp_path):
        write_tensors(tmp_path / "t.bin", [("w", np.ones((4, 4)))])
        data = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-8])
        with pytest.raises(SnapshotError):
            read_tensors(tmp_path / "t.bin")

    def test_three_dims_rejected(self, tmp_path):
        with pytest.raises(SnapshotError):
            write_tensors(tmp_path / "t.bin", [("w", np.ones((2, 2, 2)))])


class TestTables:
    def test_header_is_dim_by_vocab(self, tmp_path):
        schema = default_schema(20, 5)
        tables = init_tables(schema, np.random.default_rng(1))
        save_tables(tmp_path / "emb.bin", tables)
        raw = read_tensors(tmp_path / "emb.bin")
        assert raw["video_id"].shape == (64, 20)
        back = load_tables(tmp_path / "emb.bin")
        for name, t in tables.items():
            np.testing.assert_array_equal(back[name].weights, t.weights)


class TestCheckpoint:
    def test_round_trip_with_shapes(self, tmp_path):
        tensors = {"beta": np.arange(5.0), "W": np.ones((3, 2))}
        save_checkpoint(tmp_path, tensors, version=1, extra={"note": "x"})
        back, version = load_checkpoint(tmp_path)
        assert version == 1
        assert back["beta"].shape == (5,)
        np.testing.assert_array_equal(back["W"], tensors["W"])

    def test_versions_must_increase(self, tmp_path):
        save_checkpoint(tmp_path, {"a": np.ones(2)}, version=3)
        with pytest.raises(SnapshotError):
            save_checkpoint(tmp_path, {"a": np.ones(2)}, version=3)
        save_checkpoint(tmp_path, {"a": np.zeros(2)}, version=4)
        assert load_checkpoint(tmp_path)[1] == 4
