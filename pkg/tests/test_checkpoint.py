"""Binary checkpoint format: round trips, stability, corruption handling."""

import numpy as np
import pytest

from promptrack.checkpoint import (MAGIC, CheckpointError, load_checkpoint,
                                   save_checkpoint)


def sample_arrays(rng):
    return {"w/a": rng.normal(size=(3, 4)).astype(np.float32),
            "w/b": rng.normal(size=(5,)).astype(np.float32),
            "scalar": np.float32(2.5)}


class TestRoundTrip:
    def test_arrays_and_meta_survive(self, tmp_path, rng):
        arrays = sample_arrays(rng)
        meta = {"epoch_done": 3, "note": "x"}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, arrays, meta)
        back, back_meta = load_checkpoint(path)
        assert back_meta == meta
        assert set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k],
                                          np.asarray(arrays[k], dtype=np.float32))

    def test_bytes_independent_of_insertion_order(self, tmp_path, rng):
        """Sorted array order makes the file a function of its contents."""
        arrays = sample_arrays(rng)
        reversed_arrays = dict(reversed(list(arrays.items())))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, arrays, {"k": 1})
        save_checkpoint(b, reversed_arrays, {"k": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_empty_arrays_dict(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        save_checkpoint(path, {}, {"only": "meta"})
        arrays, meta = load_checkpoint(path)
        assert arrays == {} and meta == {"only": "meta"}


class TestCorruption:
    def write_valid(self, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, sample_arrays(rng), {"k": 1})
        return path

    def test_bad_magic(self, tmp_path, rng):
        path = self.write_valid(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path, rng):
        path = self.write_valid(tmp_path, rng)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path, rng):
        path = self.write_valid(tmp_path, rng)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path, rng):
        path = self.write_valid(tmp_path, rng)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_magic_constant(self):
        assert MAGIC == b"EPIP" and len(MAGIC) == 4
