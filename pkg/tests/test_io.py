import io
import os
import struct
import tempfile

import numpy as np
import pytest

from src.errors import DataError, DimensionError
from src.tensor import Tensor
from src.tensor.io import MAGIC, encode_tensor, load_cft, read_pgm, read_tensor, save_cft, write_pgm, write_tensor


class TestCftFormat:
    """Unit tests for the CFT tensor container"""

    @pytest.fixture
    def temp_dir(self):
        with tempfile.TemporaryDirectory() as path:
            yield path

    def test_header_layout(self):
        """Test magic, rank byte, little-endian u32 dims and float32 payload"""
        blob = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert blob[:4] == MAGIC == b"CFT1"
        assert blob[4] == 2
        assert struct.unpack("<II", blob[5:13]) == (2, 3)
        assert len(blob) == 13 + 6 * 4
        np.testing.assert_array_equal(np.frombuffer(blob[13:], dtype="<f4"), np.arange(6, dtype=np.float32))

    def test_stream_holds_consecutive_blocks(self):
        handle = io.BytesIO()
        write_tensor(handle, Tensor(np.ones((2, 2))))
        write_tensor(handle, np.zeros(3))
        handle.seek(0)
        assert read_tensor(handle).shape == (2, 2)
        assert read_tensor(handle).shape == (3,)

    def test_scalar_block(self):
        handle = io.BytesIO(encode_tensor(np.array(2.5)))
        value = read_tensor(handle)
        assert value.shape == ()
        assert float(value) == 2.5

    def test_file_round_trip(self, temp_dir):
        array = np.random.default_rng(0).standard_normal((2, 1, 4, 4)).astype(np.float32)
        path = save_cft(os.path.join(temp_dir, "nested", "x.cft"), array)
        np.testing.assert_array_equal(load_cft(path), array)

    def test_bad_magic(self):
        with pytest.raises(DataError):
            read_tensor(io.BytesIO(b"XXXX" + bytes(8)))

    def test_truncated_payload(self):
        with pytest.raises(DataError):
            read_tensor(io.BytesIO(encode_tensor(np.ones(4))[:-3]))

    def test_trailing_bytes_rejected(self, temp_dir):
        path = os.path.join(temp_dir, "x.cft")
        with open(path, "wb") as handle:
            handle.write(encode_tensor(np.ones(2)) + b"\x00")
        with pytest.raises(DataError):
            load_cft(path)


class TestPgm:
    """Unit tests for graymap mask dumps"""

    def test_binary_mask_levels(self, tmp_path):
        mask = np.array([[0, 1], [1, 0]])
        path = write_pgm(str(tmp_path / "m.pgm"), mask, num_classes=2)
        with open(path, "rb") as handle:
            assert handle.read(2) == b"P5"
        np.testing.assert_array_equal(read_pgm(path), [[0, 255], [255, 0]])

    def test_multiclass_spread(self, tmp_path):
        path = write_pgm(str(tmp_path / "m.pgm"), np.array([[0, 1, 2]]), num_classes=3)
        np.testing.assert_array_equal(read_pgm(path), [[0, 127, 255]])

    def test_rejects_non_2d(self, tmp_path):
        with pytest.raises(DimensionError):
            write_pgm(str(tmp_path / "m.pgm"), np.zeros((1, 2, 2)))
