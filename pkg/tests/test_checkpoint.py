import struct
import tempfile
import unittest
import sys
from pathlib import Path

import numpy as np
sys.path.insert(1, str(Path(__file__).parents[1]))


import checkpoint
from model import Architecture, Dims
from numerics import Rng
from train import TrainConfig
from utils import CheckpointError

DIMS = Dims(static=5, dynamic=9)


class TestMethods(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.cfg = TrainConfig(rank=3, hidden=4, seed=12)
        self.model = Architecture.from_config("lstm", DIMS, self.cfg)
        self.params = self.model.init_params(Rng(1))

    def tearDown(self):
        self.tmp.cleanup()

    def test_container_layout(self):
        path = self.dir / "a.ckpt"
        checkpoint.write_checkpoint(path, {"note": "x"}, {"w": np.array([[1.0, 2.0]])})
        raw = path.read_bytes()
        self.assertEqual(raw[:5], b"SDRNN")
        version, meta_len = struct.unpack("<II", raw[5:13])
        self.assertEqual(version, checkpoint.FORMAT_VERSION)
        self.assertEqual(raw[-16:], np.array([1.0, 2.0], dtype="<f8").tobytes())
        meta, arrays = checkpoint.read_checkpoint(path)
        self.assertEqual(meta["note"], "x")
        self.assertIn("rng_algorithm", meta)
        np.testing.assert_array_equal(arrays["w"], [[1.0, 2.0]])

    def test_model_round_trip(self):
        path = self.dir / "model.ckpt"
        checkpoint.save_model(path, self.model, self.params, self.cfg, extra_meta={"split_seed": 3})
        model, params, cfg, meta, _ = checkpoint.load_model(path, expected_dims=DIMS)
        self.assertEqual(model, self.model)
        self.assertEqual(cfg, self.cfg)
        self.assertEqual(meta["split_seed"], 3)
        self.assertEqual(list(params), list(self.params))
        for name in params:
            np.testing.assert_array_equal(params[name], self.params[name])

    def test_save_load_save_is_byte_identical(self):
        first, second = self.dir / "1.ckpt", self.dir / "2.ckpt"
        checkpoint.save_model(first, self.model, self.params, self.cfg)
        meta, arrays = checkpoint.read_checkpoint(first)
        checkpoint.write_checkpoint(second, meta, arrays)
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_bad_magic(self):
        path = self.dir / "bad.ckpt"
        path.write_bytes(b"NOTIT" + bytes(20))
        with self.assertRaises(CheckpointError):
            checkpoint.read_checkpoint(path)

    def test_truncated(self):
        path = self.dir / "t.ckpt"
        checkpoint.save_model(path, self.model, self.params, self.cfg)
        path.write_bytes(path.read_bytes()[:-7])
        with self.assertRaises(CheckpointError):
            checkpoint.read_checkpoint(path)

    def test_unknown_version(self):
        path = self.dir / "v.ckpt"
        checkpoint.save_model(path, self.model, self.params, self.cfg)
        raw = bytearray(path.read_bytes())
        raw[5:9] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with self.assertRaises(CheckpointError):
            checkpoint.read_checkpoint(path)

    def test_corrupt_metadata(self):
        for blob in (b"{not json", b"\xff\xfe\xfd", b"[1, 2]"):
            path = self.dir / "corrupt.ckpt"
            path.write_bytes(b"SDRNN" + struct.pack("<II", checkpoint.FORMAT_VERSION, len(blob)) + blob)
            with self.assertRaises(CheckpointError):
                checkpoint.read_checkpoint(path)

    def test_dimension_mismatch(self):
        path = self.dir / "m.ckpt"
        checkpoint.save_model(path, self.model, self.params, self.cfg)
        with self.assertRaises(CheckpointError):
            checkpoint.load_model(path, expected_dims=Dims(static=5, dynamic=10))

    def test_missing_tensor(self):
        path = self.dir / "missing.ckpt"
        params = dict(self.params)
        del params["B"]
        checkpoint.save_model(path, self.model, params, self.cfg)
        with self.assertRaises(CheckpointError):
            checkpoint.load_model(path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            checkpoint.read_checkpoint(self.dir / "nothing.ckpt")


if __name__ == '__main__':
    unittest.main()
