import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
from toolz import merge  # type: ignore

from cvtocc.errors import ContainerError
from cvtocc.load import read_checkpoint, read_dataset
from cvtocc.pure import config_hash
from cvtocc.save import write_checkpoint, write_dataset
from cvtocc.synthetic_world import SceneConfig, generate_dataset
from cvtocc.trainer import TrainConfig, resume, train
from cvtocc.tests.helpers import TINY_CONFIG


class TestDatasetContainer(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = generate_dataset(SceneConfig.from_config(TINY_CONFIG), 2, 1)
        cls.hash = config_hash(TINY_CONFIG)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "data", "tiny.cvd")

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, path=None) -> int:
        return write_dataset(path or self.path, self.dataset, self.hash, TINY_CONFIG["strides"])

    def test_round_trip(self):
        size = self.write()
        self.assertEqual(size, os.path.getsize(self.path))
        loaded, header = read_dataset(self.path)
        self.assertEqual(header["config_hash"], self.hash)
        self.assertEqual(header["sample_count"], 3)
        self.assertEqual(loaded.grid, self.dataset.grid)
        self.assertEqual(loaded.class_set.names, self.dataset.class_set.names)
        self.assertEqual((len(loaded.train), len(loaded.eval)), (2, 1))
        for original, copy in zip(self.dataset.train + self.dataset.eval, loaded.train + loaded.eval):
            self.assertEqual(copy.ego_speed, original.ego_speed)
            self.assertTrue(np.array_equal(copy.gt.labels, original.gt.labels))
            self.assertTrue(np.array_equal(copy.mask.mask, original.mask.mask))
            for a, b in zip(original.window.frames, copy.window.frames):
                self.assertTrue(np.array_equal(a.features, b.features))
                self.assertTrue(np.array_equal(a.frame_pose.transform, b.frame_pose.transform))
                self.assertEqual(a.frame_pose.timestamp, b.frame_pose.timestamp)

    def test_fractional_strides_in_header(self):
        write_dataset(self.path, self.dataset, self.hash, [-0.5, 0.0, 0.5])
        _, header = read_dataset(self.path)
        self.assertEqual(header["strides"], [-0.5, 0.0, 0.5])

    def test_rewrite_is_byte_identical(self):
        self.write()
        loaded, header = read_dataset(self.path)
        again = os.path.join(self.tmp.name, "again.cvd")
        write_dataset(again, loaded, header["config_hash"], header["strides"])
        self.assertEqual(Path(self.path).read_bytes(), Path(again).read_bytes())

    def test_corrupted_record(self):
        self.write()
        blob = bytearray(Path(self.path).read_bytes())
        blob[-40] ^= 0xFF
        Path(self.path).write_bytes(bytes(blob))
        with self.assertRaises(ContainerError):
            read_dataset(self.path)

    def test_truncated_file(self):
        self.write()
        blob = Path(self.path).read_bytes()
        Path(self.path).write_bytes(blob[: len(blob) // 2])
        with self.assertRaises(ContainerError):
            read_dataset(self.path)

    def test_bad_magic(self):
        self.write()
        blob = Path(self.path).read_bytes()
        Path(self.path).write_bytes(b"NOTCVT\0\0" + blob[8:])
        with self.assertRaises(ContainerError):
            read_dataset(self.path)

    def test_missing_file(self):
        with self.assertRaises(ContainerError):
            read_dataset(os.path.join(self.tmp.name, "absent.cvd"))


class TestCheckpointContainer(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = generate_dataset(SceneConfig.from_config(TINY_CONFIG), 3, 1)
        cls.cfg = TrainConfig.from_config(merge(TINY_CONFIG, {"epochs": 3}))

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "run", "checkpoint.cvt")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        checkpoint = train(self.cfg, self.dataset, until_epoch=1).checkpoint
        write_checkpoint(self.path, checkpoint)
        loaded = read_checkpoint(self.path)
        self.assertEqual(loaded.epoch, 1)
        self.assertEqual(loaded.config, checkpoint.config)
        self.assertEqual(loaded.config_hash, checkpoint.config_hash)
        self.assertEqual(loaded.rng_state, checkpoint.rng_state)
        self.assertEqual(loaded.adam.step, checkpoint.adam.step)
        self.assertEqual(loaded.params.keys(), checkpoint.params.keys())
        for name, values in checkpoint.params.items():
            self.assertTrue(np.array_equal(loaded.params[name], values))
            self.assertEqual(loaded.params[name].dtype, values.dtype)
            self.assertTrue(np.array_equal(loaded.adam.m[name], checkpoint.adam.m[name]))

    def test_rewrite_is_byte_identical(self):
        checkpoint = train(self.cfg, self.dataset, until_epoch=1).checkpoint
        write_checkpoint(self.path, checkpoint)
        again = os.path.join(self.tmp.name, "again.cvt")
        write_checkpoint(again, read_checkpoint(self.path))
        self.assertEqual(Path(self.path).read_bytes(), Path(again).read_bytes())

    def test_resume_from_file_matches_uninterrupted_run(self):
        full = train(self.cfg, self.dataset)
        write_checkpoint(self.path, train(self.cfg, self.dataset, until_epoch=1).checkpoint)
        resumed = resume(read_checkpoint(self.path), self.dataset)
        for name, values in full.checkpoint.params.items():
            self.assertTrue(np.array_equal(resumed.checkpoint.params[name], values))

    def test_corrupted_checksum(self):
        write_checkpoint(self.path, train(self.cfg, self.dataset, until_epoch=1).checkpoint)
        blob = bytearray(Path(self.path).read_bytes())
        blob[len(blob) // 2] ^= 0x01
        Path(self.path).write_bytes(bytes(blob))
        with self.assertRaises(ContainerError):
            read_checkpoint(self.path)

    def test_dataset_is_not_a_checkpoint(self):
        data_path = os.path.join(self.tmp.name, "tiny.cvd")
        write_dataset(data_path, self.dataset, "0" * 64, TINY_CONFIG["strides"])
        with self.assertRaises(ContainerError):
            read_checkpoint(data_path)

    def test_missing_file(self):
        with self.assertRaises(ContainerError):
            read_checkpoint(os.path.join(self.tmp.name, "absent.cvt"))


if __name__ == "__main__":
    unittest.main()
