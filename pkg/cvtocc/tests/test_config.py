import os
import tempfile
import unittest

import yaml

from cvtocc.constants import DEFAULT_CONFIG
from cvtocc.errors import ConfigError
from cvtocc.load import load_config, load_manifest
from cvtocc.pure import (
    apply_sweep_value,
    config_hash,
    format_value,
    mean_std,
    parse_sweep_option,
    time_span,
)


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "conf", "config.yaml")

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, data) -> None:
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as file:
            yaml.dump(data, file)

    def test_missing_file_is_created_with_defaults(self):
        config = load_config(self.path)
        self.assertTrue(os.path.isfile(self.path))
        self.assertEqual(config, DEFAULT_CONFIG)

    def test_partial_file_is_filled_from_defaults(self):
        self.write({"grid_width": 16, "cvt_lambda": 0.5})
        config = load_config(self.path)
        self.assertEqual(config["grid_width"], 16)
        self.assertEqual(config["cvt_lambda"], 0.5)
        self.assertEqual(config["grid_height"], DEFAULT_CONFIG["grid_height"])

    def test_fractional_strides_are_accepted(self):
        self.write({"strides": [-1.5, -0.5, 0, 0.5, 1.5]})
        config = load_config(self.path)
        self.assertEqual(config["strides"], [-1.5, -0.5, 0, 0.5, 1.5])

    def test_unknown_key_is_named(self):
        self.write({"grid_widht": 16})
        with self.assertRaisesRegex(ConfigError, "grid_widht"):
            load_config(self.path)

    def test_invalid_value_is_named(self):
        self.write({"interpolation": "cubic"})
        with self.assertRaisesRegex(ConfigError, "interpolation"):
            load_config(self.path)
        self.write({"grid_depth": 0})
        with self.assertRaisesRegex(ConfigError, "grid_depth"):
            load_config(self.path)
        self.write({"batch_size": 4})
        with self.assertRaisesRegex(ConfigError, "batch_size"):
            load_config(self.path)

    def test_not_a_mapping(self):
        self.write([1, 2, 3])
        with self.assertRaises(ConfigError):
            load_config(self.path)


class TestLoadManifest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "manifest.yaml")

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, data) -> None:
        with open(self.path, "w", encoding="utf-8") as file:
            yaml.dump(data, file)

    def test_valid_manifest_resolves_config_path(self):
        self.write({"config": "tiny.yaml", "seeds": [0, 1], "sweep": {"axis": "frame_count", "values": [1, 3]}})
        manifest = load_manifest(self.path)
        self.assertEqual(manifest["config"], os.path.join(self.tmp.name, "tiny.yaml"))
        self.assertEqual(manifest["seeds"], [0, 1])

    def test_none_axis_needs_no_values(self):
        self.write({"seeds": [0], "sweep": {"axis": "none"}})
        self.assertEqual(load_manifest(self.path)["sweep"]["axis"], "none")

    def test_invalid_manifests(self):
        bad = [
            {"seeds": [], "sweep": {"axis": "none"}},
            {"seeds": [0], "sweep": {"axis": "voxel_size", "values": [0.5]}},
            {"seeds": [0], "sweep": {"axis": "frame_count"}},
            {"seeds": [0], "sweep": {"axis": "frame_count", "values": [0]}},
            {"seeds": [0], "sweep": {"axis": "cvt_supervision", "values": ["yes"]}},
            {"seeds": [0], "sweep": {"axis": "none"}, "extra": 1},
        ]
        for manifest in bad:
            self.write(manifest)
            with self.assertRaises(ConfigError, msg=str(manifest)):
                load_manifest(self.path)

    def test_missing_manifest(self):
        with self.assertRaises(ConfigError):
            load_manifest(os.path.join(self.tmp.name, "absent.yaml"))


class TestPure(unittest.TestCase):
    def test_config_hash_ignores_key_order(self):
        a = {"x": 1, "y": [1, 2]}
        b = {"y": [1, 2], "x": 1}
        self.assertEqual(config_hash(a), config_hash(b))
        self.assertNotEqual(config_hash(a), config_hash({"x": 2, "y": [1, 2]}))
        self.assertEqual(len(config_hash(a)), 64)

    def test_format_value(self):
        self.assertEqual(format_value(None), "nan")
        self.assertEqual(format_value(1 / 3), "0.333333")
        self.assertEqual(format_value(1.0), "1")

    def test_time_span(self):
        self.assertEqual(time_span(7, 0.5), 3.0)
        self.assertEqual(time_span(1, 0.5), 0.0)

    def test_apply_sweep_value(self):
        config = {"frame_count": 7, "seed": 0}
        self.assertEqual(apply_sweep_value(config, "frame_count", 3), {"frame_count": 3, "seed": 0})
        self.assertEqual(config["frame_count"], 7)
        self.assertEqual(apply_sweep_value(config, "none", None), config)
        with self.assertRaises(ConfigError):
            apply_sweep_value(config, "voxel_size", 0.4)

    def test_parse_sweep_option(self):
        self.assertEqual(parse_sweep_option("frame_count=1,3,7"), ("frame_count", [1, 3, 7]))
        self.assertEqual(parse_sweep_option("cvt_supervision=true,false"), ("cvt_supervision", [True, False]))
        self.assertEqual(parse_sweep_option("frame_interval=0.5"), ("frame_interval", [0.5]))
        with self.assertRaises(ConfigError):
            parse_sweep_option("frame_count")

    def test_mean_std(self):
        self.assertEqual(mean_std([]), (None, None))
        self.assertEqual(mean_std([1.0, 3.0]), (2.0, 1.0))


if __name__ == "__main__":
    unittest.main()
