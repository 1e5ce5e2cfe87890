import logging
import os
import tempfile
import unittest

from fundus_lab.config import DEFAULTS, format_config, load_config, parse_config_text, section
from fundus_lab.errors import InvalidConfigError


class TestConfig(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "run.cfg")
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write("# small run\n"
                     "train.max_epochs = 30\n"
                     "train.batch_size = 8   # fits in memory\n"
                     "fagnet.input_size = 64\n"
                     "fagnet.dropout_rates = 0.5, 0.4, 0.3\n"
                     "fgcnet.use_skips = false\n"
                     "loss.kl_variant = paper\n")

    def tearDown(self):
        self.tmp.cleanup()
        logging.disable(logging.NOTSET)

    def test_defaults_only(self):
        self.assertEqual(load_config(), DEFAULTS)

    def test_file_values_are_typed(self):
        cfg = load_config(self.path)
        self.assertEqual(cfg["train.max_epochs"], 30)
        self.assertEqual(cfg["train.batch_size"], 8)
        self.assertEqual(cfg["fagnet.dropout_rates"], (0.5, 0.4, 0.3))
        self.assertIs(cfg["fgcnet.use_skips"], False)
        self.assertEqual(cfg["loss.kl_variant"], "paper")
        self.assertEqual(cfg["train.initial_lr"], 0.001)

    def test_precedence(self):
        cfg = load_config(self.path, overrides=["train.max_epochs=5", "train.seed=1"], seed=9)
        self.assertEqual(cfg["train.max_epochs"], 5)
        self.assertEqual(cfg["train.seed"], 9)

    def test_round_trip(self):
        cfg = load_config(self.path, overrides=["train.name=demo"])
        self.assertEqual(dict(DEFAULTS, **parse_config_text(format_config(cfg))), cfg)

    def test_unknown_key(self):
        with self.assertRaisesRegex(InvalidConfigError, "train.epochs"):
            load_config(overrides=["train.epochs=3"])

    def test_bad_value_and_bad_line(self):
        with self.assertRaises(InvalidConfigError):
            load_config(overrides=["train.batch_size=many"])
        with self.assertRaises(InvalidConfigError):
            parse_config_text("train.batch_size 8\n")
        with self.assertRaises(InvalidConfigError):
            load_config(overrides=["fgcnet.use_skips=maybe"])

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_config(os.path.join(self.tmp.name, "absent.cfg"))

    def test_section(self):
        fagnet = section(DEFAULTS, "fagnet")
        self.assertIn("base_filters", fagnet)
        self.assertNotIn("fagnet.base_filters", fagnet)


if __name__ == '__main__':
    unittest.main()
