import hashlib
import logging
import os
import tempfile
import unittest

import numpy as np
from PIL import Image

from fundus_lab.dataio import load_manifest
from fundus_lab.errors import InvalidInputError
from fundus_lab.synth import SynthParams, disc_mask, load_truth, synth_generate


def _digests(directory):
    names = sorted(n for n in os.listdir(directory) if n.endswith(".png"))
    result = {}
    for name in names:
        with open(os.path.join(directory, name), "rb") as fh:
            result[name] = hashlib.sha256(fh.read()).hexdigest()
    return result


class TestSynthGenerate(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()
        logging.disable(logging.NOTSET)

    def _dir(self, name):
        return os.path.join(self.tmp.name, name)

    def test_eight_images(self):
        manifest = synth_generate(SynthParams(count=8), self._dir("a"))
        self.assertEqual(len(manifest), 8)
        self.assertEqual(len(_digests(self._dir("a"))), 8)
        self.assertEqual([r.gender for r in manifest[:4]], ["female", "male", "female", "male"])
        self.assertEqual(len(set(manifest.subjects)), 8)
        for record in manifest:
            self.assertTrue(20 <= record.age_years <= 80)
            self.assertEqual(record.age_years, int(record.age_years))
            with Image.open(record.image_path) as img:
                self.assertEqual(img.size, (64, 64))
                self.assertEqual(img.mode, "RGB")

    def test_manifest_file_matches(self):
        manifest = synth_generate(SynthParams(count=5, seed=11), self._dir("a"))
        loaded = load_manifest(os.path.join(self._dir("a"), "manifest.csv"))
        self.assertEqual([(r.age_years, r.gender, r.subject_id) for r in loaded],
                         [(r.age_years, r.gender, r.subject_id) for r in manifest])

    def test_bit_identical_rerun(self):
        synth_generate(SynthParams(count=6, seed=5), self._dir("a"))
        synth_generate(SynthParams(count=6, seed=5), self._dir("b"))
        self.assertEqual(_digests(self._dir("a")), _digests(self._dir("b")))

    def test_seed_changes_output(self):
        synth_generate(SynthParams(count=4, seed=1), self._dir("a"))
        synth_generate(SynthParams(count=4, seed=2), self._dir("b"))
        self.assertNotEqual(_digests(self._dir("a")), _digests(self._dir("b")))

    def test_disc_intensity_grows_with_age(self):
        for seed in (1, 2, 3):
            out = self._dir(f"seed{seed}")
            synth_generate(SynthParams(count=24, seed=seed), out)
            pairs = []
            for row in load_truth(os.path.join(out, "truth.csv")):
                with Image.open(os.path.join(out, row["image_path"])) as img:
                    pixels = np.asarray(img, dtype=np.float64) / 255.0
                mask = disc_mask(pixels.shape[0], row["disc_cx"], row["disc_cy"], row["disc_r"] - 1)
                pairs.append((row["age_years"], float(pixels[mask].mean())))
            pairs.sort()
            for (age_a, a), (age_b, b) in zip(pairs, pairs[1:]):
                if age_b > age_a:
                    self.assertGreater(b, a, f"seed {seed}: ages {age_a} and {age_b}")
                else:
                    self.assertAlmostEqual(a, b, places=9)

    def test_single_image(self):
        manifest = synth_generate(SynthParams(count=1), self._dir("one"))
        self.assertEqual(len(manifest), 1)
        self.assertEqual(len(load_truth(os.path.join(self._dir("one"), "truth.csv"))), 1)

    def test_invalid_params(self):
        with self.assertRaises(InvalidInputError):
            SynthParams(count=0)
        with self.assertRaises(InvalidInputError):
            SynthParams(count=4, age_range=(60, 30))
        with self.assertRaises(InvalidInputError):
            SynthParams(count=4, image_size=8)
        with self.assertRaises(InvalidInputError):
            SynthParams(count=4, disc_brightness_slope=0.05)


class TestDiscMask(unittest.TestCase):

    def test_counts_pixel_centers(self):
        mask = disc_mask(8, 4.0, 4.0, 1.0)
        self.assertEqual(int(mask.sum()), 4)


if __name__ == '__main__':
    unittest.main()
