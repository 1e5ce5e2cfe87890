import logging
import math
import os
import tempfile
import unittest

import numpy as np

from fundus_lab.errors import DatasetFormatError, InvalidInputError, UndefinedMetricError
from fundus_lab.metrics import (
    ConfusionCounts,
    EvalBatch,
    classification_report,
    confusion_counts,
    cs_score,
    cumulative_scores,
    load_age_predictions,
    load_gender_predictions,
    mcs_score,
    mcs_table,
    regression_metrics,
)


class TestEvalBatch(unittest.TestCase):

    def test_empty_batch_rejected(self):
        with self.assertRaises(InvalidInputError):
            EvalBatch([], [])

    def test_length_mismatch_rejected(self):
        with self.assertRaises(InvalidInputError):
            EvalBatch([1, 2], [1])

    def test_non_finite_rejected(self):
        with self.assertRaises(InvalidInputError):
            EvalBatch([1.0, math.nan], [1.0, 2.0])

    def test_arrays_are_read_only(self):
        batch = EvalBatch([1, 2], [1, 2])
        with self.assertRaises(ValueError):
            batch.actual[0] = 5


class TestRegressionMetrics(unittest.TestCase):

    def setUp(self):
        logging.disable(logging.CRITICAL)

    def tearDown(self):
        logging.disable(logging.NOTSET)

    def test_hand_enumerated_batch(self):
        report = regression_metrics(EvalBatch([10, 20, 30], [10, 21, 33]))
        self.assertAlmostEqual(report.mae, 4 / 3, places=4)
        self.assertAlmostEqual(report.mse, 10 / 3, places=4)
        self.assertAlmostEqual(report.r_squared, 0.95, places=9)

    def test_identity(self):
        report = regression_metrics(EvalBatch([5, 7, 9], [5, 7, 9]))
        self.assertEqual(report.mae, 0.0)
        self.assertEqual(report.mse, 0.0)
        self.assertEqual(report.r_squared, 1.0)

    def test_swapped_pair_gives_negative_r_squared(self):
        report = regression_metrics(EvalBatch([1, 2], [2, 1]))
        self.assertAlmostEqual(report.mae, 1.0)
        self.assertAlmostEqual(report.mse, 1.0)
        self.assertAlmostEqual(report.r_squared, -3.0)

    def test_constant_actual_ages_give_nan(self):
        report = regression_metrics(EvalBatch([40, 40, 40], [39, 40, 42]))
        self.assertTrue(math.isnan(report.r_squared))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            actual = rng.uniform(1, 120, size=20)
            predicted = actual + rng.normal(0, 5, size=20)
            order = rng.permutation(20)
            a = regression_metrics(EvalBatch(actual, predicted))
            b = regression_metrics(EvalBatch(actual[order], predicted[order]))
            self.assertAlmostEqual(a.mae, b.mae, places=9)
            self.assertAlmostEqual(a.mse, b.mse, places=9)
            self.assertAlmostEqual(a.r_squared, b.r_squared, places=9)
            self.assertLessEqual(a.r_squared, 1.0)


class TestCumulativeScores(unittest.TestCase):

    def setUp(self):
        self.batch = EvalBatch([10, 20, 30], [10, 21, 33])

    def test_cs_examples(self):
        self.assertAlmostEqual(cs_score(self.batch, 1), 200 / 3, places=3)
        self.assertEqual(cs_score(self.batch, 3), 100.0)
        self.assertEqual(cs_score(EvalBatch([1, 2], [1, 2]), 0), 100.0)

    def test_tie_at_threshold_counts_as_hit(self):
        self.assertEqual(cs_score(EvalBatch([10], [12]), 2), 100.0)

    def test_negative_threshold_rejected(self):
        with self.assertRaises(InvalidInputError):
            cs_score(self.batch, -1)

    def test_mcs_example(self):
        self.assertAlmostEqual(mcs_score(self.batch, 2), (100 / 3 + 200 / 3 + 200 / 3) / 3, places=3)
        self.assertEqual(mcs_score(EvalBatch([3, 4], [3, 4]), 4), 100.0)

    def test_mcs_is_mean_of_table_cs_values(self):
        # CS_0..CS_2 of the fifth fold of the published CV table
        self.assertAlmostEqual(np.mean([83.282, 93.147, 94.718]), 90.382, places=3)

    def test_cs_monotone_and_saturates(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            actual = rng.integers(1, 121, size=15).astype(float)
            predicted = actual + rng.normal(0, 4, size=15)
            batch = EvalBatch(actual, predicted)
            scores = [cs_score(batch, j) for j in range(12)]
            self.assertEqual(scores, sorted(scores))
            self.assertEqual(cs_score(batch, int(math.ceil(batch.distances.max()))), 100.0)

    def test_mcs_matches_double_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            actual = rng.uniform(1, 120, size=n)
            predicted = actual + rng.normal(0, 3, size=n)
            J = int(rng.integers(0, 6))
            batch = EvalBatch(actual, predicted)
            total = 0.0
            for j in range(J + 1):
                hits = 0
                for a, p in zip(actual, predicted):
                    if abs(a - p) <= j:
                        hits += 1
                total += 100.0 * hits / n
            self.assertAlmostEqual(mcs_score(batch, J), total / (J + 1), delta=1e-9)

    def test_tables(self):
        self.assertEqual(sorted(cumulative_scores(self.batch)), [0, 1, 2, 3, 4, 5])
        self.assertEqual(sorted(mcs_table(self.batch)), [2, 3, 4])


class TestClassification(unittest.TestCase):

    def test_published_gender_row(self):
        report = classification_report(ConfusionCounts(tp=1141, fp=74, tn=1065, fn=121), "paper")
        self.assertAlmostEqual(report.sensitivity, 0.904, places=3)
        self.assertAlmostEqual(report.specificity, 0.935, places=3)
        self.assertAlmostEqual(report.ppv, 0.939, places=3)
        self.assertAlmostEqual(report.npv, 0.898, places=3)
        self.assertAlmostEqual(report.f1, 0.919, places=3)
        self.assertAlmostEqual(report.accuracy_percent, 91.878, places=3)

    def test_perfect_counts(self):
        report = classification_report(ConfusionCounts(1, 0, 1, 0))
        for value in (report.sensitivity, report.specificity, report.ppv, report.npv, report.f1):
            self.assertEqual(value, 1.0)
        self.assertEqual(report.accuracy_percent, 100.0)

    def test_balanced_counts(self):
        report = classification_report(ConfusionCounts(1, 1, 1, 1))
        for value in (report.sensitivity, report.specificity, report.ppv, report.npv, report.f1):
            self.assertAlmostEqual(value, 0.5)
        self.assertEqual(report.accuracy_percent, 50.0)

    def test_zero_denominator_names_metric(self):
        with self.assertRaises(UndefinedMetricError) as ctx:
            classification_report(ConfusionCounts(tp=0, fp=0, tn=3, fn=0))
        self.assertEqual(ctx.exception.metric, "sensitivity")

    def test_f1_variants_agree_when_ppv_equals_specificity(self):
        counts = ConfusionCounts(tp=5, fp=5, tn=5, fn=5)
        paper = classification_report(counts, "paper")
        standard = classification_report(counts, "standard")
        self.assertAlmostEqual(paper.ppv, paper.specificity)
        self.assertAlmostEqual(paper.f1, standard.f1)

    def test_invalid_counts(self):
        with self.assertRaises(InvalidInputError):
            ConfusionCounts(0, 0, 0, 0)
        with self.assertRaises(InvalidInputError):
            ConfusionCounts(-1, 1, 1, 1)

    def test_confusion_counts_male_is_positive(self):
        counts = confusion_counts(["male", "male", "female", "female"], ["male", "female", "male", "female"])
        self.assertEqual((counts.tp, counts.fn, counts.fp, counts.tn), (1, 1, 1, 1))


class TestPredictionDumps(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, name, text):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def test_age_dump(self):
        path = self._write("ages.csv", "sample_id,actual_age,predicted_age\na,10,10\nb,20,21\nc,30,33\n")
        ids, batch = load_age_predictions(path)
        self.assertEqual(ids, ["a", "b", "c"])
        self.assertAlmostEqual(regression_metrics(batch).r_squared, 0.95)

    def test_age_dump_bad_value_names_line(self):
        path = self._write("ages.csv", "sample_id,actual_age,predicted_age\na,10,10\nb,twenty,21\n")
        with self.assertRaisesRegex(DatasetFormatError, "line 3"):
            load_age_predictions(path)

    def test_wrong_header(self):
        path = self._write("ages.csv", "id,age,pred\na,10,10\n")
        with self.assertRaises(DatasetFormatError):
            load_age_predictions(path)

    def test_gender_dump(self):
        path = self._write("g.csv", "sample_id,actual_gender,predicted_gender\na,male,male\nb,female,male\n")
        ids, counts = load_gender_predictions(path)
        self.assertEqual(len(ids), 2)
        self.assertEqual((counts.tp, counts.fp), (1, 1))


if __name__ == '__main__':
    unittest.main()
