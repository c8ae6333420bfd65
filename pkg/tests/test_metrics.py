import unittest
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score
sys.path.insert(1, str(Path(__file__).parents[1]))


import metrics
from metrics import UndefinedMetric
from numerics import Rng


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def threshold_auprc(scores, labels):
    total_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= thr]
        recall = sum(picked) / total_pos
        ap += (recall - prev_recall) * sum(picked) / len(picked)
        prev_recall = recall
    return ap


def oracle_instances(seed, count=200):
    """Small score/label sets with ties and both classes present."""
    rng = Rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, 51))
        scores = np.round(rng.random(n), int(rng.integers(1, 3)))
        labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(float)
        labels[rng.choice(n, size=2, replace=False)] = [1.0, 0.0]
        yield scores, labels


class TestAuroc(unittest.TestCase):
    def test_hand_example(self):
        self.assertAlmostEqual(metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), 0.75)

    def test_separated(self):
        self.assertEqual(metrics.auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)

    def test_all_ties(self):
        self.assertEqual(metrics.auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]), 0.5)

    def test_single_class_undefined(self):
        with self.assertRaises(UndefinedMetric):
            metrics.auroc([0.1, 0.2], [1, 1])
        with self.assertRaises(UndefinedMetric):
            metrics.auroc([0.1, 0.2], [0, 0])

    def test_matches_sklearn_with_ties(self):
        rng = Rng(0)
        for _ in range(10):
            scores = np.round(rng.random(50), 1)
            labels = (rng.random(50) < 0.3).astype(float)
            labels[0] = 1.0
            labels[1] = 0.0
            self.assertAlmostEqual(metrics.auroc(scores, labels), roc_auc_score(labels, scores), places=12)

    def test_matches_pairwise_oracle(self):
        for scores, labels in oracle_instances(10):
            self.assertAlmostEqual(metrics.auroc(scores, labels), pairwise_auroc(list(scores), list(labels)),
                                   places=12)

    def test_invariant_under_increasing_transform(self):
        for scores, labels in oracle_instances(11, count=50):
            self.assertAlmostEqual(metrics.auroc(np.exp(3.0 * scores) - 7.0, labels), metrics.auroc(scores, labels),
                                   places=12)

    def test_negated_scores_complement(self):
        for scores, labels in oracle_instances(12, count=50):
            self.assertAlmostEqual(metrics.auroc(scores, labels) + metrics.auroc(-scores, labels), 1.0, places=12)

    def test_permutation_invariant(self):
        rng = Rng(13)
        for scores, labels in oracle_instances(13, count=50):
            order = rng.permutation(len(scores))
            self.assertAlmostEqual(metrics.auroc(scores[order], labels[order]), metrics.auroc(scores, labels),
                                   places=12)
            self.assertAlmostEqual(metrics.auprc(scores[order], labels[order]), metrics.auprc(scores, labels),
                                   places=12)


class TestAuprc(unittest.TestCase):
    def test_perfect(self):
        self.assertEqual(metrics.auprc([0.9, 0.1], [1, 0]), 1.0)

    def test_reversed(self):
        self.assertEqual(metrics.auprc([0.9, 0.1], [0, 1]), 0.5)

    def test_no_positives(self):
        with self.assertRaises(UndefinedMetric):
            metrics.auprc([0.9, 0.1], [0, 0])

    def test_empty(self):
        with self.assertRaises(UndefinedMetric):
            metrics.auprc([], [])

    def test_random_scores_track_prevalence(self):
        rng = Rng(1)
        labels = (rng.substream("labels").random(10000) < 0.073).astype(float)
        scores = rng.substream("scores").random(10000)
        self.assertAlmostEqual(metrics.auprc(scores, labels), 0.073, delta=0.01)

    def test_matches_sklearn_with_ties(self):
        rng = Rng(2)
        for _ in range(10):
            scores = np.round(rng.random(50), 1)
            labels = (rng.random(50) < 0.3).astype(float)
            labels[0] = 1.0
            self.assertAlmostEqual(metrics.auprc(scores, labels), average_precision_score(labels, scores), places=12)

    def test_matches_threshold_oracle(self):
        for scores, labels in oracle_instances(20):
            self.assertAlmostEqual(metrics.auprc(scores, labels), threshold_auprc(list(scores), list(labels)),
                                   places=12)

    def test_curves(self):
        pr = metrics.pr_curve([0.9, 0.5, 0.5, 0.1], [1, 0, 1, 0])
        self.assertEqual(list(pr["threshold"]), [0.9, 0.5, 0.1])
        self.assertEqual(pr["recall"].iloc[-1], 1.0)
        roc = metrics.roc_curve([0.9, 0.5, 0.5, 0.1], [1, 0, 1, 0])
        self.assertEqual((roc["fpr"].iloc[-1], roc["tpr"].iloc[-1]), (1.0, 1.0))


class TestEvaluation(unittest.TestCase):
    def setUp(self):
        rng = Rng(3)
        self.scores = rng.random((50, 6))
        self.labels = (rng.random((50, 6)) < 0.3).astype(float)
        self.labels[0] = 1.0
        self.labels[1] = 0.0
        self.mask = (rng.random((50, 6)) < 0.9).astype(float)
        self.mask[:2] = 1.0

    def test_pooled_equals_concatenation(self):
        pooled = metrics.evaluate_pooled(self.scores, self.labels, self.mask)
        keep = self.mask > 0.5
        self.assertEqual(pooled["auprc"], metrics.auprc(self.scores[keep], self.labels[keep]))
        self.assertEqual(pooled["auroc"], metrics.auroc(self.scores[keep], self.labels[keep]))

    def test_masked_entries_are_dropped(self):
        mask = np.ones((2, 6))
        mask[1, 3] = 0.0
        labels = np.zeros((2, 6))
        labels[0, 0] = 1.0
        scores = np.full((2, 6), 0.2)
        scores[0, 0] = 0.9
        scores[1, 3] = 0.99
        self.assertEqual(metrics.evaluate_pooled(scores, labels, mask)["auprc"], 1.0)

    def test_per_endpoint_matches_brute_force(self):
        report = metrics.evaluate_per_endpoint(self.scores, self.labels, self.mask, names=list("abcdef"))
        for j, name in enumerate("abcdef"):
            keep = self.mask[:, j] > 0.5
            self.assertAlmostEqual(report.loc[name, "auroc"],
                                   roc_auc_score(self.labels[keep, j], self.scores[keep, j]), places=12)
            self.assertAlmostEqual(report.loc[name, "auprc"],
                                   average_precision_score(self.labels[keep, j], self.scores[keep, j]), places=12)

    def test_perfect_predictor(self):
        report = metrics.evaluate_per_endpoint(self.labels * 0.8 + 0.1, self.labels)
        np.testing.assert_array_equal(report["auroc"].to_numpy(), np.ones(6))

    def test_undefined_column_is_nan(self):
        labels = self.labels.copy()
        labels[:, 2] = 0.0
        with self.assertLogs("metrics", level="WARNING"):
            report = metrics.evaluation_report(self.scores, labels, None, names=list("abcdef"))
        self.assertTrue(np.isnan(report.loc["c", "auprc"]))
        self.assertFalse(np.isnan(report.loc["pooled", "auprc"]))
        self.assertEqual(list(report.index), ["pooled"] + list("abcdef"))

    def test_single_label_column_equals_pooled(self):
        report = metrics.evaluation_report(self.scores[:, :1], self.labels[:, :1], names=["only"])
        self.assertEqual(report.loc["only", "auroc"], report.loc["pooled", "auroc"])


class TestAggregation(unittest.TestCase):
    @staticmethod
    def report(auprc, auroc):
        return pd.DataFrame({"auprc": [auprc], "auroc": [auroc]}, index=["pooled"])

    def test_identical_reports(self):
        agg = metrics.aggregate_splits([self.report(0.3, 0.7)] * 3)
        self.assertAlmostEqual(agg.loc["pooled", "auprc_se"], 0.0, places=12)
        self.assertAlmostEqual(agg.loc["pooled", "auprc_mean"], 0.3)

    def test_mean_and_standard_error(self):
        agg = metrics.aggregate_splits([self.report(0.3, 0.7), self.report(0.4, 0.7)])
        self.assertAlmostEqual(agg.loc["pooled", "auprc_mean"], 0.35)
        self.assertAlmostEqual(agg.loc["pooled", "auprc_se"], 0.05)

    def test_undefined_splits_counted(self):
        agg = metrics.aggregate_splits([self.report(0.3, 0.7), self.report(np.nan, 0.7), self.report(0.5, 0.7)])
        self.assertEqual(agg.loc["pooled", "auprc_undefined"], 1)
        self.assertAlmostEqual(agg.loc["pooled", "auprc_mean"], 0.4)

    def test_needs_two_reports(self):
        with self.assertRaises(ValueError):
            metrics.aggregate_splits([self.report(0.3, 0.7)])

    def test_rendered_table(self):
        agg = metrics.aggregate_splits([self.report(0.3, 0.7), self.report(0.4, 0.7)])
        table = metrics.render_table(agg, {"pooled": "GRU + static"})
        self.assertEqual(table.loc["GRU + static", "AUPRC"], "0.350 ± 0.050")
        self.assertEqual(table.loc["GRU + static", "AUROC"], "0.700 ± 0.000")


if __name__ == '__main__':
    unittest.main()
