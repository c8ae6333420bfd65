import os
import tempfile
import unittest
import sys
from pathlib import Path

import numpy as np
sys.path.insert(1, str(Path(__file__).parents[1]))


import data
from data import (EndpointEvent, GenConfig, PatientRecord, Preprocessor, StaticFeature, Visit, Vocabulary)
from numerics import Rng
from utils import ConfigError, SchemaError

SLOW = os.getenv("SDRNN_SLOW_TESTS") == "1"


def one_lab_vocab():
    return Vocabulary(["m0", "m1"], ["lab"], [StaticFeature("grade", ("a", "b", "c")), StaticFeature("age")])


def record(pid, labs=(), meds=(), events=(), last=None, static=None):
    visits = [Visit(30 * i, tuple(m), dict(l)) for i, (m, l) in enumerate(zip(meds or [()] * len(labs), labs))]
    return PatientRecord(pid, static or {"grade": "a", "age": 50.0}, visits, list(events), last)


class TestLabEncoding(unittest.TestCase):
    def setUp(self):
        self.vocab = one_lab_vocab()

    def test_population_statistics(self):
        rec = record("P1", labs=[{"lab": 1.0}, {"lab": 2.0}, {"lab": 3.0}])
        stats = data.fit_lab_stats([rec], self.vocab)
        self.assertAlmostEqual(stats.mean[0], 2.0)
        self.assertAlmostEqual(stats.std[0], 0.8165, places=4)
        self.assertFalse(stats.flagged[0])

    def test_single_observation_flagged(self):
        stats = data.fit_lab_stats([record("P1", labs=[{"lab": 4.0}, {}])], self.vocab)
        self.assertEqual(stats.std[0], 0.0)
        self.assertTrue(stats.flagged[0])
        np.testing.assert_array_equal(data.discretize_labs({"lab": 9.0}, stats, self.vocab), [0, 1, 0])

    def test_buckets(self):
        stats = data.fit_lab_stats([record("P1", labs=[{"lab": 1.0}, {"lab": 2.0}, {"lab": 3.0}])], self.vocab)
        np.testing.assert_array_equal(data.discretize_labs({"lab": 3.0}, stats, self.vocab), [1, 0, 0])
        np.testing.assert_array_equal(data.discretize_labs({"lab": 1.0}, stats, self.vocab), [0, 0, 1])
        np.testing.assert_array_equal(data.discretize_labs({"lab": 2.5}, stats, self.vocab), [0, 1, 0])
        np.testing.assert_array_equal(data.discretize_labs({}, stats, self.vocab), [0, 0, 0])

    def test_boundary_is_normal(self):
        stats = data.fit_lab_stats([record("P1", labs=[{"lab": 1.0}, {"lab": 3.0}])], self.vocab)
        self.assertEqual(stats.std[0], 1.0)
        np.testing.assert_array_equal(data.discretize_labs({"lab": 3.0}, stats, self.vocab), [0, 1, 0])
        np.testing.assert_array_equal(data.discretize_labs({"lab": 1.0}, stats, self.vocab), [0, 1, 0])

    def test_visit_layout(self):
        stats = data.fit_lab_stats([record("P1", labs=[{"lab": 1.0}, {"lab": 3.0}])], self.vocab)
        v = data.encode_visit(Visit(0, ("m1",), {"lab": 5.0}), self.vocab, stats)
        np.testing.assert_array_equal(v, [0, 1, 1, 0, 0])
        np.testing.assert_array_equal(data.encode_visit(Visit(0), self.vocab, stats), np.zeros(5))

    def test_unknown_tokens(self):
        stats = data.fit_lab_stats([record("P1", labs=[{"lab": 1.0}])], self.vocab)
        with self.assertRaises(SchemaError):
            data.encode_visit(Visit(0, ("m9",)), self.vocab, stats)
        with self.assertLogs("data", level="WARNING"):
            v = data.encode_visit(Visit(0, ("m9",), {"other": 1.0}), self.vocab, stats, unknown="ignore")
        np.testing.assert_array_equal(v, np.zeros(5))

    def test_dynamic_width(self):
        vocab = Vocabulary([f"m{i}" for i in range(1061)], [f"l{i}" for i in range(1835)], [])
        self.assertEqual(vocab.dynamic_width, 6566)

    def test_imputed_encoding(self):
        stats = data.fit_lab_stats([record("P1", labs=[{"lab": 1.0}, {"lab": 2.0}, {"lab": 6.0}])], self.vocab)
        mean_filled = data.encode_visit_imputed(Visit(0), self.vocab, stats, "mean")
        self.assertEqual(mean_filled[2], 0.0)
        median_filled = data.encode_visit_imputed(Visit(0), self.vocab, stats, "median")
        self.assertAlmostEqual(median_filled[2], (2.0 - 3.0) / stats.std[0])


class TestStaticEncoding(unittest.TestCase):
    def test_one_hot_and_standardized(self):
        vocab = one_lab_vocab()
        recs = [record("P1", labs=[{}], static={"grade": "a", "age": 40.0}),
                record("P2", labs=[{}], static={"grade": "c", "age": 60.0})]
        stats = data.fit_static_stats(recs, vocab)
        np.testing.assert_array_equal(data.encode_static({"grade": "b", "age": 50.0}, vocab, stats), [0, 1, 0, 0])
        np.testing.assert_array_equal(data.encode_static({"grade": "b", "age": 50.0}, vocab, stats),
                                      data.encode_static({"grade": "b", "age": 50.0}, vocab, stats))

    def test_unknown_level_is_zero_block(self):
        vocab = one_lab_vocab()
        stats = data.fit_static_stats([record("P1", labs=[{}])], vocab)
        with self.assertLogs("data", level="WARNING"):
            out = data.encode_static({"grade": "z", "age": 50.0}, vocab, stats)
        np.testing.assert_array_equal(out[:3], [0, 0, 0])


class TestTargets(unittest.TestCase):
    def test_horizons(self):
        rec = PatientRecord("P1", {}, [Visit(0)], [EndpointEvent("rejection", 100)], 400)
        targets, mask = data.build_targets(rec)
        np.testing.assert_array_equal(targets[0], [1, 1, 0, 0, 0, 0])
        np.testing.assert_array_equal(mask[0], np.ones(6))

        rec = PatientRecord("P1", {}, [Visit(0)], [EndpointEvent("loss", 300)], 400)
        targets, _ = data.build_targets(rec)
        np.testing.assert_array_equal(targets[0], [0, 0, 0, 1, 0, 0])

    def test_censoring(self):
        rec = PatientRecord("P1", {}, [Visit(0)], [], 200)
        targets, mask = data.build_targets(rec)
        np.testing.assert_array_equal(targets, np.zeros((1, 6)))
        np.testing.assert_array_equal(mask[0], [1, 0, 1, 0, 1, 0])

    def test_event_inside_window_overrides_censoring(self):
        rec = PatientRecord("P1", {}, [Visit(0)], [EndpointEvent("death", 250)], None)
        _, mask = data.build_targets(rec)
        np.testing.assert_array_equal(mask[0], np.ones(6))

    def test_event_on_visit_day_belongs_to_earlier_visits(self):
        rec = PatientRecord("P1", {}, [Visit(0), Visit(30)], [EndpointEvent("rejection", 30)], 500)
        targets, _ = data.build_targets(rec)
        self.assertEqual(targets[0, 0], 1.0)
        self.assertEqual(targets[1, 0], 0.0)

    def test_six_months_implies_twelve(self):
        records, _ = data.generate_cohort(GenConfig(patients=40), seed=5)
        for rec in records:
            targets, _ = data.build_targets(rec)
            for k in range(3):
                self.assertTrue(np.all(targets[:, 2 * k] <= targets[:, 2 * k + 1]))

    def test_next_visit_targets(self):
        visits = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        targets, mask = data.build_next_visit_targets(visits)
        np.testing.assert_array_equal(targets[:2], visits[1:])
        np.testing.assert_array_equal(mask[:, 0], [1, 1, 0])


class TestSchema(unittest.TestCase):
    def test_visit_days_strictly_increasing(self):
        with self.assertRaises(SchemaError):
            PatientRecord("P1", {}, [Visit(10), Visit(10)]).validate()

    def test_visit_after_death(self):
        with self.assertRaises(SchemaError):
            PatientRecord("P1", {}, [Visit(0), Visit(40)], [EndpointEvent("death", 20)]).validate()

    def test_load_reports_line_and_patient(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "cohort.jsonl"
            good = PatientRecord("P1", {}, [Visit(0)])
            data.save_cohort([good], path)
            with open(path, "a", encoding="utf-8") as f:
                f.write('{"patient_id": "P2", "visits": [{"day": 5}, {"day": 1}]}\n')
            with self.assertRaises(SchemaError) as ctx:
                data.load_cohort(path)
            self.assertIn(":2", str(ctx.exception))
            self.assertIn("P2", str(ctx.exception))

    def test_vocab_file_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "vocab.json"
            data.save_vocab(one_lab_vocab(), path)
            self.assertEqual(data.load_vocab(path).to_dict(), one_lab_vocab().to_dict())

    def test_duplicate_vocabulary_names(self):
        with self.assertRaises(SchemaError):
            Vocabulary(["a", "a"], [], [])


class TestPreprocessor(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.records, cls.vocab = data.generate_cohort(GenConfig(patients=30), seed=2)

    def test_widths_and_values(self):
        prep = Preprocessor.fit(self.records[:20], self.vocab)
        enc = prep.encode(self.records[0])
        self.assertEqual(enc.visits.shape[1], len(self.vocab.meds) + 3 * len(self.vocab.labs))
        self.assertTrue(set(np.unique(enc.visits)) <= {0.0, 1.0})
        labs = enc.visits[:, len(self.vocab.meds):].reshape(len(enc.visits), -1, 3)
        self.assertTrue(np.all(labs.sum(axis=2) <= 1))

    def test_statistics_come_from_training_part_only(self):
        train, valid, test = data.split_patients(self.records, rng=Rng(0))
        before = Preprocessor.fit(train, self.vocab).encode(train[0])
        changed = [PatientRecord(r.patient_id, {**r.static_features, "age": 99.0},
                                 [Visit(v.day, v.meds, {k: x * 100 for k, x in v.labs.items()}) for v in r.visits],
                                 r.endpoint_events, r.last_follow_up) for r in test]
        train2, _, test2 = data.split_patients(train + valid + changed, rng=Rng(0))
        self.assertEqual([r.patient_id for r in test2], [r.patient_id for r in test])
        after = Preprocessor.fit(train2, self.vocab).encode(train2[0])
        np.testing.assert_array_equal(before.visits, after.visits)
        np.testing.assert_array_equal(before.static, after.static)

    def test_degraded_width(self):
        prep = Preprocessor.fit(self.records, self.vocab, degraded=True)
        self.assertEqual(prep.encode(self.records[0]).visits.shape[1], len(self.vocab.meds) + len(self.vocab.labs))

    def test_next_visit_requires_buckets(self):
        with self.assertRaises(ConfigError):
            Preprocessor.fit(self.records, self.vocab, degraded=True, task="next-visit")

    def test_next_visit_labels(self):
        prep = Preprocessor.fit(self.records, self.vocab, task="next-visit")
        self.assertEqual(len(prep.output_labels), prep.dynamic_width)

    def test_checkpoint_arrays_round_trip(self):
        prep = Preprocessor.fit(self.records, self.vocab, degraded=True, imputation="median")
        again = Preprocessor.from_checkpoint(prep.to_meta(), prep.to_arrays())
        np.testing.assert_array_equal(prep.encode(self.records[3]).visits, again.encode(self.records[3]).visits)

    def test_batch_padding(self):
        prep = Preprocessor.fit(self.records, self.vocab)
        encoded = prep.encode_all(self.records[:3])
        batch = data.make_batch(encoded)
        T = max(len(r.visits) for r in self.records[:3])
        self.assertEqual(batch.visits.shape[:2], (3, T))
        for b, p in enumerate(encoded):
            self.assertFalse(np.any(batch.mask[b, len(p.visits):]))


class TestSplits(unittest.TestCase):
    def setUp(self):
        self.patients = [PatientRecord(f"P{i}", {}, [Visit(0)]) for i in range(10)]

    def test_sizes(self):
        train, valid, test = data.split_patients(self.patients, rng=Rng(0))
        self.assertEqual((len(train), len(valid), len(test)), (6, 2, 2))

    def test_disjoint(self):
        parts = data.split_patients(self.patients, rng=Rng(1))
        ids = [p.patient_id for part in parts for p in part]
        self.assertEqual(sorted(ids), sorted(p.patient_id for p in self.patients))

    def test_same_seed_same_split_regardless_of_order(self):
        a = data.split_patients(self.patients, rng=Rng(4))
        b = data.split_patients(list(reversed(self.patients)), rng=Rng(4))
        self.assertEqual([[p.patient_id for p in part] for part in a], [[p.patient_id for p in part] for part in b])

    def test_too_few_patients(self):
        with self.assertRaises(ValueError):
            data.split_patients(self.patients[:2], rng=Rng(0))


class TestGenerator(unittest.TestCase):
    def test_deterministic_files(self):
        cfg = GenConfig(patients=25)
        with tempfile.TemporaryDirectory() as tmp:
            for name in ("a.jsonl", "b.jsonl"):
                records, _ = data.generate_cohort(cfg, seed=9)
                data.save_cohort(records, Path(tmp) / name)
            self.assertEqual((Path(tmp) / "a.jsonl").read_bytes(), (Path(tmp) / "b.jsonl").read_bytes())

    def test_no_hazard_no_events(self):
        records, _ = data.generate_cohort(GenConfig(patients=30, endpoint_rate=0.0), seed=1)
        self.assertTrue(all(not r.endpoint_events for r in records))
        self.assertEqual(data.cohort_summary(records)["target_density"], 0.0)

    def test_invalid_configs(self):
        with self.assertRaises(ValueError):
            GenConfig(patients=0)
        with self.assertRaises(ValueError):
            GenConfig(motif=True, motif_gap=20, max_visits=30)
        with self.assertRaises(ConfigError):
            GenConfig.preset("nope")

    def test_presets_build(self):
        for name in ("default", "motif", "recency", "extremes"):
            cfg = GenConfig.preset(name, patients=10)
            records, vocab = data.generate_cohort(cfg, seed=3)
            self.assertEqual(len(records), 10)
            self.assertEqual(vocab.dynamic_width, cfg.n_meds + 3 * cfg.n_labs)

    def test_motif_markers_present(self):
        records, _ = data.generate_cohort(GenConfig.preset("motif", patients=60, motif_rate=1.0), seed=4)
        for rec in records:
            self.assertTrue(any("med_000" in v.meds for v in rec.visits))
            self.assertTrue(any(v.labs.get("lab_000") == 5.0 for v in rec.visits))

    def test_recency_labels_do_not_depend_on_position(self):
        records, _ = data.generate_cohort(GenConfig.preset("recency", patients=600), seed=5)
        loss_12m = data.TARGET_LABELS.index("loss_12m")
        first, last = [], []
        for rec in records:
            targets, mask = data.build_targets(rec)
            self.assertTrue(np.all(mask[:, loss_12m] == 1.0))
            first.append(targets[0, loss_12m])
            last.append(targets[-1, loss_12m])
        self.assertGreater(np.mean(last), 0.2)
        self.assertLess(abs(np.mean(first) - np.mean(last)), 0.08)

    def test_recency_trigger_marks_the_announcing_visit(self):
        records, _ = data.generate_cohort(GenConfig.preset("recency", patients=40, trigger_rate=1.0), seed=2)
        for rec in records:
            self.assertTrue(all("med_004" in v.meds for v in rec.visits))
            losses = [e for e in rec.endpoint_events if e.kind == "loss"]
            self.assertGreaterEqual(len(losses), len(rec.visits))
            self.assertTrue(all(e.day <= rec.visits[-1].day + 365 for e in losses))

    def test_no_visits_after_rejection_when_disabled(self):
        records, _ = data.generate_cohort(GenConfig(patients=60, endpoint_rate=1.0, post_rejection_visits=False),
                                          seed=6)
        for rec in records:
            rejections = [e.day for e in rec.endpoint_events if e.kind == "rejection"]
            if rejections and rec.visits[0].day <= min(rejections):
                self.assertTrue(all(v.day <= min(rejections) for v in rec.visits))

    @unittest.skipUnless(SLOW, "set SDRNN_SLOW_TESTS=1")
    def test_default_density(self):
        records, _ = data.generate_cohort(GenConfig(), seed=0)
        summary = data.cohort_summary(records)
        self.assertAlmostEqual(summary["target_density"], 0.073, delta=0.01)
        self.assertAlmostEqual(summary["endpoint_patient_fraction"], 0.384, delta=0.04)


if __name__ == '__main__':
    unittest.main()
