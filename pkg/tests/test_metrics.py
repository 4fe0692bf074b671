"""Confusion counts, derived metrics, and trial aggregation."""

import numpy as np
import pytest

from occudet.metrics import (ConfusionCounts, MetricsRecord,
                             aggregate, compute_metrics, confusion,
                             summary_table, write_results_csv)

from oracles import brute_force_confusion


class TestConfusion:
    def test_all_correct(self):
        c = confusion([1, 1, 1, 0, 0], [1, 1, 1, 0, 0])
        assert (c.tp, c.tn, c.fp, c.fn) == (3, 2, 0, 0)

    def test_all_predicted_occupied(self):
        c = confusion([1] * 5, [1, 1, 1, 0, 0])
        assert (c.tp, c.fp, c.tn, c.fn) == (3, 2, 0, 0)

    def test_matches_independent_tally(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 2, size=20)
        lab = rng.integers(0, 2, size=20)
        c = confusion(pred, lab)
        assert (c.tp, c.tn, c.fp, c.fn) == brute_force_confusion(pred, lab)

    def test_total_equals_sample_count(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 2, size=57)
        lab = rng.integers(0, 2, size=57)
        assert confusion(pred, lab).total == 57

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            confusion([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            confusion([1, 0], [1])

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            ConfusionCounts(1, 1, -1, 0)


class TestMetricsValues:
    def test_perfect(self):
        m = compute_metrics(ConfusionCounts(3, 2, 0, 0))
        assert m.accuracy == 1.0 and m.f1 == 1.0

    def test_degenerate_recall_flagged_zero(self):
        m = compute_metrics(ConfusionCounts(0, 5, 0, 3))
        assert m.recall == 0.0 and m.f1 == 0.0
        assert not m.f1_defined
        assert not m.precision_defined  # tp+fp == 0 here as well

    def test_reference_arithmetic(self):
        m = compute_metrics(ConfusionCounts(700, 150, 18, 69))
        assert abs(m.accuracy - 850 / 937) < 1e-15
        assert abs(m.accuracy - 0.9071504802561366) < 1e-12

    def test_f1_consistent_with_precision_recall(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            pred = rng.integers(0, 2, size=40)
            lab = rng.integers(0, 2, size=40)
            m = compute_metrics(confusion(pred, lab))
            if m.precision + m.recall > 0:
                expect = 2 * m.precision * m.recall / (m.precision + m.recall)
                assert abs(m.f1 - expect) < 1e-15

    def test_accuracy_complement_identity(self):
        c = ConfusionCounts(10, 20, 3, 7)
        m = compute_metrics(c)
        assert m.accuracy == 1.0 - (c.fp + c.fn) / c.total

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        pred = rng.integers(0, 2, size=30)
        lab = rng.integers(0, 2, size=30)
        perm = rng.permutation(30)
        a = compute_metrics(confusion(pred, lab))
        b = compute_metrics(confusion(pred[perm], lab[perm]))
        assert a == b


def _record(case, acc, f1, seed=0, model="occudet"):
    return MetricsRecord(case, model, seed, acc, 0.0, 0.0, f1)


class TestAggregate:
    def test_single_record_is_identity(self):
        agg = aggregate([_record("c1", 0.8, 0.7)])[0]
        assert agg.accuracy == 0.8 and agg.f1 == 0.7

    def test_published_four_case_average(self):
        records = [_record(f"c{i}", acc, 0.5)
                   for i, acc in enumerate([0.8585, 0.8208, 0.9218, 0.8584])]
        agg = aggregate(records)[0]
        assert abs(agg.accuracy - 0.864875) < 1e-12
        assert round(agg.accuracy, 4) == 0.8649

    def test_published_three_case_average(self):
        records = [_record(f"c{i}", acc, 0.5)
                   for i, acc in enumerate([0.9206, 0.9000, 0.9324])]
        agg = aggregate(records)[0]
        assert abs(agg.accuracy - 2.753 / 3) < 1e-12

    def test_identical_records_average_to_themselves(self):
        records = [_record("c1", 0.75, 0.6, seed=s) for s in range(10)]
        agg = aggregate(records)[0]
        assert agg.accuracy == 0.75
        assert abs(agg.f1 - 0.6) < 1e-15
        assert agg.cases[0].n_trials == 10

    def test_overall_is_mean_of_case_means_not_trials(self):
        # case A has two trials, case B one; the overall average still
        # weighs the cases equally
        records = [_record("a", 0.6, 0.6, seed=0), _record("a", 0.8, 0.8, seed=1),
                   _record("b", 1.0, 1.0, seed=0)]
        agg = aggregate(records)[0]
        assert abs(agg.accuracy - (0.7 + 1.0) / 2) < 1e-15

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestOutputs:
    def test_results_csv_layout(self, tmp_path):
        path = tmp_path / "results.csv"
        write_results_csv(path, [MetricsRecord("c1", "m", 3, 0.5, 0.25, 0.125, 0.2)])
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "case,model,seed,acc,precision,recall,f1"
        assert lines[1] == "c1,m,3,0.5,0.25,0.125,0.2"

    def test_summary_table_layout(self):
        records = ([_record("case-1", 0.9, 0.8, seed=s) for s in range(2)]
                   + [_record("case-2", 0.7, 0.6, seed=s) for s in range(2)])
        table = summary_table(aggregate(records))
        assert "Average" in table
        assert "case-1" in table and "case-2" in table
        assert "0.9000" in table and "0.8000" in table  # per-case rows
        assert "0.7000" in table

    def test_summary_table_average_row_value(self):
        records = [_record("x", 0.6, 0.5), _record("y", 0.8, 0.9)]
        table = summary_table(aggregate(records))
        last_two = table.strip().splitlines()[-2:]
        assert "0.7000" in last_two[0]  # mean accuracy
        assert "0.7000" in last_two[1]  # mean F1
