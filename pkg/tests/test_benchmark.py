"""Tests for the synthetic oracle and the record-file format."""
import os
import shutil
import tempfile
import unittest

import pytest

from cellsearch.benchmark import (
    BenchRecord,
    OracleSpec,
    RecordOracle,
    SyntheticOracle,
    cell_sort_key,
    enumerate_space,
    format_record,
    load_records,
    synth_accuracy,
    synth_test_accuracy,
    write_records,
)
from cellsearch.bohb import BudgetLadder
from cellsearch.exceptions import (
    BudgetNotInLadderError,
    InvalidCellError,
    RecordParseError,
    SpaceTooLargeError,
    UnknownCellError,
)
from cellsearch.search_space import SearchSpace, decode_cell, encode_cell


@pytest.mark.unit
class TestSyntheticAccuracy(unittest.TestCase):
    def setUp(self):
        self.spec = OracleSpec(n_nodes=3, op_choices=3, seed=11)

    def test_deterministic(self):
        other = OracleSpec(n_nodes=3, op_choices=3, seed=11)
        for cell in self.spec.space.enumerate_cells():
            for budget in self.spec.ladder.budgets:
                self.assertEqual(synth_accuracy(cell, budget, self.spec), synth_accuracy(cell, budget, other))

    def test_seed_changes_values(self):
        other = OracleSpec(n_nodes=3, op_choices=3, seed=12)
        cells = list(self.spec.space.enumerate_cells())
        differing = sum(synth_accuracy(c, 108, self.spec) != synth_accuracy(c, 108, other) for c in cells)
        self.assertGreater(differing, len(cells) // 2)

    def test_noise_free_curves_increase_with_budget(self):
        for cell in self.spec.space.enumerate_cells():
            curve = [synth_accuracy(cell, b, self.spec) for b in self.spec.ladder.budgets]
            self.assertTrue(all(a < b for a, b in zip(curve, curve[1:])), msg=encode_cell(cell))
            self.assertTrue(all(0.0 <= v <= 1.0 for v in curve))

    def test_noisy_values_stay_in_range_and_repeat(self):
        noisy = OracleSpec(n_nodes=3, op_choices=3, seed=11, noise_sd=0.05)
        changed = 0
        for cell in noisy.space.enumerate_cells():
            value = synth_accuracy(cell, 12, noisy)
            self.assertEqual(value, synth_accuracy(cell, 12, noisy))
            self.assertTrue(0.0 <= value <= 1.0)
            changed += value != synth_accuracy(cell, 12, self.spec)
        self.assertGreater(changed, 0)

    def test_test_accuracy_trails_final_validation(self):
        for cell in self.spec.space.enumerate_cells():
            final = synth_accuracy(cell, self.spec.ladder.max_budget, self.spec)
            self.assertAlmostEqual(synth_test_accuracy(cell, self.spec), final - 0.005, delta=1e-12)

    def test_budget_outside_ladder(self):
        cell = next(self.spec.space.enumerate_cells())
        with self.assertRaises(BudgetNotInLadderError):
            synth_accuracy(cell, 5, self.spec)

    def test_node_count_mismatch(self):
        cell = next(SearchSpace.reduced(2, 3).enumerate_cells())
        with self.assertRaises(InvalidCellError):
            synth_accuracy(cell, 4, self.spec)

    def test_spec_validation(self):
        with self.assertRaises(ValueError):
            OracleSpec(n_nodes=1)
        with self.assertRaises(ValueError):
            OracleSpec(noise_sd=-0.1)
        with self.assertRaises(ValueError):
            OracleSpec(noise_sd=float("nan"))

    def test_describe(self):
        self.assertEqual(self.spec.describe(), "synth:n3:ops3:noise0:seed11")


@pytest.mark.unit
class TestEnumeration(unittest.TestCase):
    def test_two_node_three_op_space(self):
        records = enumerate_space(OracleSpec(n_nodes=2, op_choices=3))
        self.assertEqual(len(records), 9)
        self.assertEqual(len({r.cell for r in records}), 9)
        for record in records:
            self.assertEqual(sorted(record.accuracies), [4, 12, 36, 108])

    def test_unique_optimum_is_table_maximum(self):
        spec = OracleSpec(n_nodes=3, op_choices=3, seed=4)
        oracle = SyntheticOracle(spec)
        best = oracle.global_optimum()
        self.assertIsNotNone(best)
        best_value = max(synth_accuracy(c, 108, spec) for c in spec.space.enumerate_cells())
        self.assertEqual(best.final_accuracy, best_value)
        tied = [r for r in oracle.table() if r.final_accuracy == best_value]
        self.assertEqual(best.cell, min((r.cell for r in tied), key=cell_sort_key))
        self.assertIs(oracle.global_optimum().cell, best.cell)

    def test_space_too_large(self):
        with self.assertRaises(SpaceTooLargeError):
            enumerate_space(OracleSpec(n_nodes=6))
        with self.assertRaises(SpaceTooLargeError):
            enumerate_space(OracleSpec(n_nodes=2, op_choices=3), limit=5)
        self.assertIsNone(SyntheticOracle(OracleSpec(n_nodes=6)).global_optimum())

    def test_table_is_cached(self):
        oracle = SyntheticOracle(OracleSpec(n_nodes=2, op_choices=2))
        self.assertIs(oracle.table(), oracle.table())


@pytest.mark.unit
class TestRecordFiles(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.spec = OracleSpec(n_nodes=3, op_choices=2, seed=9, noise_sd=0.01)
        self.path = os.path.join(self.temp_dir, "bench", "records.tsv")

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def _write_lines(self, *lines):
        path = os.path.join(self.temp_dir, "custom.tsv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        return path

    def _valid_line(self, index=0):
        records = enumerate_space(self.spec)
        return format_record(records[index])

    def test_round_trip_answers_identically(self):
        synthetic = SyntheticOracle(self.spec)
        count = write_records(synthetic.table(), self.path, header=synthetic.describe())
        self.assertEqual(count, 32)
        loaded = load_records(self.path)
        self.assertEqual(len(loaded), 32)
        self.assertEqual(loaded.ladder.budgets, synthetic.ladder.budgets)
        for cell in synthetic.space.enumerate_cells():
            for budget in synthetic.ladder.budgets:
                self.assertEqual(loaded.query(cell, budget), synthetic.query(cell, budget))
            self.assertEqual(loaded.test_accuracy(cell), synthetic.test_accuracy(cell))
        self.assertEqual(loaded.global_optimum().cell, synthetic.global_optimum().cell)
        self.assertEqual(set(loaded.space.op_choices), set(synthetic.space.op_choices))

    def test_header_written_as_comment(self):
        write_records(enumerate_space(self.spec), self.path, header="synthetic table")
        with open(self.path, encoding="utf-8") as f:
            self.assertEqual(f.readline(), "# synthetic table\n")

    def test_malformed_line_names_line_number(self):
        path = self._write_lines("# header", self._valid_line(0), "3|110|0:0:0,0:0:0\t4=0.5\t0.5")
        with self.assertRaises(RecordParseError) as ctx:
            load_records(path)
        self.assertEqual(ctx.exception.line_no, 3)
        self.assertIn(":3:", str(ctx.exception))

    def test_oversized_node_count(self):
        path = self._write_lines(self._valid_line(0), "100000|0|0:0:0\t4=0.5\t0.5")
        with self.assertRaises(RecordParseError) as ctx:
            load_records(path)
        self.assertEqual(ctx.exception.line_no, 2)
        self.assertIn("n_nodes", str(ctx.exception))

    def test_wrong_field_count(self):
        path = self._write_lines(self._valid_line(0).replace("\t", " ", 1))
        with self.assertRaises(RecordParseError):
            load_records(path)

    def test_out_of_range_accuracy(self):
        encoding, _, test = self._valid_line(0).split("\t")
        path = self._write_lines(f"{encoding}\t4=1.5;12=0.5;36=0.5;108=0.5\t{test}")
        with self.assertRaises(RecordParseError) as ctx:
            load_records(path)
        self.assertEqual(ctx.exception.line_no, 1)

    def test_malformed_accuracy_entry(self):
        encoding, _, test = self._valid_line(0).split("\t")
        for entry in ("4:0.5", "four=0.5", "4=0.5;4=0.6"):
            with self.subTest(entry=entry):
                path = self._write_lines(f"{encoding}\t{entry}\t{test}")
                with self.assertRaises(RecordParseError):
                    load_records(path)

    def test_duplicate_cell(self):
        line = self._valid_line(0)
        path = self._write_lines(line, "", line)
        with self.assertRaises(RecordParseError) as ctx:
            load_records(path)
        self.assertEqual(ctx.exception.line_no, 3)

    def test_budgets_must_agree(self):
        encoding, _, test = self._valid_line(1).split("\t")
        path = self._write_lines(self._valid_line(0), f"{encoding}\t4=0.5;12=0.6\t{test}")
        with self.assertRaises(RecordParseError):
            load_records(path)

    def test_empty_file(self):
        path = self._write_lines("# nothing here")
        with self.assertRaises(RecordParseError):
            load_records(path)

    def test_missing_file(self):
        with self.assertRaises(OSError):
            load_records(os.path.join(self.temp_dir, "absent.tsv"))


@pytest.mark.unit
class TestRecordOracle(unittest.TestCase):
    def setUp(self):
        self.records = enumerate_space(OracleSpec(n_nodes=2, op_choices=3))
        self.oracle = RecordOracle(self.records[:5])

    def test_unknown_cell(self):
        with self.assertRaises(UnknownCellError):
            self.oracle.query(self.records[7].cell, 4)
        with self.assertRaises(UnknownCellError):
            self.oracle.test_accuracy(self.records[7].cell)

    def test_budget_outside_ladder(self):
        with self.assertRaises(BudgetNotInLadderError):
            self.oracle.query(self.records[0].cell, 13)

    def test_non_geometric_budgets_rejected(self):
        cell = decode_cell("2|1|0:0:0,0:0:0")
        with self.assertRaises(ValueError):
            RecordOracle([BenchRecord(cell, {4: 0.5, 10: 0.6}, 0.6)])

    def test_custom_ladder_is_inferred(self):
        cell = decode_cell("2|1|0:0:0,0:0:0")
        oracle = RecordOracle([BenchRecord(cell, {1: 0.3, 3: 0.4, 9: 0.5}, 0.5)])
        self.assertEqual(oracle.ladder, BudgetLadder(1, 9, 3))
        self.assertEqual(oracle.query(cell, 3), 0.4)

    def test_empty_record_set(self):
        with self.assertRaises(ValueError):
            RecordOracle([])

    def test_describe(self):
        self.assertEqual(RecordOracle(self.records, source="x.tsv").describe(), "file:x.tsv")


if __name__ == "__main__":
    unittest.main()
