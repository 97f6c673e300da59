import numpy as np
import pytest

from app.errors import ConfigurationError
from app.services.verify import (
    corrupted_reverse,
    fit_loglog_slope,
    report_to_csv,
    run_equivalence_suite,
    run_gradcheck_suite,
    run_scaling_benchmark,
)

SIZES = [(1, 1, 1), (2, 2, 2), (2, 2, 4)]


class TestEquivalenceSuite:
    def test_passes_with_default_seed(self):
        summary = run_equivalence_suite(0, SIZES)
        assert summary.passed, [c for c in summary.failures]
        names = {c.name for c in summary.checks}
        assert names == {
            "global_group_equivalence",
            "vanilla_ledger_formula",
            "column_oracle_equivalence",
            "height_ledger_formula",
            "column_locality",
            "permutation_equivariance",
            "mode_crossed_precision",
            "partition_bijection",
        }

    def test_column_locality_is_exact(self):
        summary = run_equivalence_suite(0, [(2, 2, 2), (2, 2, 4)])
        locality = [c for c in summary.checks if c.name == "column_locality"]
        assert len(locality) == 2
        assert all(c.passed and c.max_deviation == 0.0 for c in locality)

    def test_float32_run_tracks_float64_run(self):
        summary = run_equivalence_suite(0, [(2, 2, 4)])
        (crossed,) = [c for c in summary.checks if c.name == "mode_crossed_precision"]
        assert crossed.tolerance == 1e-6
        assert crossed.passed
        assert crossed.max_deviation <= 1e-6

    def test_corrupt_reverse_fails(self):
        summary = run_equivalence_suite(0, [(2, 2, 4)], reverse_fn=corrupted_reverse)
        assert not summary.passed
        assert any(c.name == "partition_bijection" for c in summary.failures)

    def test_same_seed_same_summary(self):
        a = run_equivalence_suite(3, SIZES)
        b = run_equivalence_suite(3, SIZES)
        assert a.model_dump_json() == b.model_dump_json()

    def test_oversized_grid_rejected(self):
        with pytest.raises(ConfigurationError):
            run_equivalence_suite(0, [(16, 16, 4)])


class TestGradcheckSuite:
    def test_all_kernels_agree_with_finite_differences(self):
        summary = run_gradcheck_suite(0, [(2, 2, 2), (1, 1, 4)])
        assert summary.passed, [c for c in summary.failures]
        names = {c.name for c in summary.checks}
        assert {"softmax_rows", "layer_norm", "mlp", "attention", "transformer_block"} <= names

    def test_constant_layer_norm_input_is_skipped(self):
        summary = run_gradcheck_suite(0, [(1, 1, 1)])
        skipped = [c for c in summary.checks if c.skipped]
        assert [c.name for c in skipped] == ["layer_norm"]


class TestSlopeFit:
    def test_exact_power_law(self):
        xs = [64, 256, 1024, 4096]
        assert fit_loglog_slope(xs, [3 * x ** 2 for x in xs]) == pytest.approx(2.0, abs=1e-9)

    def test_single_size_not_applicable(self):
        assert fit_loglog_slope([64], [10.0]) is None


class TestScalingBenchmark:
    def test_quadratic_vs_linear_scaling(self):
        sizes = [(4, 4, 4), (8, 8, 4), (16, 16, 4), (32, 32, 4)]
        report = run_scaling_benchmark(sizes, (1, 1, 4), channels=16, repeats=3)
        assert abs(report.slopes["vanilla_attention"]["macs"] - 2.0) < 1e-9
        assert abs(report.slopes["height_attention"]["macs"] - 1.0) < 1e-9
        assert report.slopes["vanilla_attention"]["seconds"] > report.slopes["height_attention"]["seconds"]

    def test_height_macs_scale_by_group_fraction(self):
        report = run_scaling_benchmark([(4, 4, 4), (8, 8, 4)], (1, 1, 4), channels=4, repeats=3)
        by_key = {(r.size, r.op): r for r in report.records}
        for size in [(4, 4, 4), (8, 8, 4)]:
            vanilla = by_key[(size, "vanilla_attention")].macs_measured
            height = by_key[(size, "height_attention")].macs_measured
            assert height * size[0] * size[1] * size[2] == vanilla * 4

    def test_ablation_operators_are_measured(self):
        sizes = [(4, 4, 4), (8, 8, 4), (16, 16, 4)]
        report = run_scaling_benchmark(sizes, (1, 1, 4), channels=4, repeats=3)
        ops = {r.op for r in report.records}
        assert ops == {"vanilla_attention", "height_attention", "bev_window_attention", "conv3d"}
        conv = [r for r in report.records if r.op == "conv3d"]
        assert [r.macs_measured for r in conv] == [t * 27 * 16 for t in (64, 256, 1024)]
        assert abs(report.slopes["conv3d"]["macs"] - 1.0) < 1e-9
        assert abs(report.slopes["bev_window_attention"]["macs"] - 1.0) < 1e-9
        costs = {c.operator: c.macs for c in report.operator_costs["8x8x4"]}
        measured = {r.op: r.macs_measured for r in report.records if r.size == (8, 8, 4)}
        assert costs == measured

    def test_single_size_reports_na(self):
        report = run_scaling_benchmark([(4, 4, 4)], (1, 1, 4), channels=4, repeats=3)
        assert report.slopes["vanilla_attention"]["macs"] is None
        csv = report_to_csv(report)
        assert "vanilla_attention,macs,n/a" in csv

    def test_parallel_flag_keeps_mac_columns(self):
        sizes = [(4, 4, 4), (8, 8, 4)]
        serial = run_scaling_benchmark(sizes, (1, 1, 4), channels=4, repeats=3)
        parallel = run_scaling_benchmark(sizes, (1, 1, 4), channels=4, repeats=3, parallel=True, chunk_size=4)
        assert [r.macs_measured for r in serial.records] == [r.macs_measured for r in parallel.records]

    def test_csv_layout(self):
        report = run_scaling_benchmark([(4, 4, 4), (8, 8, 4)], (1, 1, 4), channels=4, repeats=3)
        lines = report_to_csv(report).splitlines()
        assert lines[0] == "size,op,macs_predicted,macs_measured,seconds"
        assert lines[1].startswith("4x4x4,vanilla_attention,")
        assert "# summary" in lines

    def test_descending_sizes_rejected(self):
        with pytest.raises(ConfigurationError):
            run_scaling_benchmark([(8, 8, 4), (4, 4, 4)], (1, 1, 4), channels=4)

    def test_too_few_repeats_rejected(self):
        with pytest.raises(ConfigurationError):
            run_scaling_benchmark([(4, 4, 4)], (1, 1, 4), channels=4, repeats=2)


def test_corrupted_reverse_breaks_round_trip(rng):
    from app.services.heightattn import PartitionSpec, height_partition

    vox = rng.standard_normal((2, 2, 2, 4))
    spec = PartitionSpec.column(4)
    assert not np.array_equal(corrupted_reverse(height_partition(vox, spec), spec, (2, 2, 4)), vox)
