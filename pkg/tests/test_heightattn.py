import numpy as np
import pytest

from app.errors import PartitionError, ShapeError
from app.models import FlopLedger, init_layer_params
from app.services.heightattn import (
    PartitionSpec,
    complexity_conv3d,
    complexity_height,
    complexity_vanilla,
    conv3d,
    divisor_specs,
    height_attention,
    height_partition,
    height_reverse,
    operator_complexities,
    refine_voxels,
    transformer_block,
    vanilla_attention,
    window_spec,
)
from app.services.tensorcore import layer_norm, mlp_forward
from app.services.verify import brute_force_attention


def _grids_up_to(limit=(8, 8, 4)):
    sizes = [1, 2, 4, 8]
    return [
        (x, y, z)
        for x in sizes if x <= limit[0]
        for y in sizes if y <= limit[1]
        for z in (1, 2, 4) if z <= limit[2]
    ]


class TestPartition:
    def test_shape_and_first_sequence(self, rng):
        vox = rng.standard_normal((3, 4, 2, 4))
        seq = height_partition(vox, PartitionSpec(2, 1, 2))
        assert seq.shape == (2 * 2 * 2, 4, 3)
        # Group (0, 0, 0), tokens in (dx, dy, dz) order
        expected = [vox[:, 0, 0, 0], vox[:, 0, 0, 1], vox[:, 1, 0, 0], vox[:, 1, 0, 1]]
        np.testing.assert_array_equal(seq[0], np.stack(expected))

    def test_column_spec_keeps_columns_together(self, rng):
        vox = rng.standard_normal((2, 3, 2, 4))
        seq = height_partition(vox, PartitionSpec.column(4))
        np.testing.assert_array_equal(seq[1 * 2 + 1], vox[:, 1, 1, :].T)

    def test_bijection_over_all_divisor_specs(self):
        rng = np.random.default_rng(5)
        dims = (4, 4, 4)
        specs = divisor_specs(dims)
        assert len(specs) == 27
        for _ in range(100):
            vox = rng.standard_normal((3,) + dims)
            for spec in specs:
                assert np.array_equal(height_reverse(height_partition(vox, spec), spec, dims), vox)

    def test_non_dividing_spec_names_axis(self, rng):
        with pytest.raises(PartitionError, match="y extent 4"):
            height_partition(rng.standard_normal((2, 4, 4, 2)), PartitionSpec(2, 3, 1))

    def test_reverse_rejects_inconsistent_sequences(self, rng):
        with pytest.raises(PartitionError):
            height_reverse(rng.standard_normal((3, 4, 2)), PartitionSpec(1, 1, 4), (2, 2, 4))

    def test_resolve_zero_means_full_axis(self):
        assert PartitionSpec.resolve((1, 1, 0), (4, 4, 6)).as_tuple() == (1, 1, 6)

    def test_reverse_partition_reverse_equals_reverse(self, rng):
        dims = (2, 4, 4)
        for spec in divisor_specs(dims):
            seq = rng.standard_normal((spec.num_sequences(dims), spec.sequence_length, 3))
            once = height_reverse(seq, spec, dims)
            twice = height_reverse(height_partition(once, spec), spec, dims)
            assert np.array_equal(twice, once)

    def test_one_modified_token_moves_one_voxel(self, rng):
        dims = (2, 2, 4)
        spec = PartitionSpec(1, 2, 2)
        seq = rng.standard_normal((4, 4, 3))
        base = height_reverse(seq, spec, dims)
        edited = seq.copy()
        edited[2, 3] += 1.0
        changed = np.argwhere(np.any(height_reverse(edited, spec, dims) != base, axis=0))
        # Group 2 is block (1, 0, 0); token 3 is (dx, dy, dz) = (0, 1, 1)
        assert changed.tolist() == [[1, 1, 1]]


class TestAttention:
    def test_single_token_returns_value_projection(self, layer_params, rng):
        token = rng.standard_normal((1, 4))
        out = vanilla_attention(token, layer_params)
        np.testing.assert_allclose(out, token @ layer_params.wv + layer_params.bv, atol=1e-14)

    def test_matches_brute_force(self, layer_params, rng):
        tokens = rng.standard_normal((6, 4))
        np.testing.assert_allclose(
            vanilla_attention(tokens, layer_params), brute_force_attention(tokens, layer_params), atol=1e-12
        )

    def test_ledger_counts_tracked_products(self, layer_params, rng):
        ledger = FlopLedger()
        vanilla_attention(rng.standard_normal((5, 4)), layer_params, ledger)
        assert ledger.qk_macs == 25 * 4
        assert ledger.sv_macs == 25 * 4
        assert ledger.other_macs == 3 * 5 * 4 * 4

    def test_heads_keep_tracked_totals(self, rng):
        params = init_layer_params(rng, 8, 32)
        tokens = rng.standard_normal((3, 6, 8))
        one, two = FlopLedger(), FlopLedger()
        vanilla_attention(tokens, params, one, heads=1)
        out = vanilla_attention(tokens, params, two, heads=2)
        assert out.shape == tokens.shape
        assert one.tracked_macs == two.tracked_macs

    def test_heads_must_divide_channels(self, layer_params, rng):
        with pytest.raises(ShapeError):
            vanilla_attention(rng.standard_normal((3, 4)), layer_params, heads=3)

    def test_empty_sequence_rejected(self, layer_params):
        with pytest.raises(ShapeError):
            vanilla_attention(np.zeros((0, 4)), layer_params)

    def test_global_group_equals_vanilla(self):
        rng = np.random.default_rng(11)
        dims = (2, 2, 4)
        for _ in range(20):
            params = init_layer_params(rng, 4, 16)
            vox = rng.standard_normal((4,) + dims)
            grouped = height_attention(vox, PartitionSpec(*dims), params)
            flat = vanilla_attention(vox.reshape(4, -1).T, params).T.reshape(vox.shape)
            assert np.max(np.abs(grouped - flat)) < 1e-12

    def test_column_attention_matches_per_column_oracle(self, layer_params, rng):
        vox = rng.standard_normal((4, 4, 4, 4))
        out = height_attention(vox, PartitionSpec.column(4), layer_params)
        for i in range(4):
            for j in range(4):
                expected = brute_force_attention(vox[:, i, j, :].T, layer_params)
                assert np.max(np.abs(out[:, i, j, :].T - expected)) < 1e-12

    def test_column_perturbation_stays_in_column(self, layer_params, rng):
        vox = rng.standard_normal((4, 3, 2, 4))
        spec = PartitionSpec.column(4)
        base = height_attention(vox, spec, layer_params)
        nudged = vox.copy()
        nudged[:, 1, 0, :] += rng.standard_normal((4, 4))
        out = height_attention(nudged, spec, layer_params)
        for i in range(3):
            for j in range(2):
                if (i, j) == (1, 0):
                    assert not np.array_equal(out[:, i, j], base[:, i, j])
                else:
                    assert np.array_equal(out[:, i, j], base[:, i, j])

    def test_parallel_matches_serial_bitwise(self, layer_params, rng):
        vox = rng.standard_normal((4, 8, 8, 4))
        spec = PartitionSpec.column(4)
        serial_ledger, parallel_ledger = FlopLedger(), FlopLedger()
        serial = height_attention(vox, spec, layer_params, serial_ledger, chunk_size=8)
        parallel = height_attention(
            vox, spec, layer_params, parallel_ledger, parallel=True, workers=4, chunk_size=8
        )
        assert serial.tobytes() == parallel.tobytes()
        assert serial_ledger.snapshot() == parallel_ledger.snapshot()


class TestComplexity:
    def test_ledger_matches_formulas_over_sweep(self, rng):
        channels = 4
        params = init_layer_params(rng, channels, 16)
        for dims in _grids_up_to():
            vox = rng.standard_normal((channels,) + dims)
            flat_ledger = FlopLedger()
            vanilla_attention(vox.reshape(channels, -1).T, params, flat_ledger)
            assert flat_ledger.tracked_macs == complexity_vanilla(dims, channels)
            for spec in divisor_specs(dims):
                ledger = FlopLedger()
                height_attention(vox, spec, params, ledger)
                assert ledger.tracked_macs == complexity_height(dims, spec, channels)

    def test_global_spec_coincides_with_vanilla(self):
        dims = (4, 2, 4)
        assert complexity_height(dims, PartitionSpec(*dims), 16) == complexity_vanilla(dims, 16)

    def test_ratio_identity(self):
        for dims in _grids_up_to():
            for spec in divisor_specs(dims):
                ratio = complexity_vanilla(dims, 8) * spec.sequence_length
                assert ratio == complexity_height(dims, spec, 8) * dims[0] * dims[1] * dims[2]

    def test_known_values(self):
        assert complexity_vanilla((4, 4, 4), 16) == 2 * 64 * 64 * 16
        assert complexity_height((4, 4, 4), PartitionSpec.column(4), 16) == 2 * 64 * 4 * 16
        assert complexity_conv3d((2, 2, 2), 4) == 8 * 27 * 16

    def test_invalid_spec_rejected(self):
        with pytest.raises(PartitionError):
            complexity_height((4, 4, 4), PartitionSpec(3, 1, 1), 4)

    def test_window_spec_caps_at_grid(self):
        assert window_spec((32, 32, 4)).as_tuple() == (4, 4, 1)
        assert window_spec((2, 6, 4)).as_tuple() == (2, 2, 1)


class TestConv3d:
    def test_matches_direct_sum(self, rng):
        c, dims = 3, (3, 2, 4)
        vox = rng.standard_normal((c,) + dims)
        weight = rng.standard_normal((3, 3, 3, c, c))
        bias = rng.standard_normal(c)
        out = conv3d(vox, weight, bias)
        padded = np.pad(vox, ((0, 0), (1, 1), (1, 1), (1, 1)))
        for i in range(dims[0]):
            for j in range(dims[1]):
                for k in range(dims[2]):
                    patch = padded[:, i:i + 3, j:j + 3, k:k + 3]
                    expected = np.einsum("cxyz,xyzcd->d", patch, weight) + bias
                    np.testing.assert_allclose(out[:, i, j, k], expected, atol=1e-12)

    def test_centre_tap_identity(self, rng):
        vox = rng.standard_normal((2, 3, 3, 3))
        weight = np.zeros((3, 3, 3, 2, 2))
        weight[1, 1, 1] = np.eye(2)
        assert np.array_equal(conv3d(vox, weight, np.zeros(2)), vox)

    def test_ledger_matches_formula(self, rng):
        ledger = FlopLedger()
        conv3d(rng.standard_normal((4, 4, 2, 3)), rng.standard_normal((3, 3, 3, 4, 4)), np.zeros(4), ledger)
        assert ledger.other_macs == complexity_conv3d((4, 2, 3), 4)
        assert ledger.tracked_macs == 0

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv3d(rng.standard_normal((2, 2, 2, 2)), np.zeros((2, 2, 2, 2, 2)), np.zeros(2))


class TestOperatorTable:
    def test_operator_table_orders_costs(self):
        costs = operator_complexities((32, 32, 4), PartitionSpec.column(4), 16)
        assert set(costs) == {"vanilla_attention", "height_attention", "bev_window_attention", "conv3d"}
        assert costs["height_attention"] < costs["vanilla_attention"]


class TestTransformerBlock:
    def test_zeroed_branches_are_bitwise_identity(self, layer_params, rng):
        seq = rng.standard_normal((6, 4, 4))
        out = transformer_block(seq, layer_params.without_residual_branches())
        assert np.array_equal(out, seq)

    def test_matches_stepwise_composition(self, layer_params, rng):
        seq = rng.standard_normal((3, 5, 4))
        p = layer_params
        out = transformer_block(seq, p)
        for n in range(seq.shape[0]):
            tokens = seq[n]
            attn = brute_force_attention(layer_norm(tokens, p.ln1_gain, p.ln1_bias, 1e-5), p)
            mid = tokens + (attn @ p.wo + p.bo)
            expected = mid + mlp_forward(layer_norm(mid, p.ln2_gain, p.ln2_bias, 1e-5), p)
            np.testing.assert_allclose(out[n], expected, rtol=0, atol=1e-12)

    def test_shape_preserved_and_ledger_per_block(self, layer_params, rng):
        seq = rng.standard_normal((6, 4, 4))
        ledger = FlopLedger()
        out = transformer_block(seq, layer_params, ledger)
        assert out.shape == seq.shape
        assert ledger.tracked_macs == 2 * 6 * 4 * 4 * 4

    def test_wrong_channel_count(self, layer_params, rng):
        with pytest.raises(ShapeError):
            transformer_block(rng.standard_normal((2, 3, 5)), layer_params)

    def test_refine_runs_every_block(self, rng):
        blocks = [init_layer_params(rng, 4, 16) for _ in range(3)]
        vox = rng.standard_normal((4, 2, 2, 4))
        spec = PartitionSpec.column(4)
        ledger = FlopLedger()
        out = refine_voxels(vox, spec, blocks, ledger)
        assert out.shape == vox.shape
        assert ledger.tracked_macs == 3 * complexity_height((2, 2, 4), spec, 4)

    def test_height_embedding_changes_output(self, rng):
        blocks = [init_layer_params(rng, 4, 16)]
        vox = rng.standard_normal((4, 2, 2, 3))
        spec = PartitionSpec.column(3)
        embedding = rng.standard_normal((3, 4))
        plain = refine_voxels(vox, spec, blocks)
        embedded = refine_voxels(vox, spec, blocks, height_embedding=embedding)
        assert not np.allclose(plain, embedded)

    def test_height_embedding_shape_checked(self, rng):
        blocks = [init_layer_params(rng, 4, 16)]
        with pytest.raises(ShapeError):
            refine_voxels(
                rng.standard_normal((4, 2, 2, 3)), PartitionSpec.column(3), blocks,
                height_embedding=np.zeros((2, 4)),
            )
