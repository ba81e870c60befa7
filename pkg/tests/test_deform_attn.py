import numpy as np
import pytest

from src.errors import ConfigError, DimensionError
from src.model.deform_attn import (
    MsMhsaParams,
    MultiScaleFeatures,
    flatten_multiscale,
    make_reference_points,
    ms_mhsa,
    sampling_locations,
    sampling_plan,
    unflatten_multiscale,
)
from src.tensor import Tensor
from src.tensor import functional as F
from src.tensor.parameters import ParameterStore

LEVELS = [(4, 4), (2, 2)]


def _pyramid(rng, channels=8, batch=2, shapes=LEVELS):
    return MultiScaleFeatures([Tensor(rng.standard_normal((batch, channels, h, w))) for h, w in shapes])


class TestMultiScaleFeatures:
    """Unit tests for pyramid flattening bookkeeping"""

    def test_offsets(self):
        ms = _pyramid(np.random.default_rng(0), shapes=[(2, 2), (1, 1)])
        assert ms.level_offsets == [0, 4, 5]
        assert ms.num_tokens == 5

    def test_single_pixel_level(self):
        ms = MultiScaleFeatures([Tensor(np.full((1, 3, 1, 1), 2.0))])
        tokens = flatten_multiscale(ms)
        assert tokens.shape == (1, 1, 3)
        np.testing.assert_array_equal(tokens.data, 2.0)

    def test_round_trip_is_exact(self):
        ms = _pyramid(np.random.default_rng(1))
        back = unflatten_multiscale(flatten_multiscale(ms), ms.level_shapes)
        for a, b in zip(ms.levels, back.levels):
            np.testing.assert_array_equal(a.data, b.data)

    def test_row_major_order(self):
        level = np.arange(8.0).reshape(1, 2, 2, 2)
        tokens = flatten_multiscale(MultiScaleFeatures([Tensor(level)])).data
        np.testing.assert_array_equal(tokens[0, :, 0], [0.0, 1.0, 2.0, 3.0])

    def test_rejects_mismatched_levels(self):
        with pytest.raises(DimensionError):
            MultiScaleFeatures([Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 3, 1, 1)))])
        with pytest.raises(DimensionError):
            MultiScaleFeatures([])

    def test_unflatten_rejects_wrong_token_count(self):
        with pytest.raises(DimensionError):
            unflatten_multiscale(Tensor(np.ones((1, 6, 2))), [(2, 2), (1, 1)])


class TestReferencePoints:
    """Unit tests for normalized token centers"""

    def test_single_pixel(self):
        refs = make_reference_points([(1, 1)])
        np.testing.assert_allclose(refs.points[0, 0, 0], [0.5, 0.5])

    def test_two_by_two(self):
        refs = make_reference_points([(2, 2)])
        np.testing.assert_allclose(refs.points[0, :, 0], [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])

    def test_replicated_across_levels(self):
        refs = make_reference_points(LEVELS, batch_size=3)
        assert refs.points.shape == (3, 20, 2, 2)
        np.testing.assert_array_equal(refs.points[:, :, 0], refs.points[:, :, 1])
        assert np.all(refs.points > 0.0) and np.all(refs.points < 1.0)


class TestMsMhsa:
    """Unit tests for multi-scale deformable attention"""

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            MsMhsaParams(ParameterStore(), "attn", channels=6, num_levels=1, num_heads=4)

    def test_initial_weights_are_uniform(self):
        rng = np.random.default_rng(0)
        params = MsMhsaParams(ParameterStore(0), "attn", channels=8, num_levels=2, num_heads=2, num_points=3)
        query = Tensor(rng.standard_normal((1, 20, 8)))
        _, weights = sampling_plan(query, Tensor(np.zeros((1, 20, 8))), make_reference_points(LEVELS), LEVELS, params)
        np.testing.assert_allclose(weights.data, 1.0 / 6.0)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(1)
        store = ParameterStore(0)
        params = MsMhsaParams(store, "attn", channels=8, num_levels=2, num_heads=2, num_points=3)
        query = Tensor(rng.standard_normal((1, 20, 8)))
        with store.override({"attn.attention_weights.weight": rng.standard_normal((8, 12))}):
            _, weights = sampling_plan(query, Tensor(np.zeros((1, 20, 8))), make_reference_points(LEVELS), LEVELS, params)
        np.testing.assert_allclose(weights.data.sum(axis=(3, 4)), 1.0, atol=1e-6)

    def test_degenerates_to_cross_level_average(self):
        """Test zero offsets, K=1, uniform weights and identity projections"""
        rng = np.random.default_rng(2)
        store = ParameterStore(0)
        params = MsMhsaParams(store, "attn", channels=8, num_levels=2, num_heads=2, num_points=1)
        ms = _pyramid(rng)
        refs = make_reference_points(LEVELS, batch_size=2)
        query = flatten_multiscale(ms)
        identity = {"attn.value_proj.weight": np.eye(8), "attn.output_proj.weight": np.eye(8)}
        with store.override(identity):
            out = ms_mhsa(query, Tensor(rng.standard_normal(query.shape)), ms, refs, params).data
        expected = np.mean(
            [F.bilinear_sample(level, Tensor(refs.points[:, :, l])).data for l, level in enumerate(ms.levels)], axis=0
        )
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_single_pixel_ignores_offsets(self):
        """Test that every sample of a 1x1 map reads its only pixel"""
        rng = np.random.default_rng(3)
        store = ParameterStore(0)
        params = MsMhsaParams(store, "attn", channels=4, num_levels=1, num_heads=2, num_points=1)
        ms = MultiScaleFeatures([Tensor(rng.standard_normal((1, 4, 1, 1)))])
        query = flatten_multiscale(ms)
        with store.override({"attn.sampling_offsets.weight": rng.standard_normal((4, 4)) * 5.0}):
            out = ms_mhsa(query, Tensor(np.zeros((1, 1, 4))), ms, make_reference_points([(1, 1)]), params)
        expected = params.output_proj(params.value_proj(query))
        np.testing.assert_allclose(out.data, expected.data, atol=1e-6)

    def test_output_shape(self):
        rng = np.random.default_rng(4)
        params = MsMhsaParams(ParameterStore(0), "attn", channels=8, num_levels=2, num_heads=4, num_points=2)
        ms = _pyramid(rng)
        query = flatten_multiscale(ms)
        out = ms_mhsa(query, Tensor(np.zeros(query.shape)), ms, make_reference_points(LEVELS, 2), params)
        assert out.shape == (2, 20, 8)

    def test_level_count_mismatch(self):
        rng = np.random.default_rng(5)
        params = MsMhsaParams(ParameterStore(0), "attn", channels=8, num_levels=2, num_heads=2, num_points=1)
        ms = _pyramid(rng, shapes=[(4, 4)])
        query = flatten_multiscale(ms)
        with pytest.raises(DimensionError):
            ms_mhsa(query, Tensor(np.zeros(query.shape)), ms, make_reference_points([(4, 4)], 2), params)

    def test_offset_scaling_with_resolution(self):
        """Test that doubling a level and its pixel offsets leaves normalized locations unchanged"""
        rng = np.random.default_rng(6)
        refs = make_reference_points([(4, 4)]).points
        offsets = rng.standard_normal((1, 16, 2, 1, 3, 2))
        coarse = sampling_locations(refs, Tensor(offsets), [(4, 4)]).data
        fine = sampling_locations(refs, Tensor(2.0 * offsets), [(8, 8)]).data
        np.testing.assert_allclose(coarse, fine, atol=1e-12)

    def test_gradients_reach_every_projection(self):
        rng = np.random.default_rng(7)
        store = ParameterStore(0)
        params = MsMhsaParams(store, "attn", channels=8, num_levels=2, num_heads=2, num_points=2)
        ms = _pyramid(rng)
        query = flatten_multiscale(ms)
        perturbed = {n: Tensor(store[n].data + rng.normal(0, 0.3, store[n].shape), requires_grad=True) for n in store}
        with store.override(perturbed):
            ms_mhsa(query, Tensor(rng.standard_normal(query.shape)), ms, make_reference_points(LEVELS, 2), params).sum().backward()
        for name, tensor in perturbed.items():
            assert tensor.grad is not None and np.any(tensor.grad != 0.0), name
