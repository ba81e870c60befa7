import numpy as np
import pytest

from src.errors import ConfigError, DimensionError
from src.tensor import Tensor
from src.tensor.functional import RunningStats
from src.tensor.parameters import ParameterStore


class TestParameterStore:
    """Unit tests for named parameter storage"""

    @pytest.fixture
    def store(self):
        store = ParameterStore(seed=0)
        store.glorot("layer.weight", (3, 2), 3, 2)
        store.zeros("layer.bias", (2,))
        store.add_buffer("layer.bn", RunningStats.fresh(2))
        return store

    def test_insertion_order_is_stable(self, store):
        store.ones("another.scale", (1,))
        assert store.names() == ["layer.weight", "layer.bias", "another.scale"]

    def test_duplicate_name_rejected(self, store):
        with pytest.raises(ConfigError):
            store.zeros("layer.bias", (2,))

    def test_buffer_name_collides_with_parameter(self, store):
        with pytest.raises(ConfigError):
            store.add_buffer("layer.weight", RunningStats.fresh(2))

    @pytest.mark.parametrize("name", ["", "a..b", ".a", "a."])
    def test_malformed_names_rejected(self, name):
        with pytest.raises(ConfigError):
            ParameterStore().zeros(name, (1,))

    def test_glorot_bounds(self, store):
        bound = np.sqrt(6.0 / 5.0)
        weight = store["layer.weight"].data
        assert weight.dtype == np.float32
        assert np.all(np.abs(weight) <= bound)

    def test_same_seed_same_init(self):
        a, b = ParameterStore(seed=3), ParameterStore(seed=3)
        np.testing.assert_array_equal(a.glorot("w", (4, 4), 4, 4).data, b.glorot("w", (4, 4), 4, 4).data)

    def test_num_parameters_with_prefix(self, store):
        store.zeros("layerx.bias", (5,))
        assert store.num_parameters() == 6 + 2 + 5
        assert store.num_parameters("layer") == 8

    def test_zero_grad(self, store):
        store["layer.bias"].grad = np.ones(2)
        store.zero_grad()
        assert store.entry("layer.bias").grad is None

    def test_override_is_scoped(self, store):
        """Test that an override is visible inside the block only"""
        replacement = Tensor(np.full(2, 7.0, dtype=np.float32))
        with store.override({"layer.bias": replacement}):
            assert store.value("layer.bias") is replacement
        np.testing.assert_array_equal(store.value("layer.bias").data, np.zeros(2))

    def test_override_rejects_unknown_and_misshaped(self, store):
        with pytest.raises(KeyError):
            with store.override({"missing": np.zeros(1)}):
                pass
        with pytest.raises(DimensionError):
            with store.override({"layer.bias": np.zeros(3)}):
                pass

    def test_state_arrays_round_trip(self, store):
        state = store.state_arrays()
        assert list(state) == ["layer.weight", "layer.bias", "layer.bn.running_mean", "layer.bn.running_var"]
        other = ParameterStore(seed=99)
        other.glorot("layer.weight", (3, 2), 3, 2)
        other.zeros("layer.bias", (2,))
        other.add_buffer("layer.bn", RunningStats.fresh(2))
        other.step_count = 4
        other.load_arrays({k: np.array(v) for k, v in state.items()})
        np.testing.assert_array_equal(other["layer.weight"].data, store["layer.weight"].data)
        assert other.step_count == 0

    def test_load_arrays_rejects_mismatch(self, store):
        state = dict(store.state_arrays())
        state.pop("layer.bias")
        with pytest.raises(ConfigError):
            store.load_arrays(state)
        state = dict(store.state_arrays())
        state["layer.bias"] = np.zeros(3)
        with pytest.raises(ConfigError):
            store.load_arrays(state)
