import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from veinmatch import autodiff as ad
from veinmatch import checkpoint
from veinmatch.errors import CheckpointError, DimensionError, MaskError, SpecError
from veinmatch.model import (BlockSpec, ModelSpec, apply_freeze, build_model, channel_attention,
                             channel_gates, extract_embedding, forward, forward_logits, load_model,
                             parameter_shapes, resolve_mask, save_model, spatial_attention,
                             standardize)

SMALL = ModelSpec(input_height=16, input_width=16, blocks=(BlockSpec(1, 4), BlockSpec(1, 6)),
                  head_hidden=(8,), num_classes=3, reduction=2)


class TestSpec:
    def test_default_embedding_dim(self):
        assert ModelSpec().embedding_dim() == 64 * 8 * 8 == 4096

    def test_json_roundtrip(self):
        spec = ModelSpec(blocks=(BlockSpec(1, 8), BlockSpec(2, 4, False)), embed_tap="head.hidden1",
                         global_pool=True)
        assert ModelSpec.from_json(json.loads(spec.canonical_json())) == spec

    @pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(blocks=()), dict(dropout=1.0),
                                        dict(embed_tap="block9"), dict(input_height=4),
                                        dict(input_channels=3)])
    def test_invalid(self, kwargs):
        with pytest.raises(SpecError):
            ModelSpec(**kwargs)

    def test_malformed_json(self):
        with pytest.raises(SpecError):
            ModelSpec.from_json({"blocks": []})

    @pytest.mark.parametrize("tap, dim", [("block1", 4 * 8 * 8), ("block2", 6 * 4 * 4),
                                          ("head.hidden1", 8), ("head.out", 3)])
    def test_tap_dims(self, tap, dim):
        spec = ModelSpec(**{**SMALL.__dict__, "embed_tap": tap})
        params = build_model(spec, 0)
        emb = extract_embedding(params, np.random.default_rng(0).uniform(size=(2, 1, 16, 16)))
        assert spec.embedding_dim() == dim and emb.shape == (2, dim)

    def test_global_pool_dim(self):
        spec = ModelSpec(**{**SMALL.__dict__, "global_pool": True})
        assert spec.embedding_dim() == 6
        assert parameter_shapes(spec)["head.hidden1.weight"] == (8, 6)


class TestInit:
    def test_deterministic(self):
        a, b = build_model(SMALL, 5), build_model(SMALL, 5)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
        assert a.content_hash() == b.content_hash()
        assert a.content_hash() != build_model(SMALL, 6).content_hash()

    def test_biases_zero_and_fan_in_bound(self):
        params = build_model(ModelSpec(), 0)
        for name, arr in params.tensors.items():
            if name.endswith(".bias"):
                assert not arr.any()
            else:
                bound = np.sqrt(6.0 / np.prod(arr.shape[1:]))
                assert np.abs(arr).max() <= bound

    def test_attention_toggle_leaves_other_tensors(self):
        on = build_model(SMALL, 1)
        off = build_model(SMALL.with_attention(False), 1)
        assert set(off.tensors) < set(on.tensors)
        for name, arr in off.tensors.items():
            if not name.startswith("head"):
                assert np.array_equal(arr, on.tensors[name])


class TestAttention:
    def test_spatial_zero_weights_halves(self, rng):
        x = rng.normal(size=(3, 9, 9))
        out = spatial_attention(x, np.zeros((1, 2, 7, 7)), np.zeros(1))
        np.testing.assert_allclose(out.data, x / 2)

    def test_spatial_uniform_input_gives_uniform_gate(self, rng):
        x = np.ones((2, 12, 12)) * np.array([1.0, 3.0])[:, None, None]
        out = spatial_attention(x, rng.normal(size=(1, 2, 7, 7)), np.zeros(1)).data
        gate = out[0] / x[0]
        # uniform away from the zero-padded border
        assert np.ptp(gate[3:-3, 3:-3]) < 1e-12

    @given(st.integers(7, 12), st.integers(7, 12))
    def test_spatial_shape_preserved(self, h, w):
        x = np.ones((2, h, w))
        assert spatial_attention(x, np.full((1, 2, 7, 7), 0.1), np.zeros(1)).shape == (2, h, w)

    def test_channel_zero_mlp_gives_half(self, rng):
        x = rng.normal(size=(4, 5, 5))
        gates = channel_gates(x, np.zeros((2, 4)), np.zeros(2), np.zeros((4, 2)), np.zeros(4))
        np.testing.assert_array_equal(gates, 0.5)

    def test_identical_channels_identical_gates(self, rng):
        x = np.repeat(rng.normal(size=(1, 5, 5)), 4, axis=0)
        w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(4, 2))
        # symmetric weights so the MLP treats channels alike
        w1[:] = w1[:, :1]
        w2[:] = w2[:1, :]
        gates = channel_gates(x, w1, np.zeros(2), w2, np.zeros(4))
        assert np.ptp(gates) == 0

    def test_saturated_gate_suppresses_channel(self, rng):
        x = np.abs(rng.normal(size=(2, 4, 4))) + 0.1
        fc2_b = np.array([-10.0, 10.0])
        out = channel_attention(x, np.zeros((1, 2)), np.zeros(1), np.zeros((2, 1)), fc2_b).data
        gates = channel_gates(x, np.zeros((1, 2)), np.zeros(1), np.zeros((2, 1)), fc2_b)
        assert np.all((gates > 0) & (gates < 1))
        assert np.linalg.norm(out[0]) / np.linalg.norm(x[0]) < 1e-3


class TestForward:
    def test_logit_shape_and_determinism(self, rng):
        params = build_model(SMALL, 0)
        x = rng.uniform(0.1, 1, size=(3, 1, 16, 16))
        a, b = forward_logits(params, x), forward_logits(params, x)
        assert a.shape == (3, 3) and np.array_equal(a, b)

    def test_single_image(self, rng):
        params = build_model(SMALL, 0)
        x = rng.uniform(0.1, 1, size=(1, 16, 16))
        assert extract_embedding(params, x).shape == (SMALL.embedding_dim(),)

    def test_doubling_intensity_changes_logits(self, rng):
        params = build_model(SMALL, 2)
        x = rng.uniform(0.1, 0.5, size=(1, 1, 16, 16))
        # a global scale is removed by standardization, so perturb contrast instead
        y = x.copy()
        y[..., :8] *= 2
        assert np.abs(forward_logits(params, x) - forward_logits(params, y)).max() > 0

    def test_zero_input_zero_embedding(self):
        emb = extract_embedding(build_model(SMALL, 0), np.zeros((1, 16, 16)))
        assert np.linalg.norm(emb) == 0

    def test_wrong_input_shape(self):
        with pytest.raises(DimensionError):
            forward(build_model(SMALL, 0), np.zeros((1, 1, 8, 8)))

    def test_training_dropout_is_seeded(self, rng):
        params = build_model(SMALL, 0)
        x = rng.uniform(0.1, 1, size=(2, 1, 16, 16))
        a = forward_logits(params, x, seed=3, training=True)
        assert np.array_equal(a, forward_logits(params, x, seed=3, training=True))
        assert not np.array_equal(a, forward_logits(params, x, seed=4, training=True))

    def test_float32_close_to_float64(self, rng):
        params = build_model(SMALL, 0)
        x = rng.uniform(0.1, 1, size=(2, 1, 16, 16))
        ref = extract_embedding(params, x)
        with ad.precision(np.float32):
            low = extract_embedding(params, x)
        assert low.dtype == np.float32
        np.testing.assert_allclose(low, ref, rtol=1e-3, atol=1e-4)


class TestStandardize:
    def test_signal_pixels_normalized(self, rng):
        x = rng.uniform(1, 255, size=(2, 1, 8, 8))
        out = standardize(ad.Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(1, 2, 3)), 1, atol=1e-5)

    def test_background_ignored(self, rng):
        x = rng.uniform(1, 255, size=(1, 1, 8, 8))
        padded = np.zeros((1, 1, 8, 12))
        padded[..., :8] = x
        out = standardize(ad.Tensor(padded)).data
        np.testing.assert_allclose(out[..., :8], standardize(ad.Tensor(x)).data)
        assert not out[..., 8:].any()

    @given(st.floats(0.1, 10), st.floats(0, 5))
    def test_affine_invariant(self, scale, offset):
        x = np.random.default_rng(0).uniform(1, 2, size=(1, 1, 6, 6))
        a = standardize(ad.Tensor(x)).data
        b = standardize(ad.Tensor(x * scale + offset)).data
        np.testing.assert_allclose(a, b, atol=1e-4)


class TestFreeze:
    def test_prefix_expansion(self):
        params = build_model(SMALL, 0)
        groups = resolve_mask(params, ["block1"])
        assert "block1.conv1" in groups and "block1.channel_attention.fc1" in groups
        assert not any(g.startswith("block2") for g in groups)

    def test_empty_mask(self):
        params = apply_freeze(build_model(SMALL, 0), [])
        assert params.trainable_names() == list(params.tensors)

    def test_unknown_group(self):
        with pytest.raises(MaskError):
            resolve_mask(build_model(SMALL, 0), ["block7"])


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        params = build_model(SMALL, 4)
        save_model(tmp_path / "m", params)
        back = load_model(tmp_path / "m")
        assert back.spec == params.spec and back.content_hash() == params.content_hash()

    def test_saved_bytes_are_stable(self, tmp_path):
        save_model(tmp_path / "a", build_model(SMALL, 4))
        save_model(tmp_path / "b", build_model(SMALL, 4))
        for name in ("spec.json", "params.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_mismatched_params(self, tmp_path):
        save_model(tmp_path / "m", build_model(SMALL, 4))
        other = build_model(ModelSpec(**{**SMALL.__dict__, "num_classes": 5}), 0)
        checkpoint.save(tmp_path / "m" / "params.ckpt", other.tensors)
        with pytest.raises(SpecError):
            load_model(tmp_path / "m")


class TestCheckpoint:
    @given(st.lists(st.tuples(st.text(min_size=1, max_size=8),
                              st.lists(st.integers(1, 3), min_size=0, max_size=3)),
                    max_size=4, unique_by=lambda t: t[0]))
    def test_roundtrip(self, entries):
        rng = np.random.default_rng(0)
        tensors = {name: rng.normal(size=tuple(shape)) for name, shape in entries}
        back = checkpoint.decode(checkpoint.encode(tensors))
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].shape == np.shape(tensors[k]) and np.array_equal(back[k], tensors[k])

    def test_header_layout(self):
        data = checkpoint.encode({"w": np.array([1.5])})
        assert data[:8] == b"VMCKPT\x00\x00"
        assert data[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert len(data) == 16 + 4 + 1 + 4 + 4 + 8

    @pytest.mark.parametrize("mutate", [lambda d: b"XXXXXXXX" + d[8:], lambda d: d[:-3],
                                        lambda d: d + b"\x00",
                                        lambda d: d[:8] + (2).to_bytes(4, "little") + d[12:]])
    def test_corrupt(self, mutate):
        data = checkpoint.encode({"w": np.ones((2, 2))})
        with pytest.raises(CheckpointError):
            checkpoint.decode(mutate(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            checkpoint.load(tmp_path / "nope.ckpt")
