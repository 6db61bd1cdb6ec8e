import math
import struct

import numpy as np
import pytest

from cdpa.denoiser import (
    BadMagicError,
    BadVersionError,
    ChecksumError,
    ConditionBundle,
    MissingTensorError,
    NonFiniteWeightError,
    TensorShapeError,
    TruncatedFileError,
    UNetModel,
    WeightStore,
    conv2d,
    default_descriptor,
    denoise_slices,
    expected_tensors,
    group_norm,
    load_weights,
    read_container,
    save_weights,
    silu,
    sinusoidal_embed,
    softmax,
    unet_forward,
    upsample_nearest,
    write_container,
)
from conftest import random_weight_store, zero_weight_store


class TestSinusoidalEmbed:
    def test_zero_value(self):
        emb = sinusoidal_embed(0, 16)
        assert np.allclose(emb[0::2], 0.0)
        assert np.allclose(emb[1::2], 1.0)

    def test_distinct_small_indices(self):
        embs = sinusoidal_embed(np.arange(64), 32)
        diffs = embs[None, :, :] - embs[:, None, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        dist[np.diag_indices(64)] = np.inf
        assert dist.min() > 0.0

    def test_matches_naive_formula(self):
        dim, period = 24, 10000.0
        value = 137
        half = dim // 2
        naive = np.empty(dim)
        for k in range(half):
            freq = period ** (-k / half)
            naive[2 * k] = math.sin(value * freq)
            naive[2 * k + 1] = math.cos(value * freq)
        assert np.abs(sinusoidal_embed(value, dim, period) - naive).max() < 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_embed(1, 15)


class TestLayerPrimitives:
    def test_conv_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(x, w, np.zeros(3, np.float32))
        assert np.array_equal(out, x)

    def test_conv_shifted_kernel_zero_border(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 0, 0] = 1.0  # reads the up-left neighbor
        out = conv2d(x, w, np.zeros(1, np.float32))
        expected = np.zeros_like(x)
        expected[0, 0, 1:, 1:] = x[0, 0, :-1, :-1]
        assert np.array_equal(out, expected)

    def test_conv_stride_two(self):
        x = np.random.default_rng(1).standard_normal((1, 2, 8, 8)).astype(np.float32)
        w = np.random.default_rng(2).standard_normal((4, 2, 3, 3)).astype(np.float32)
        out = conv2d(x, w, np.zeros(4, np.float32), stride=2)
        assert out.shape == (1, 4, 4, 4)
        full = conv2d(x, w, np.zeros(4, np.float32))
        assert np.allclose(out, full[:, :, ::2, ::2], atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(3).standard_normal((5, 7, 11)).astype(np.float32) * 10
        s = softmax(x, axis=-1)
        assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-6
        assert np.all(s >= 0)

    def test_group_norm_formula(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
        w = rng.standard_normal(8).astype(np.float32)
        b = rng.standard_normal(8).astype(np.float32)
        out = group_norm(x, w, b, groups=2)
        ref = np.empty_like(x)
        for bi in range(2):
            for g in range(2):
                blk = x[bi, g * 4:(g + 1) * 4].astype(np.float64)
                normed = (blk - blk.mean()) / np.sqrt(blk.var() + 1e-5)
                ref[bi, g * 4:(g + 1) * 4] = normed
        ref = ref * w[None, :, None, None] + b[None, :, None, None]
        assert np.abs(out - ref).max() < 1e-5

    def test_silu_and_upsample(self):
        x = np.array([[[[-1.0, 0.0], [1.0, 2.0]]]], np.float32)
        s = silu(x)
        assert s[0, 0, 0, 1] == 0.0
        assert abs(s[0, 0, 1, 0] - 1.0 / (1.0 + math.exp(-1.0))) < 1e-6
        up = upsample_nearest(x)
        assert up.shape == (1, 1, 4, 4)
        assert np.all(up[0, 0, :2, :2] == -1.0)


class TestWeightContainer:
    def test_round_trip_bitwise(self, tmp_path):
        store = random_weight_store(seed=5)
        path = str(tmp_path / "w.cdpa")
        save_weights(path, store)
        loaded = load_weights(path)
        assert loaded.descriptor == store.descriptor
        assert set(loaded.tensors) == set(store.tensors)
        for name in store.tensors:
            assert np.array_equal(loaded.tensors[name], store.tensors[name])

    def test_truncated_file(self, tmp_path):
        store = random_weight_store(seed=6)
        path = str(tmp_path / "w.cdpa")
        save_weights(path, store)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:len(blob) // 2])
        with pytest.raises((TruncatedFileError, ChecksumError)):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "w.cdpa")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            load_weights(path)

    def test_bad_version(self, tmp_path):
        store = random_weight_store(seed=7)
        path = str(tmp_path / "w.cdpa")
        save_weights(path, store)
        blob = bytearray(open(path, "rb").read())
        blob[4:8] = struct.pack("<I", 9)
        # keep the footer honest so the version error fires, not the CRC
        import zlib
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])) & 0xFFFFFFFF)
        open(path, "wb").write(bytes(blob))
        with pytest.raises(BadVersionError):
            load_weights(path)

    def test_checksum_corruption(self, tmp_path):
        store = random_weight_store(seed=8)
        path = str(tmp_path / "w.cdpa")
        save_weights(path, store)
        blob = bytearray(open(path, "rb").read())
        blob[200] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ChecksumError):
            load_weights(path)

    def test_missing_tensor(self, tmp_path):
        store = random_weight_store(seed=9)
        tensors = dict(store.tensors)
        del tensors["stem.weight"]
        path = str(tmp_path / "w.cdpa")
        write_container(path, store.descriptor, tensors)
        with pytest.raises(MissingTensorError, match="stem.weight"):
            load_weights(path)

    def test_shape_mismatch(self, tmp_path):
        store = random_weight_store(seed=10)
        tensors = dict(store.tensors)
        tensors["stem.bias"] = np.zeros(7, np.float32)
        path = str(tmp_path / "w.cdpa")
        write_container(path, store.descriptor, tensors)
        with pytest.raises(TensorShapeError, match="stem.bias"):
            load_weights(path)

    def test_nan_weights(self, tmp_path):
        store = random_weight_store(seed=11)
        tensors = dict(store.tensors)
        bad = tensors["stem.weight"].copy()
        bad[0, 0, 0, 0] = np.nan
        tensors["stem.weight"] = bad
        path = str(tmp_path / "w.cdpa")
        write_container(path, store.descriptor, tensors)
        with pytest.raises(NonFiniteWeightError, match="stem.weight"):
            load_weights(path)

    def test_generic_container_round_trip(self, tmp_path):
        path = str(tmp_path / "fixture.cdpa")
        tensors = {"input": np.random.default_rng(1).random((2, 8, 8)).astype(np.float32),
                   "expected_output": np.zeros((8, 8), np.float32),
                   "timestep": np.array([400.0], np.float32)}
        write_container(path, {"arch": "parity-fixture"}, tensors)
        desc, loaded = read_container(path)
        assert desc == {"arch": "parity-fixture"}
        assert np.array_equal(loaded["input"], tensors["input"])


class TestUNetForward:
    def test_zero_weights_zero_output(self):
        model = UNetModel(zero_weight_store())
        x = np.random.default_rng(12).standard_normal((2, 2, 32, 32)).astype(np.float32)
        out = model.forward(x, timestep=[5, 10], slice_index=[0, 1], num_views=[20, 20])
        assert np.all(out == 0.0)

    @pytest.mark.parametrize("size", [32, 64])
    def test_output_shape(self, size, random_noise_store):
        model = UNetModel(random_noise_store)
        x = np.zeros((1, 2, size, size), np.float32)
        out = model.forward(x, timestep=[100], slice_index=[3], num_views=[20])
        assert out.shape == (1, size, size)

    def test_purity_bitwise(self, random_noise_store):
        model = UNetModel(random_noise_store)
        x = np.random.default_rng(13).standard_normal((2, 2, 32, 32)).astype(np.float32)
        kw = dict(timestep=[7, 90], slice_index=[1, 2], num_views=[10, 20])
        assert np.array_equal(model.forward(x, **kw), model.forward(x, **kw))

    def test_slice_index_changes_output(self, random_noise_store):
        model = UNetModel(random_noise_store)
        x = np.random.default_rng(14).standard_normal((1, 2, 32, 32)).astype(np.float32)
        a = model.forward(x, timestep=[50], slice_index=[2], num_views=[20])
        b = model.forward(x, timestep=[50], slice_index=[40], num_views=[20])
        assert np.abs(a - b).max() > 0.0

    def test_num_views_changes_output(self, random_noise_store):
        model = UNetModel(random_noise_store)
        x = np.random.default_rng(15).standard_normal((1, 2, 32, 32)).astype(np.float32)
        a = model.forward(x, timestep=[50], slice_index=[2], num_views=[10])
        b = model.forward(x, timestep=[50], slice_index=[2], num_views=[45])
        assert np.abs(a - b).max() > 0.0

    def test_drop_condition_ignores_slice(self, random_noise_store):
        model = UNetModel(random_noise_store)
        x = np.random.default_rng(16).standard_normal((1, 2, 32, 32)).astype(np.float32)
        a = model.forward(x, timestep=[50], slice_index=[2], num_views=[20], drop_condition=True)
        b = model.forward(x, timestep=[50], slice_index=[40], num_views=[10], drop_condition=True)
        assert np.array_equal(a, b)

    def test_input_validation(self, random_noise_store):
        model = UNetModel(random_noise_store)
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 1, 32, 32), np.float32), timestep=[1],
                          slice_index=[0], num_views=[1])
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 2, 30, 30), np.float32), timestep=[1],
                          slice_index=[0], num_views=[1])

    def test_unet_forward_wrapper_modes(self, random_noise_store, random_denoise_store):
        x = np.random.default_rng(17).standard_normal((32, 32)).astype(np.float32)
        fdk = np.random.default_rng(18).standard_normal((32, 32)).astype(np.float32)
        cond = ConditionBundle(fdk_slice=fdk, slice_index=1, num_views=20, timestep=300)
        out = unet_forward(x, cond, random_noise_store, mode="noise-prediction")
        assert out.shape == (32, 32)
        with pytest.raises(ValueError):
            unet_forward(x, cond, random_noise_store, mode="denoise")
        den = unet_forward(fdk, ConditionBundle(fdk_slice=None, slice_index=1, num_views=20),
                           random_denoise_store, mode="denoise")
        assert den.shape == (32, 32)
        no_t = ConditionBundle(fdk_slice=fdk, slice_index=1, num_views=20)
        with pytest.raises(ValueError):
            unet_forward(x, no_t, random_noise_store, mode="noise-prediction")

    def test_denoise_slices_batching(self, random_denoise_store):
        model = UNetModel(random_denoise_store)
        stack = np.random.default_rng(19).standard_normal((5, 32, 32)).astype(np.float32)
        out = denoise_slices(model, stack, np.arange(5), num_views=20, batch=2)
        one = model.forward(stack[3][None, None], slice_index=[3], num_views=20)[0]
        assert out.shape == stack.shape
        assert np.allclose(out[3], one, atol=1e-6)

    def test_condition_bundle_validation(self):
        with pytest.raises(ValueError):
            ConditionBundle(fdk_slice=None, slice_index=-1, num_views=20)
        with pytest.raises(ValueError):
            ConditionBundle(fdk_slice=None, slice_index=0, num_views=0)
