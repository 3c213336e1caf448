"""f32 kernels, f16 casts, int4 packing and the QTNS container."""

import io

import numpy as np
import pytest

from errors import BadMagicError, ShapeError, TruncatedBlobError, VersionMismatchError
from models import Tensor
from numeric_formats import F16_MAX, float16_bits_to_float32, pack_int4, round_to_float16, unpack_int4
from tensor_core import (
    QTNS_MAGIC,
    batchnorm_f32,
    cast_f16,
    cast_f32,
    conv2d_f32,
    load_batch_dir,
    load_tensor,
    load_tensors,
    read_tensor,
    save_tensor,
    save_tensors,
    write_tensor,
)
from utils import DType


def naive_conv(x, w, b, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    per_group = cout // groups
    for ni in range(n):
        for co in range(cout):
            g = co // per_group
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cpg):
                        for a in range(kh):
                            for c in range(kw):
                                acc += xp[ni, g * cpg + ci, i * stride + a, j * stride + c] * w[co, ci, a, c]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


class TestConv2d:

    def test_scalar_scaling(self):
        x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
        out = conv2d_f32(x, np.full((1, 1, 1, 1), 2.0), bias=[0.0])
        np.testing.assert_array_equal(out[0, 0], [[2, 4], [6, 8]])

    def test_all_ones_sum(self):
        out = conv2d_f32(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    @pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 1, 4)])
    def test_matches_nested_loop_oracle(self, rng, stride, padding, groups):
        x = rng.standard_normal((2, 4, 7, 6)).astype(np.float32)
        w = rng.standard_normal((4, 4 // groups, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv2d_f32(x, w, b, stride, padding, groups)
        np.testing.assert_allclose(out, naive_conv(x, w, b, stride, padding, groups), atol=1e-5)

    def test_random_shapes_match_oracle(self):
        for seed in range(200):
            r = np.random.default_rng(seed)
            groups = int(r.choice([1, 2, 4]))
            cin = groups * int(r.integers(1, 3))
            cout = groups * int(r.integers(1, 3))
            kh, kw = (int(v) for v in r.integers(1, 4, size=2))
            stride, padding = int(r.integers(1, 3)), int(r.integers(0, 2))
            h, wd = int(r.integers(kh, 8)), int(r.integers(kw, 8))
            x = r.standard_normal((int(r.integers(1, 3)), cin, h, wd)).astype(np.float32)
            w = r.standard_normal((cout, cin // groups, kh, kw)).astype(np.float32)
            b = r.standard_normal(cout).astype(np.float32) if seed % 2 else None
            out = conv2d_f32(x, w, b, stride, padding, groups)
            np.testing.assert_allclose(out, naive_conv(x, w, b, stride, padding, groups), atol=1e-5,
                                       err_msg=f"seed {seed}")

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ShapeError, match="Cin/groups"):
            conv2d_f32(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))

    def test_rejects_bias_length(self):
        with pytest.raises(ShapeError, match="bias"):
            conv2d_f32(np.zeros((1, 1, 4, 4)), np.zeros((2, 1, 1, 1)), bias=np.zeros(3))


class TestBatchNorm:

    def test_identity_normalization(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
        eps = 1e-5
        out = batchnorm_f32(x, np.zeros(3), np.full(3, 1 - eps), np.ones(3), np.zeros(3), eps)
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_scalar_evaluation(self):
        out = batchnorm_f32(np.full((1, 1), 2.0), [1.0], [1.0], [3.0], [0.5], 1e-5)
        assert out[0, 0] == pytest.approx(3.499985, abs=1e-6)

    def test_constant_input_at_mean_gives_beta(self):
        out = batchnorm_f32(np.full((1, 2, 3, 3), 0.7), [0.7, 0.7], [2.0, 0.5], [1.3, -2.0], [0.25, -0.5])
        np.testing.assert_allclose(out[0, 0], 0.25, atol=1e-6)
        np.testing.assert_allclose(out[0, 1], -0.5, atol=1e-6)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            batchnorm_f32(np.zeros((1, 1)), [0.0], [-1.0], [1.0], [0.0])


class TestFloat16:

    @pytest.mark.parametrize("value,expected", [
        (1.0, 1.0),
        (0.1, 0.0999755859375),
        (65519.0, 65504.0),
        (-2.5, -2.5),
    ])
    def test_known_values(self, value, expected):
        assert float(cast_f32(cast_f16(np.float32(value)))[0]) == expected

    def test_overflow_to_infinity(self):
        assert round_to_float16(np.float32(F16_MAX)) == F16_MAX
        assert np.isinf(round_to_float16(np.float32(65520.0)))
        assert round_to_float16(np.float32(-1e6)) == -np.inf

    def test_round_trip_idempotent(self, rng):
        x = (rng.standard_normal(4096) * 100).astype(np.float32)
        once = round_to_float16(x)
        np.testing.assert_array_equal(round_to_float16(once), once)

    def test_matches_numpy_half(self, rng):
        x = np.concatenate([rng.standard_normal(2000) * 10.0 ** rng.integers(-8, 5, 2000),
                            [0.0, -0.0, 6e-8, 3e-5]]).astype(np.float32)
        np.testing.assert_array_equal(round_to_float16(x), x.astype(np.float16).astype(np.float32))

    def test_subnormal_widening(self):
        assert float16_bits_to_float32(np.uint16(0x0001)) == np.float32(2.0 ** -24)

    def test_cast_f32_rejects_other_dtypes(self):
        with pytest.raises(ValueError):
            cast_f32(Tensor.from_array(np.ones(2)))


class TestInt4Packing:

    def test_low_nibble_first(self):
        packed = pack_int4(np.array([1, -1], dtype=np.int8))
        assert packed.tolist() == [0xF1]

    def test_odd_rows_padded(self):
        values = np.array([[7, -8, 3], [-1, 0, 5]], dtype=np.int8)
        packed = pack_int4(values)
        assert packed.shape == (2, 2)
        np.testing.assert_array_equal(unpack_int4(packed, 3), values)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            pack_int4(np.array([8]))

    def test_tensor_storage(self):
        t = Tensor.from_array(np.array([[1, 2, 3], [4, 5, -6]]), DType.I4PACKED)
        assert t.storage_shape() == (2, 2)
        assert t.nbytes == 4
        np.testing.assert_array_equal(t.values(), [[1, 2, 3], [4, 5, -6]])


class TestQTNS:

    @pytest.mark.parametrize("dtype,values", [
        (DType.F32, np.arange(6, dtype=np.float32).reshape(2, 3) / 7),
        (DType.F16, np.array([0.5, -2.0, 3.25], dtype=np.float32)),
        (DType.I8, np.array([[-127, 0], [5, 127]])),
        (DType.I4PACKED, np.array([[-7, 7, 1]])),
        (DType.I32, np.array([1, -2, 2 ** 30])),
    ])
    def test_write_read(self, dtype, values):
        buf = io.BytesIO()
        write_tensor(buf, Tensor.from_array(values, dtype))
        buf.seek(0)
        t = read_tensor(buf)
        assert t.dtype is dtype
        assert t.shape == values.shape
        np.testing.assert_array_equal(t.values(), Tensor.from_array(values, dtype).values())

    def test_header_layout(self):
        buf = io.BytesIO()
        write_tensor(buf, Tensor.from_array(np.zeros((2, 3), np.float32)))
        data = buf.getvalue()
        assert data[:4] == QTNS_MAGIC
        assert len(data) == 4 + 4 + 1 + 1 + 2 * 8 + 6 * 4

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            read_tensor(io.BytesIO(b"XXXX" + b"\0" * 16))

    def test_version_mismatch(self):
        buf = io.BytesIO()
        write_tensor(buf, Tensor.from_array(np.zeros(1, np.float32)))
        data = bytearray(buf.getvalue())
        data[4] = 9
        with pytest.raises(VersionMismatchError):
            read_tensor(io.BytesIO(bytes(data)))

    def test_truncated_payload(self):
        buf = io.BytesIO()
        write_tensor(buf, Tensor.from_array(np.zeros(16, np.float32)))
        with pytest.raises(TruncatedBlobError):
            read_tensor(io.BytesIO(buf.getvalue()[:-3]))

    def test_multiple_records_in_one_file(self, tmp_path):
        path = tmp_path / "pair.qtns"
        save_tensors(path, [Tensor.from_array(np.ones(3)), Tensor.from_array(np.arange(2), DType.I32)])
        first, second = load_tensors(path)
        assert first.dtype is DType.F32 and second.dtype is DType.I32

    def test_load_batch_dir(self, tmp_path):
        rng = np.random.default_rng(3)
        for i in range(3):
            save_tensor(tmp_path / f"s{i}.qtns", Tensor.from_array(rng.standard_normal((3, 4, 4))))
        batch = load_batch_dir(tmp_path, (3, 4, 4))
        assert batch.shape == (3, 3, 4, 4)
        np.testing.assert_array_equal(batch[1], load_tensor(tmp_path / "s1.qtns").values())

    def test_load_batch_dir_shape_check(self, tmp_path):
        save_tensor(tmp_path / "s.qtns", Tensor.from_array(np.zeros((3, 4, 4))))
        with pytest.raises(ShapeError):
            load_batch_dir(tmp_path, (3, 8, 8))

    def test_load_batch_dir_empty(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_batch_dir(tmp_path)
