#!/usr/bin/env python3
"""
Floating-point reference kernels and the QTNS raw tensor container.

Activations are NCHW; convolution weights are [Cout, Cin/groups, Kh, Kw].
"""

import logging
import struct
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import BadMagicError, ShapeError, TruncatedBlobError, VersionMismatchError
from models import Tensor
from numeric_formats import float32_to_float16_bits
from utils import DType

logger = logging.getLogger(__name__)

QTNS_MAGIC = b"QTNS"
QTNS_VERSION = 1


def check_conv_shapes(x_shape, w_shape, groups: int, bias_len: Optional[int] = None):
    """Validate NCHW input against [Cout, Cin/groups, Kh, Kw] weights"""
    if len(x_shape) != 4:
        raise ShapeError(f"conv input must be 4-D NCHW, got rank {len(x_shape)}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv weight must be 4-D [Cout,Cin/groups,Kh,Kw], got rank {len(w_shape)}")
    if groups < 1:
        raise ShapeError(f"groups must be >= 1, got {groups}")
    cin, cout = x_shape[1], w_shape[0]
    if cin % groups:
        raise ShapeError(f"input channels Cin={cin} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"output channels Cout={cout} not divisible by groups={groups}")
    if w_shape[1] != cin // groups:
        raise ShapeError(
            f"weight dimension 1 (Cin/groups) is {w_shape[1]}, expected {cin // groups}"
        )
    if bias_len is not None and bias_len != cout:
        raise ShapeError(f"bias length {bias_len} does not match Cout={cout}")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[N, C, H, W] -> [N, C, Ho, Wo, Kh, Kw] view of the zero-padded input"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]}"
        )
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def grouped_correlate(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
                      groups: int = 1) -> np.ndarray:
    """Grouped cross-correlation; accumulates in the operands' dtype"""
    n, cin = x.shape[:2]
    cout, cpg, kh, kw = w.shape
    win = _windows(x, kh, kw, stride, padding)
    ho, wo = win.shape[2], win.shape[3]
    win = win.reshape(n, groups, cpg, ho, wo, kh, kw)
    wg = w.reshape(groups, cout // groups, cpg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True)
    return out.reshape(n, cout, ho, wo)


def conv2d_f32(x, weight, bias=None, stride: int = 1, padding: int = 0,
               groups: int = 1) -> np.ndarray:
    """Zero-padded 2-D cross-correlation; groups == Cin == Cout is depthwise"""
    x = np.asarray(x, dtype=np.float32)
    weight = np.asarray(weight, dtype=np.float32)
    bias_len = None if bias is None else int(np.asarray(bias).size)
    check_conv_shapes(x.shape, weight.shape, groups, bias_len)
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")

    out = grouped_correlate(x.astype(np.float64), weight.astype(np.float64),
                            stride, padding, groups)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return out.astype(np.float32)


def batchnorm_f32(x, mu, sigma2, lam, beta, eps: float = 1e-5) -> np.ndarray:
    """y = lambda * (x - mu) / sqrt(sigma2 + eps) + beta, per channel (axis 1)"""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim < 2:
        raise ShapeError(f"batchnorm input needs a channel axis, got rank {x.ndim}")
    channels = x.shape[1]
    vectors = {'mu': mu, 'sigma2': sigma2, 'lambda': lam, 'beta': beta}
    params = {}
    for name, vec in vectors.items():
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size not in (1, channels):
            raise ShapeError(f"batchnorm {name} has length {vec.size}, expected {channels}")
        params[name] = np.broadcast_to(vec, (channels,))
    if np.any(params['sigma2'] < 0):
        raise ValueError("batchnorm variance sigma2 must be >= 0")
    if eps <= 0:
        raise ValueError("batchnorm eps must be > 0")

    bshape = (1, channels) + (1,) * (x.ndim - 2)
    scale = (params['lambda'] / np.sqrt(params['sigma2'] + eps)).reshape(bshape)
    y = scale * (x.astype(np.float64) - params['mu'].reshape(bshape)) + params['beta'].reshape(bshape)
    return y.astype(np.float32)


def cast_f16(x) -> Tensor:
    """f32 -> f16 storage tensor (software RNE, overflow to infinity)"""
    arr = np.asarray(x, dtype=np.float32)
    return Tensor(shape=arr.shape if arr.ndim else (1,), dtype=DType.F16,
                  data=float32_to_float16_bits(arr).reshape(arr.shape if arr.ndim else (1,)))


def cast_f32(t: Tensor) -> np.ndarray:
    """Inverse of cast_f16: widen to f32"""
    if t.dtype is not DType.F16:
        raise ValueError(f"cast_f32 expects an f16 tensor, got {t.dtype.name}")
    return t.values()


# --- QTNS container -------------------------------------------------------

_WIRE_DTYPES = {DType.F32: "<f4", DType.F16: "<u2", DType.I8: "i1", DType.I4PACKED: "u1", DType.I32: "<i4"}


def tensor_to_bytes(tensor: Tensor) -> bytes:
    """Little-endian storage payload of a tensor"""
    return tensor.data.astype(_WIRE_DTYPES[tensor.dtype], copy=False).tobytes()


def storage_shape_for(dtype: DType, shape) -> tuple:
    shape = tuple(int(d) for d in shape)
    if dtype is DType.I4PACKED:
        return shape[:-1] + ((shape[-1] + 1) // 2,)
    return shape


def payload_size(dtype: DType, shape) -> int:
    return int(np.prod(storage_shape_for(dtype, shape), dtype=np.int64)) * np.dtype(_WIRE_DTYPES[dtype]).itemsize


def tensor_from_bytes(dtype: DType, shape, payload: bytes) -> Tensor:
    data = np.frombuffer(payload, dtype=_WIRE_DTYPES[dtype]).reshape(storage_shape_for(dtype, shape))
    return Tensor(shape=tuple(shape), dtype=dtype, data=data)


def write_tensor(stream: BinaryIO, tensor: Tensor) -> None:
    stream.write(QTNS_MAGIC)
    stream.write(struct.pack("<IBB", QTNS_VERSION, tensor.dtype.value, len(tensor.shape)))
    stream.write(struct.pack(f"<{len(tensor.shape)}Q", *tensor.shape))
    stream.write(tensor_to_bytes(tensor))


def _read_exact(stream: BinaryIO, count: int, what: str, path=None) -> bytes:
    buf = stream.read(count)
    if len(buf) != count:
        raise TruncatedBlobError(what, count, len(buf), path)
    return buf


def read_tensor(stream: BinaryIO, path=None) -> Tensor:
    magic = stream.read(4)
    if magic != QTNS_MAGIC:
        if len(magic) < 4:
            raise TruncatedBlobError("QTNS header", 4, len(magic), path)
        raise BadMagicError(QTNS_MAGIC, magic, path)
    version, code, rank = struct.unpack("<IBB", _read_exact(stream, 6, "QTNS header", path))
    if version != QTNS_VERSION:
        raise VersionMismatchError(QTNS_VERSION, version, path)
    try:
        dtype = DType(code)
    except ValueError:
        raise ValueError(f"Unknown QTNS dtype code {code}" + (f" in {path}" if path else ""))
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "QTNS extents", path))
    payload = _read_exact(stream, payload_size(dtype, shape), "QTNS payload", path)
    return tensor_from_bytes(dtype, shape, payload)


def save_tensors(path: Union[str, Path], tensors: List[Tensor]) -> None:
    with open(path, 'wb') as f:
        for t in tensors:
            write_tensor(f, t)


def load_tensors(path: Union[str, Path]) -> List[Tensor]:
    """Read every QTNS record stored back to back in one file"""
    tensors = []
    with open(path, 'rb') as f:
        while _has_more(f):
            tensors.append(read_tensor(f, path))
    return tensors


def _has_more(f: BinaryIO) -> bool:
    pos = f.tell()
    more = bool(f.read(1))
    f.seek(pos)
    return more


def save_tensor(path: Union[str, Path], tensor: Tensor) -> None:
    save_tensors(path, [tensor])


def load_tensor(path: Union[str, Path]) -> Tensor:
    tensors = load_tensors(path)
    if not tensors:
        raise TruncatedBlobError("QTNS header", 4, 0, path)
    return tensors[0]


def iter_tensor_files(directory: Union[str, Path]) -> Iterator[Path]:
    yield from sorted(Path(directory).rglob("*.qtns"))


def load_batch_dir(directory: Union[str, Path], input_shape=None) -> np.ndarray:
    """Stack every QTNS file under `directory` into one f32 NCHW batch"""
    arrays = []
    for path in iter_tensor_files(directory):
        arr = load_tensor(path).values().astype(np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise ShapeError(f"{path}: expected a 3-D or 4-D tensor, got rank {arr.ndim}")
        if input_shape is not None and tuple(arr.shape[1:]) != tuple(input_shape):
            raise ShapeError(f"{path}: sample shape {arr.shape[1:]} != model input {tuple(input_shape)}")
        arrays.append(arr)
    if not arrays:
        raise FileNotFoundError(f"No .qtns tensors found under {directory}")
    logger.debug("Loaded %d tensor files from %s", len(arrays), directory)
    return np.concatenate(arrays, axis=0)
