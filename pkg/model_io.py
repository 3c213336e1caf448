#!/usr/bin/env python3
"""
VPRQ model container.

Layout (little-endian):
    "VPRQ" | u32 version | u64 manifest length | manifest | pad | blobs

The manifest is UTF-8 JSON lines: one model header line, then one line per
layer naming its kind, attributes and, per weight role, the dtype code,
shape and blob offset/length. Quantized layers also reference an f32
per-channel scale blob. Blob offsets are relative to the blob section, which
starts at the first 64-byte boundary after the manifest; every blob is
64-byte aligned.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from errors import BadMagicError, ContainerError, TruncatedBlobError, VersionMismatchError
from models import LayerQuant, LayerSpec, ModelGraph, PrecisionConfig, QuantizedModel, QuantParams, Tensor
from tensor_core import payload_size, tensor_from_bytes, tensor_to_bytes
from utils import DType, Granularity, LayerKind

logger = logging.getLogger(__name__)

VPRQ_MAGIC = b"VPRQ"
VPRQ_VERSION = 1
BLOB_ALIGN = 64
_HEADER = struct.Struct("<4sIQ")

Model = Union[ModelGraph, QuantizedModel]


def _pad(size: int) -> int:
    return (-size) % BLOB_ALIGN


class _BlobSection:
    def __init__(self):
        self.chunks: List[bytes] = []
        self.size = 0

    def add(self, payload: bytes) -> Dict[str, int]:
        pad = _pad(self.size)
        if pad:
            self.chunks.append(b"\0" * pad)
            self.size += pad
        offset = self.size
        self.chunks.append(payload)
        self.size += len(payload)
        return {'offset': offset, 'length': len(payload)}


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(',', ':'))


def serialize_model(model: Model) -> bytes:
    """Deterministic VPRQ bytes of an f32 or quantized model"""
    quantized = isinstance(model, QuantizedModel)
    graph = model.graph if quantized else model
    blobs = _BlobSection()

    header = {
        'arch': graph.arch,
        'descriptor_dim': graph.descriptor_dim,
        'input_shape': list(graph.input_shape),
        'metadata': graph.metadata,
        'num_layers': len(graph.layers),
        'quantized': quantized,
        'precisions': list(model.config.bits) if quantized else None,
        'method': model.method if quantized else None,
    }
    lines = [_dumps(header)]

    for layer in graph.layers:
        params = {}
        for role, key in sorted(layer.params.items()):
            tensor = graph.weights[key]
            params[role] = dict(blobs.add(tensor_to_bytes(tensor)), key=key,
                                dtype=tensor.dtype.value, shape=list(tensor.shape))
        quant = None
        lq = model.layer_quant.get(layer.index) if quantized else None
        if lq is not None:
            quant = {'precision': lq.precision, 'act_scale': lq.act_scale, 'scale': None, 'granularity': None}
            if lq.weight_params is not None:
                scale = lq.weight_params.scale.astype('<f4')
                quant['scale'] = dict(blobs.add(scale.tobytes()), count=int(scale.size))
                quant['granularity'] = lq.weight_params.granularity.value
        lines.append(_dumps({
            'index': layer.index,
            'kind': layer.kind.value,
            'attrs': layer.attrs,
            'params': params,
            'quant': quant,
        }))

    manifest = ("\n".join(lines) + "\n").encode('utf-8')
    head = _HEADER.pack(VPRQ_MAGIC, VPRQ_VERSION, len(manifest)) + manifest
    return head + b"\0" * _pad(len(head)) + b"".join(blobs.chunks)


def save_model(model: Model, path: Union[str, Path]) -> int:
    data = serialize_model(model)
    Path(path).write_bytes(data)
    logger.info("Wrote %s (%d bytes)", path, len(data))
    return len(data)


def _blob(section: bytes, ref: Dict[str, int], what: str, path) -> bytes:
    offset, length = int(ref['offset']), int(ref['length'])
    if offset + length > len(section):
        raise TruncatedBlobError(what, offset + length, len(section), path)
    return section[offset:offset + length]


def deserialize_model(data: bytes, path=None) -> Model:
    if len(data) < 4:
        raise TruncatedBlobError("VPRQ header", _HEADER.size, len(data), path)
    if data[:4] != VPRQ_MAGIC:
        raise BadMagicError(VPRQ_MAGIC, data[:4], path)
    if len(data) < _HEADER.size:
        raise TruncatedBlobError("VPRQ header", _HEADER.size, len(data), path)
    _, version, manifest_len = _HEADER.unpack_from(data)
    if version != VPRQ_VERSION:
        raise VersionMismatchError(VPRQ_VERSION, version, path)
    manifest_end = _HEADER.size + manifest_len
    if manifest_end > len(data):
        raise TruncatedBlobError("VPRQ manifest", manifest_end, len(data), path)

    try:
        records = [json.loads(line) for line in data[_HEADER.size:manifest_end].decode('utf-8').splitlines()
                   if line.strip()]
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        where = f" in {path}" if path else ""
        raise ContainerError(f"Malformed VPRQ manifest{where}: {e}") from e
    if not records:
        raise ContainerError("Empty VPRQ manifest" + (f" in {path}" if path else ""))

    section = data[manifest_end + _pad(manifest_end):]
    try:
        return _decode_records(records[0], records[1:], section, path)
    except (KeyError, TypeError, AttributeError, IndexError) as e:
        where = f" in {path}" if path else ""
        raise ContainerError(f"Malformed VPRQ manifest record{where}: missing or invalid field {e}") from e


def _decode_records(header: Dict[str, Any], layer_records: List[Dict[str, Any]], section: bytes, path) -> Model:
    if len(layer_records) != header['num_layers']:
        raise ContainerError(
            f"VPRQ manifest lists {len(layer_records)} layers, header says {header['num_layers']}"
        )

    layers: List[LayerSpec] = []
    weights: Dict[str, Tensor] = {}
    layer_quant: Dict[int, LayerQuant] = {}
    for rec in layer_records:
        index = int(rec['index'])
        roles = {}
        for role, ref in rec['params'].items():
            what = f"layer {index} {role} blob"
            dtype = DType(ref['dtype'])
            payload = _blob(section, ref, what, path)
            if len(payload) != payload_size(dtype, ref['shape']):
                raise ContainerError(f"{what}: length {len(payload)} does not match shape {ref['shape']}")
            weights[ref['key']] = tensor_from_bytes(dtype, ref['shape'], payload)
            roles[role] = ref['key']
        layers.append(LayerSpec(index, LayerKind(rec['kind']), rec['attrs'], roles))

        quant = rec.get('quant')
        if quant is not None:
            params = None
            if quant['scale'] is not None:
                scale = np.frombuffer(_blob(section, quant['scale'], f"layer {index} scale blob", path), '<f4')
                params = QuantParams(bits=quant['precision'], scale=scale.astype(np.float32),
                                     granularity=Granularity(quant['granularity']))
            layer_quant[index] = LayerQuant(precision=quant['precision'], weight_params=params,
                                            act_scale=quant['act_scale'])

    graph = ModelGraph(
        layers=layers,
        weights=weights,
        descriptor_dim=int(header['descriptor_dim']),
        arch=header['arch'],
        input_shape=tuple(header['input_shape']),
        metadata=header.get('metadata') or {},
    )
    if header.get('quantized'):
        return QuantizedModel(graph=graph, layer_quant=layer_quant,
                              config=PrecisionConfig(header['precisions']), method=header['method'])
    return graph


def load_model(path: Union[str, Path]) -> Model:
    model_path = Path(path)
    if not model_path.exists():
        raise FileNotFoundError(f"Model file not found at: {model_path}")
    return deserialize_model(model_path.read_bytes(), path=model_path)


def load_f32_model(path: Union[str, Path]) -> ModelGraph:
    model = load_model(path)
    if isinstance(model, QuantizedModel):
        raise ContainerError(f"{path} holds a quantized model; this command needs an f32 model")
    return model
