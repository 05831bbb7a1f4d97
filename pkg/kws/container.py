"""Single-file containers for models and feature maps.

Layout::

    b"TENET1" | u32 LE header length | UTF-8 JSON header | payload

The header names the variant, its depthwise kind, stride pattern, width,
batch-norm epsilon and a tensor manifest (name, shape, dtype, byte offset).
The payload is every tensor as little-endian float32, concatenated in
manifest order with no gaps. Feature maps use the same layout with kind
"features" and a single tensor named "mfcc".
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from .errors import BadMagicError, ContainerError, ShapeMismatchError, TruncatedPayloadError, UsageError
from .model import VARIANTS, DepthwiseKind, Model, ModelSpec, custom_spec, param_shapes
from .tensor import FeatureMap

MAGIC = b"TENET1"
PAYLOAD_DTYPE = "<f4"
MAX_HEADER_BYTES = 1 << 24
_LEN = struct.Struct("<I")


def write_atomic(path: Union[str, Path], data: bytes) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(p)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _pack(header: Dict[str, Any], tensors: List[Tuple[str, np.ndarray]]) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header, tensors=manifest)
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + b"".join(chunks)


def _unpack(data: bytes, path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    ctx = {"path": path}
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a TENET1 container (bad magic)", ctx)
    start = len(MAGIC) + _LEN.size
    if len(data) < start:
        raise TruncatedPayloadError(f"{path}: file ends inside the header length", ctx)
    (head_len,) = _LEN.unpack_from(data, len(MAGIC))
    if head_len > MAX_HEADER_BYTES:
        raise ContainerError(f"{path}: header length {head_len} exceeds {MAX_HEADER_BYTES}", ctx)
    if len(data) < start + head_len:
        raise TruncatedPayloadError(f"{path}: file ends inside the header", ctx)
    try:
        header = json.loads(data[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header: {e}", ctx) from e

    payload = memoryview(data)[start + head_len :]
    tensors: Dict[str, np.ndarray] = {}
    expected = 0
    try:
        entries = header["tensors"]
        for entry in entries:
            shape = tuple(int(s) for s in entry["shape"])
            if entry.get("dtype") != "float32":
                raise ContainerError(f"{path}: tensor {entry['name']} has unsupported dtype {entry.get('dtype')}", ctx)
            if int(entry["offset"]) != expected:
                raise ContainerError(f"{path}: tensor {entry['name']} is not packed at offset {expected}", ctx)
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if expected + size > len(payload):
                raise TruncatedPayloadError(
                    f"{path}: truncated payload, tensor {entry['name']} needs bytes {expected}..{expected + size}"
                    f" but only {len(payload)} present",
                    ctx,
                )
            arr = np.frombuffer(payload[expected : expected + size], dtype=PAYLOAD_DTYPE).reshape(shape)
            tensors[entry["name"]] = arr.astype(np.float32)
            expected += size
    except (KeyError, TypeError, ValueError) as e:
        raise ContainerError(f"{path}: malformed tensor manifest: {e}", ctx) from e
    if len(payload) != expected:
        raise ContainerError(f"{path}: {len(payload) - expected} trailing byte(s) after the payload", ctx)
    return header, tensors


def _read(path: Union[str, Path]) -> bytes:
    p = Path(path)
    try:
        return p.read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read {p}: {e.strerror or e}", {"path": str(p)}) from e


# ---------------------------------------------------------------------------
# models


def model_header(spec: ModelSpec) -> Dict[str, Any]:
    kind = spec.depthwise
    return {
        "kind": "model",
        "variant": spec.name,
        "depthwise": {"mode": kind.mode, "sizes": list(kind.sizes)},
        "strides": list(spec.strides),
        "width": spec.width,
        "input_channels": spec.input_channels,
        "epsilon": spec.epsilon,
    }


def model_bytes(model: Model) -> bytes:
    kinds = {b.depthwise for b in model.spec.blocks}
    if len(kinds) > 1:
        raise ContainerError("blocks with different depthwise kinds cannot be stored")
    names = list(param_shapes(model.spec))
    return _pack(model_header(model.spec), [(n, model.params[n]) for n in names])


def save_model(model: Model, path: Union[str, Path]) -> None:
    write_atomic(path, model_bytes(model))
    logging.info("saved %s (%s) to %s", model.spec.name, model.spec.depthwise, path)


def spec_from_header(header: Dict[str, Any], path: str = "<memory>") -> ModelSpec:
    ctx = {"path": path}
    if header.get("kind") != "model":
        raise ContainerError(f"{path}: container holds '{header.get('kind')}', not a model", ctx)
    try:
        dw = header["depthwise"]
        kind = DepthwiseKind(dw["mode"], tuple(int(s) for s in dw["sizes"]))
        name = str(header["variant"])
        width = int(header["width"])
        strides = tuple(int(s) for s in header["strides"])
        spec = custom_spec(name, width, strides, kind, int(header["input_channels"]), float(header["epsilon"]))
    except (KeyError, TypeError, ValueError, UsageError) as e:
        raise ContainerError(f"{path}: invalid model header: {e}", ctx) from e
    if name in VARIANTS and VARIANTS[name] != (width, strides):
        raise ShapeMismatchError(
            f"{path}: header width/strides do not match variant {name}",
            dict(ctx, variant=name, width=width, strides=list(strides)),
        )
    return spec


def load_model(path: Union[str, Path]) -> Model:
    p = str(path)
    header, tensors = _unpack(_read(path), p)
    spec = spec_from_header(header, p)
    expected = param_shapes(spec)
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    if missing or extra:
        raise ShapeMismatchError(
            f"{p}: tensor set does not match {spec.name} ({spec.depthwise})",
            {"path": p, "missing": missing[:10], "unexpected": extra[:10]},
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeMismatchError(
                f"{p}: tensor {name} has shape {tensors[name].shape}, variant expects {shape}",
                {"path": p, "tensor": name},
            )
    return Model(spec, {n: tensors[n] for n in expected})


def manifest(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """The tensor manifest of a container, without decoding the payload."""
    header, _ = _unpack(_read(path), str(path))
    return header["tensors"]


# ---------------------------------------------------------------------------
# features


def save_features(features: FeatureMap, path: Union[str, Path]) -> None:
    header = {"kind": "features", "frames": features.frames, "channels": features.channels}
    write_atomic(path, _pack(header, [("mfcc", features.data)]))


def load_features(path: Union[str, Path]) -> FeatureMap:
    p = str(path)
    header, tensors = _unpack(_read(path), p)
    if header.get("kind") != "features" or "mfcc" not in tensors:
        raise ContainerError(f"{p}: not a feature container", {"path": p})
    data = tensors["mfcc"]
    if data.ndim != 3 or data.shape[1] != 1:
        raise ShapeMismatchError(f"{p}: feature tensor must be T x 1 x C, got {data.shape}", {"path": p})
    return FeatureMap(data)
