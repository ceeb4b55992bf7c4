"""Network container format.

A container is a single file: an 8-byte magic, a little-endian u64 with the
manifest length, the manifest (JSON, utf-8), then the raw parameter blob.
The manifest records version, scalar dtype, the input shape and the layer
list with per-tensor shapes and byte offsets into the blob. Tensors are
serialized row-major, little-endian IEEE-754; offsets are ascending and
non-overlapping and their sizes sum to the blob length, so a round trip is
bit-exact and truncation is detectable.
"""

import json
import struct

import numpy as np

from .errors import ContainerFormatError
from .network import Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU, ResBlockC, network_dtype

MAGIC = b"NETC0001"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class _BlobWriter:
    def __init__(self, dtype):
        self.dtype = dtype
        self.chunks = []
        self.offset = 0

    def add(self, arr):
        data = np.ascontiguousarray(arr, dtype=self.dtype).tobytes()
        rec = {"shape": list(arr.shape), "offset": self.offset}
        self.chunks.append(data)
        self.offset += len(data)
        return rec


def _conv_entry(conv, blob):
    entry = {
        "weight": blob.add(conv.weight),
        "bias": None if conv.bias is None else blob.add(conv.bias),
        "stride": conv.stride,
        "padding": conv.padding,
    }
    return entry


def save_network(net, path):
    dtype_name = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}.get(
        network_dtype(net)
    )
    if dtype_name is None:
        raise ContainerFormatError(f"unsupported parameter dtype {network_dtype(net)}")
    blob = _BlobWriter(_DTYPES[dtype_name])
    layers = []
    for layer in net.layers:
        if isinstance(layer, Linear):
            layers.append(
                {
                    "kind": "linear",
                    "weight": blob.add(layer.weight),
                    "bias": None if layer.bias is None else blob.add(layer.bias),
                }
            )
        elif isinstance(layer, Conv2d):
            layers.append({"kind": "conv2d", **_conv_entry(layer, blob)})
        elif isinstance(layer, ReLU):
            layers.append({"kind": "relu"})
        elif isinstance(layer, MaxPool2d):
            layers.append({"kind": "maxpool2d", "kernel": layer.kernel, "stride": layer.stride})
        elif isinstance(layer, Flatten):
            layers.append({"kind": "flatten"})
        elif isinstance(layer, ResBlockC):
            layers.append(
                {
                    "kind": "resblock_c",
                    "conv1": _conv_entry(layer.conv1, blob),
                    "conv2": _conv_entry(layer.conv2, blob),
                    "conv_skip": _conv_entry(layer.conv_skip, blob),
                }
            )
        else:
            raise ContainerFormatError(f"unknown layer kind {type(layer).__name__}")
    manifest = {
        "version": VERSION,
        "dtype": dtype_name,
        "input_shape": list(net.input_shape),
        "layers": layers,
    }
    doc = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(doc)))
        f.write(doc)
        for chunk in blob.chunks:
            f.write(chunk)


class _BlobReader:
    def __init__(self, blob, dtype, dtype_name):
        self.blob = blob
        self.dtype = dtype
        self.dtype_name = dtype_name
        self.cursor = 0
        self.total = 0

    def read(self, rec, where):
        if rec is None:
            return None
        try:
            shape = tuple(int(s) for s in rec["shape"])
            offset = int(rec["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"malformed tensor record in {where}: {exc}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * self.dtype.itemsize
        if offset < self.cursor:
            raise ContainerFormatError(
                f"tensor offsets overlap or are out of order at {where}"
            )
        if offset + nbytes > len(self.blob):
            raise ContainerFormatError(f"blob is truncated at {where}")
        self.cursor = offset + nbytes
        self.total += nbytes
        arr = np.frombuffer(self.blob, dtype=self.dtype, count=count, offset=offset)
        return arr.reshape(shape).astype(
            np.float32 if self.dtype_name == "f32" else np.float64, copy=True
        )


def _read_conv(entry, blob, where):
    try:
        stride = int(entry["stride"])
        padding = int(entry["padding"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerFormatError(f"malformed conv entry in {where}: {exc}")
    return Conv2d(
        weight=blob.read(entry.get("weight"), where),
        bias=blob.read(entry.get("bias"), where),
        stride=stride,
        padding=padding,
    )


def load_network(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError("not a network container (bad magic)")
    (doc_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    if start + doc_len > len(raw):
        raise ContainerFormatError("manifest is truncated")
    try:
        manifest = json.loads(raw[start : start + doc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"manifest is not valid JSON: {exc}")
    if manifest.get("version") != VERSION:
        raise ContainerFormatError(
            f"unsupported container version {manifest.get('version')!r}"
        )
    dtype_name = manifest.get("dtype")
    if dtype_name not in _DTYPES:
        raise ContainerFormatError(f"unsupported dtype {dtype_name!r}")
    blob = _BlobReader(raw[start + doc_len :], _DTYPES[dtype_name], dtype_name)
    layers = []
    for i, entry in enumerate(manifest.get("layers", [])):
        kind = entry.get("kind")
        where = f"layer {i} ({kind})"
        if kind == "linear":
            layers.append(
                Linear(
                    weight=blob.read(entry.get("weight"), where),
                    bias=blob.read(entry.get("bias"), where),
                )
            )
        elif kind == "conv2d":
            layers.append(_read_conv(entry, blob, where))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool2d":
            layers.append(MaxPool2d(int(entry["kernel"]), int(entry["stride"])))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "resblock_c":
            layers.append(
                ResBlockC(
                    conv1=_read_conv(entry["conv1"], blob, where),
                    conv2=_read_conv(entry["conv2"], blob, where),
                    conv_skip=_read_conv(entry["conv_skip"], blob, where),
                )
            )
        else:
            raise ContainerFormatError(f"unknown layer kind {kind!r} at layer {i}")
    if blob.total != len(blob.blob):
        raise ContainerFormatError(
            f"blob length {len(blob.blob)} does not match declared tensors ({blob.total} bytes)"
        )
    if "input_shape" not in manifest:
        raise ContainerFormatError("manifest is missing input_shape")
    return Network(layers=layers, input_shape=tuple(manifest["input_shape"]))
