import json
import struct

import numpy as np
import pytest

from enorm import (
    Conv2d,
    ContainerFormatError,
    Flatten,
    Linear,
    MaxPool2d,
    Network,
    ReLU,
    ResBlockC,
    fc_network,
    load_network,
    named_parameters,
    network_dtype,
    resnet18_type_c,
    save_network,
)
from enorm.serialize import MAGIC


def _mixed_net(dtype=np.float64):
    rng = np.random.default_rng(0)

    def conv(o, i, k, stride=1, padding=0, bias=False):
        return Conv2d(
            rng.standard_normal((o, i, k, k)).astype(dtype),
            rng.standard_normal(o).astype(dtype) if bias else None,
            stride,
            padding,
        )

    return Network(
        [
            conv(3, 1, 3, padding=1, bias=True),
            ReLU(),
            ResBlockC(conv(4, 3, 3, stride=2, padding=1), conv(4, 4, 3, padding=1), conv(4, 3, 1, stride=2)),
            ReLU(),
            MaxPool2d(2, 2),
            Flatten(),
            Linear(rng.standard_normal((4 * 2 * 2, 2)).astype(dtype), rng.standard_normal(2).astype(dtype)),
        ],
        (1, 8, 8),
    )


def _assert_identical(a, b):
    assert tuple(a.input_shape) == tuple(b.input_shape)
    assert network_dtype(a) == network_dtype(b)
    pa, pb = named_parameters(a), named_parameters(b)
    assert [n for n, _ in pa] == [n for n, _ in pb]
    for (_, x), (_, y) in zip(pa, pb):
        assert x.dtype == y.dtype
        assert np.array_equal(x, y)


class TestRoundTrip:
    def test_fc_bitwise(self, tmp_path):
        net = fc_network([7, 5, 3], seed=1)
        path = tmp_path / "net.nwc"
        save_network(net, path)
        _assert_identical(net, load_network(path))

    def test_mixed_f64(self, tmp_path):
        net = _mixed_net(np.float64)
        path = tmp_path / "net.nwc"
        save_network(net, path)
        loaded = load_network(path)
        _assert_identical(net, loaded)
        assert loaded.layers[2].conv1.stride == 2
        assert loaded.layers[4].kernel == 2

    def test_mixed_f32(self, tmp_path):
        net = _mixed_net(np.float32)
        path = tmp_path / "net.nwc"
        save_network(net, path)
        _assert_identical(net, load_network(path))

    def test_f64_no_precision_loss(self, tmp_path):
        w = np.array([[np.pi, np.e], [1 / 3, np.sqrt(2)]])
        net = Network([Linear(w)], (2,))
        path = tmp_path / "net.nwc"
        save_network(net, path)
        assert np.array_equal(load_network(path).layers[0].weight, w)

    def test_resnet18_round_trips(self, tmp_path):
        net = resnet18_type_c(seed=0, input_hw=32)
        path = tmp_path / "resnet.nwc"
        save_network(net, path)
        _assert_identical(net, load_network(path))


def _tamper(path, out, fn):
    raw = bytearray(open(path, "rb").read())
    doc_len = struct.unpack_from("<Q", raw, len(MAGIC))[0]
    start = len(MAGIC) + 8
    manifest = json.loads(raw[start : start + doc_len].decode())
    blob = raw[start + doc_len :]
    manifest, blob = fn(manifest, blob)
    doc = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(out, "wb") as f:
        f.write(bytes(raw[: len(MAGIC)]))
        f.write(struct.pack("<Q", len(doc)))
        f.write(doc)
        f.write(bytes(blob))


class TestFormatErrors:
    @pytest.fixture
    def saved(self, tmp_path):
        path = tmp_path / "net.nwc"
        save_network(fc_network([3, 4, 2], seed=2), path)
        return path

    def test_bad_magic(self, saved, tmp_path):
        raw = bytearray(open(saved, "rb").read())
        raw[:4] = b"XXXX"
        bad = tmp_path / "bad.nwc"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ContainerFormatError, match="magic"):
            load_network(bad)

    def test_version_mismatch(self, saved, tmp_path):
        bad = tmp_path / "bad.nwc"

        def bump(manifest, blob):
            manifest["version"] = 2
            return manifest, blob

        _tamper(saved, bad, bump)
        with pytest.raises(ContainerFormatError, match="version"):
            load_network(bad)

    def test_truncated_blob(self, saved, tmp_path):
        raw = open(saved, "rb").read()
        bad = tmp_path / "bad.nwc"
        bad.write_bytes(raw[:-8])
        with pytest.raises(ContainerFormatError, match="truncated"):
            load_network(bad)

    def test_blob_longer_than_declared(self, saved, tmp_path):
        bad = tmp_path / "bad.nwc"

        def extend(manifest, blob):
            return manifest, bytes(blob) + b"\0" * 16
        _tamper(saved, bad, extend)
        with pytest.raises(ContainerFormatError, match="blob length"):
            load_network(bad)

    def test_overlapping_offsets(self, saved, tmp_path):
        bad = tmp_path / "bad.nwc"

        def overlap(manifest, blob):
            manifest["layers"][2]["weight"]["offset"] -= 8
            return manifest, blob[:-8]

        _tamper(saved, bad, overlap)
        with pytest.raises(ContainerFormatError, match="overlap|out of order"):
            load_network(bad)

    def test_error_names_offending_layer(self, saved, tmp_path):
        bad = tmp_path / "bad.nwc"

        def truncate(manifest, blob):
            return manifest, blob[:-4]

        _tamper(saved, bad, truncate)
        with pytest.raises(ContainerFormatError, match="layer 2"):
            load_network(bad)

    def test_unknown_dtype(self, saved, tmp_path):
        bad = tmp_path / "bad.nwc"

        def mutate(manifest, blob):
            manifest["dtype"] = "f16"
            return manifest, blob

        _tamper(saved, bad, mutate)
        with pytest.raises(ContainerFormatError, match="dtype"):
            load_network(bad)

    def test_unknown_layer_kind(self, saved, tmp_path):
        bad = tmp_path / "bad.nwc"

        def mutate(manifest, blob):
            manifest["layers"][1]["kind"] = "groupnorm"
            return manifest, blob

        _tamper(saved, bad, mutate)
        with pytest.raises(ContainerFormatError, match="groupnorm"):
            load_network(bad)
