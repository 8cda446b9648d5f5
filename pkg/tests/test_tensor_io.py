import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bevsplat.tensor_io import (
    BadMagicError,
    ConfigError,
    RunConfig,
    TensorFormatError,
    TruncatedTensorError,
    UnsupportedDtypeError,
    VersionMismatchError,
    config_from_dict,
    decode_tensor,
    encode_tensor,
    header_length,
    load_config,
    read_tensor,
    write_tensor,
)


def test_single_value_file_is_24_bytes(tmp_path):
    p = tmp_path / "t.bevt"
    write_tensor(np.zeros(1, dtype=np.float32), p)
    raw = p.read_bytes()
    assert len(raw) == 24
    assert raw[:4] == b"BEVT"
    assert raw[4] == 1 and raw[5] == 1 and raw[6] == 1
    assert raw[7:12] == b"\0" * 5


def test_dims_little_endian_u64():
    raw = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert raw[12:20] == bytes([2, 0, 0, 0, 0, 0, 0, 0])
    assert raw[20:28] == bytes([3, 0, 0, 0, 0, 0, 0, 0])
    assert raw[5] == 2
    assert struct.unpack("<6d", raw[28:]) == tuple(range(6))


@pytest.mark.parametrize("rank", [1, 2, 3, 4, 5])
def test_header_length(rank):
    t = np.ones((1,) * rank, dtype=np.float32)
    assert len(encode_tensor(t)) == header_length(rank) + 4 == 12 + 8 * rank + 4


def test_round_trip_100_random(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(100):
        rank = rng.integers(1, 6)
        shape = tuple(rng.integers(1, 5, size=rank))
        dt = np.float32 if i % 2 else np.float64
        t = rng.normal(size=shape).astype(dt)
        p = tmp_path / f"{i}.bevt"
        write_tensor(t, p)
        back = read_tensor(p)
        assert back.shape == t.shape and back.dtype == t.dtype
        assert back.tobytes() == t.tobytes()


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(
        dtype=st.sampled_from([np.float32, np.float64]),
        shape=hnp.array_shapes(min_dims=1, max_dims=5, min_side=1, max_side=4),
        elements=st.floats(allow_nan=True, allow_infinity=True, width=32),
    )
)
def test_round_trip_bit_exact_property(t):
    back = decode_tensor(encode_tensor(t))
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_error_variants():
    good = encode_tensor(np.arange(4, dtype=np.float32))
    with pytest.raises(BadMagicError):
        decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(VersionMismatchError):
        decode_tensor(good[:4] + b"\x02" + good[5:])
    with pytest.raises(TruncatedTensorError):
        decode_tensor(good[:-1])
    with pytest.raises(TruncatedTensorError):
        decode_tensor(good[:15])
    with pytest.raises(UnsupportedDtypeError):
        decode_tensor(good[:5] + b"\x07" + good[6:])
    with pytest.raises(UnsupportedDtypeError):
        encode_tensor(np.arange(3, dtype=np.int32))
    with pytest.raises(TensorFormatError):
        encode_tensor(np.float32(1.0))
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros((2, 0), dtype=np.float32))


def test_io_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.bevt"
    with pytest.raises(OSError, match="nope.bevt"):
        read_tensor(missing)
    with pytest.raises(OSError, match="no_dir"):
        write_tensor(np.ones(1, np.float32), tmp_path / "no_dir" / "x.bevt")


def test_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    cfg = load_config(p)
    assert (cfg.depth.d_min, cfg.depth.d_max, cfg.depth.bins) == (1, 61, 64)
    assert cfg.k == 0.5
    assert (cfg.bev.x_min, cfg.bev.x_max, cfg.bev.y_min, cfg.bev.y_max) == (-50, 50, -50, 50)
    assert cfg.bev.resolution == 200
    assert cfg.scales == (50, 100, 200)
    assert cfg.opacity_threshold == 0.01
    assert cfg.fuse_mode == "sum"
    assert load_config(None) == cfg


def test_config_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"k": 2.0}))
    assert load_config(p) == RunConfig().with_updates(k=2.0)


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"depth": {"bins": 1}}, "bins ≥ 2"),
        ({"depth": {"d_min": 0}}, "depth.d_min"),
        ({"depth": {"d_min": 5, "d_max": 4}}, "depth.d_max"),
        ({"k": 0}, "k"),
        ({"scales": [50, 75]}, "scales"),
        ({"fuse_mode": "max"}, "fuse_mode"),
        ({"opacity_threshold": 1.5}, "opacity_threshold"),
        ({"nonsense": 1}, "nonsense"),
        ({"depth": {"bogus": 1}}, "bogus"),
    ],
)
def test_config_errors_name_field(raw, field):
    with pytest.raises(ConfigError, match=field):
        config_from_dict(raw)


def test_malformed_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(p)
