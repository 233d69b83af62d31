import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scorefuse.fields import (
    FieldDimensionError,
    FieldFormatError,
    FieldTruncatedError,
    Grid,
    NormStats,
    StateTensor,
    denormalize,
    load_field,
    normalize,
    save_field,
)

f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(4, 7), st.integers(4, 7)), elements=f32))
def test_roundtrip_bit_exact(tmp_path_factory, data):
    state = StateTensor.from_array(data.astype(np.float64))
    path = tmp_path_factory.mktemp("fld") / "x.fld"
    save_field(state, path)
    back = load_field(path)
    assert back.channels == state.channels
    assert back.data.astype(np.float32).tobytes() == data.tobytes()


def test_negative_zero_and_unicode_names(tmp_path):
    data = np.zeros((2, 4, 5))
    data[0, 0, 0] = -0.0
    data[1, 3, 4] = 1e-40  # float32 subnormal
    state = StateTensor.from_array(data, ["t2m", "vent_é"])
    save_field(state, tmp_path / "a.fld")
    back = load_field(tmp_path / "a.fld")
    assert np.signbit(back.data[0, 0, 0])
    assert back.channels == ("t2m", "vent_é")
    assert back.data[1, 3, 4] == np.float64(np.float32(1e-40))


def _valid_bytes(tmp_path):
    save_field(StateTensor.from_array(np.ones((1, 4, 4)), ["a"]), tmp_path / "v.fld")
    return (tmp_path / "v.fld").read_bytes()


def test_bad_magic(tmp_path):
    buf = _valid_bytes(tmp_path)
    (tmp_path / "b.fld").write_bytes(b"FLD2" + buf[4:])
    with pytest.raises(FieldFormatError):
        load_field(tmp_path / "b.fld")


def test_truncated_payload(tmp_path):
    buf = _valid_bytes(tmp_path)
    (tmp_path / "t.fld").write_bytes(buf[:-3])
    with pytest.raises(FieldTruncatedError):
        load_field(tmp_path / "t.fld")


def test_trailing_bytes_rejected(tmp_path):
    buf = _valid_bytes(tmp_path)
    (tmp_path / "t.fld").write_bytes(buf + b"\0\0\0\0")
    with pytest.raises(FieldDimensionError):
        load_field(tmp_path / "t.fld")


@pytest.mark.parametrize("dims", [(0, 4, 4), (1, 3, 4), (1, 4, 2)])
def test_bad_dimensions(tmp_path, dims):
    (tmp_path / "d.fld").write_bytes(b"FLD1" + struct.pack("<III", *dims) + b"\0" * 64)
    with pytest.raises(FieldDimensionError):
        load_field(tmp_path / "d.fld")


def test_grid_minimum_size():
    with pytest.raises(FieldDimensionError):
        Grid(3, 8)


def test_state_rejects_nonfinite_and_duplicates():
    with pytest.raises(ValueError):
        StateTensor.from_array(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        StateTensor.from_array(np.zeros((2, 4, 4)), ["a", "a"])


def test_unknown_channel_is_keyerror():
    s = StateTensor.from_array(np.zeros((1, 4, 4)), ["a"])
    with pytest.raises(KeyError):
        s.channel_index("b")


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 20), st.integers(0, 2**31))
def test_normalize_roundtrip_and_moments(mu, sd, seed):
    rng = np.random.default_rng(seed)
    states = [StateTensor.from_array(mu + sd * rng.standard_normal((2, 6, 8)), ["a", "b"]) for _ in range(3)]
    stats = NormStats.from_states(states)
    z = np.stack([normalize(s, stats).data for s in states])
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1.0, rtol=1e-10)
    back = denormalize(normalize(states[0], stats), stats)
    np.testing.assert_allclose(back.data, states[0].data, rtol=1e-12, atol=1e-12)


def test_normalize_missing_channel():
    stats = NormStats({"a": 0.0}, {"a": 1.0})
    with pytest.raises(KeyError):
        normalize(StateTensor.from_array(np.zeros((1, 4, 4)), ["b"]), stats)


def test_zero_std_rejected():
    with pytest.raises(ValueError):
        NormStats({"a": 0.0}, {"a": 0.0})
