from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sona.archive import FormatError, decode_archive, encode_archive, load_archive, save_archive

names = st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=40)
tensors = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
    elements=st.floats(width=32, allow_nan=False),
)
entry_sets = st.dictionaries(names, st.one_of(tensors, st.text(max_size=50)), max_size=6)


@given(entry_sets)
def test_round_trip_is_bit_exact(entries):
    back = decode_archive(encode_archive(entries))
    assert list(back) == list(entries)
    for k, v in entries.items():
        if isinstance(v, str):
            assert back[k] == v
        else:
            assert back[k].dtype == np.float32 and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()


def test_empty_archive(tmp_path):
    save_archive({}, tmp_path / "e.sona")
    assert (tmp_path / "e.sona").read_bytes() == b"SONA" + struct.pack("<II", 1, 0)
    assert load_archive(tmp_path / "e.sona") == {}


def test_layout_matches_documented_bytes():
    buf = encode_archive({"w": np.array([[1.0, 2.0]], dtype=np.float32), "m": "hi"})
    expected = (
        b"SONA" + struct.pack("<II", 1, 2)
        + struct.pack("<B", 1) + b"w" + struct.pack("<BB", 0, 2) + struct.pack("<II", 1, 2) + struct.pack("<2f", 1.0, 2.0)
        + struct.pack("<B", 1) + b"m" + struct.pack("<BI", 1, 2) + b"hi"
    )
    assert buf == expected


def _header_offsets(entries):
    # global header plus each tensor entry's name length, kind, ndim and dims bytes
    buf = encode_archive(entries)
    offs = list(range(12))
    pos = 12
    for name, v in entries.items():
        offs.append(pos)
        pos += 1 + len(name)
        offs.append(pos)
        arr = np.asarray(v, dtype=np.float32)
        offs.extend(range(pos + 1, pos + 2 + 4 * arr.ndim))
        pos += 2 + 4 * arr.ndim + arr.nbytes
    assert pos == len(buf)
    return buf, offs


def test_any_single_header_byte_corruption_is_detected():
    entries = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(4, dtype=np.float32)}
    buf, offs = _header_offsets(entries)
    for off in offs:
        for val in range(256):
            if val == buf[off]:
                continue
            bad = bytearray(buf)
            bad[off] = val
            try:
                got = decode_archive(bytes(bad))
            except FormatError:
                continue
            # a corrupted name byte can still parse, but never into a wrong tensor
            for k, v in got.items():
                assert k not in entries or np.array_equal(v, entries[k]), (off, val)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b"XONA" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_format_errors_name_offset(mutate, match, tmp_path):
    buf = encode_archive({"x": np.zeros(3, dtype=np.float32)})
    p = tmp_path / "bad.sona"
    p.write_bytes(mutate(buf))
    with pytest.raises(FormatError, match=match) as err:
        load_archive(p)
    assert "offset" in str(err.value) and str(p) in str(err.value)


def test_duplicate_name_rejected():
    one = encode_archive({"x": "a"})
    body = one[12:]
    buf = b"SONA" + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(FormatError, match="duplicate"):
        decode_archive(buf)


@pytest.mark.parametrize("bad", ["", "é", "x" * 256])
def test_invalid_names_rejected_on_write(bad):
    with pytest.raises(ValueError):
        encode_archive({bad: "v"})


def test_save_is_atomic_on_failure(tmp_path):
    p = tmp_path / "a.sona"
    save_archive({"x": "old"}, p)
    with pytest.raises(ValueError):
        save_archive({"é": "new"}, p)
    assert load_archive(p) == {"x": "old"}
    assert [f.name for f in tmp_path.iterdir()] == ["a.sona"]
