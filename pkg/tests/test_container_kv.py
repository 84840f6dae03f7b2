import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from itcrwkv.container import CorruptFileError, read_container, write_container
from itcrwkv.kvfile import coerce, format_kv, parse_kv, update_dataclass


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
       hnp.arrays(np.int64, hnp.array_shapes(max_dims=2, max_side=5)))
def test_round_trip_bit_exact(tmp_path_factory, a, b):
    path = tmp_path_factory.mktemp("c") / "x.bin"
    write_container(path, "thing", {"a": a, "b/c": b}, {"note": "hi", "k": [1, 2]})
    arrays, meta = read_container(path, "thing")
    assert arrays["a"].tobytes() == a.tobytes() and arrays["a"].shape == a.shape
    assert np.array_equal(arrays["b/c"], b)
    assert meta == {"note": "hi", "k": [1, 2]}


def test_wrong_kind_and_flipped_byte(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, "dataset", {"a": np.arange(4.0)})
    with pytest.raises(CorruptFileError, match="expected 'checkpoint'"):
        read_container(path, "checkpoint")
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CorruptFileError, match="checksum"):
        read_container(path)


def test_not_a_container(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("hello world, definitely not binary")
    with pytest.raises(CorruptFileError, match="magic"):
        read_container(path)


def test_parse_kv_comments_and_errors():
    assert parse_kv("# top\na = 1\n b=two # tail\n\n") == {"a": "1", "b": "two"}
    with pytest.raises(ValueError, match="line 2"):
        parse_kv("a = 1\nbroken\n")
    assert parse_kv(format_kv({"x": 1.5, "y": "z"}, "hdr")) == {"x": "1.5", "y": "z"}


@dataclasses.dataclass
class Cfg:
    lr: float = 0.1
    epochs: int = 3
    flag: bool = False
    name: str = "n"
    limit: float | None = None


def test_update_dataclass_coerces():
    out = update_dataclass(Cfg(), {"lr": "1e-3", "epochs": "7", "flag": "yes", "limit": "2"})
    assert out == Cfg(lr=1e-3, epochs=7, flag=True, limit=2.0)
    with pytest.raises(KeyError):
        update_dataclass(Cfg(), {"nope": "1"})
    with pytest.raises(ValueError):
        coerce("maybe", True)
