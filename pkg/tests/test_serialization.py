import struct

import numpy as np
import pytest

from pfedsam.errors import FormatError
from pfedsam.numerics import Tensor
from pfedsam.serialization import dumps, load, loads, save, serialized_size


def sample_map(rng):
    return {
        "b.bias": rng.normal(size=3),
        "a.weight": rng.normal(size=(2, 4)),
        "scalar": np.array(1.5),
        "c.kernel": rng.normal(size=(1, 2, 3, 3)),
    }


def test_round_trip_is_bitwise(rng, tmp_path):
    params = sample_map(rng)
    n = save(tmp_path / "m.pfsm", params)
    back = load(tmp_path / "m.pfsm")
    assert n == (tmp_path / "m.pfsm").stat().st_size
    assert set(back) == set(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == np.asarray(params[k], dtype=np.float64).tobytes()


def test_order_independent_bytes(rng):
    params = sample_map(rng)
    assert dumps(params) == dumps(dict(reversed(list(params.items()))))


def test_tensor_values_accepted(rng):
    arr = rng.normal(size=(2, 2))
    assert dumps({"w": Tensor(arr)}) == dumps({"w": arr})


def test_size_formula(rng):
    params = sample_map(rng)
    assert serialized_size(params) == len(dumps(params))
    # header 9 + one entry: name_len 2 + "w" 1 + ndim 1 + dims 8 + data 8*6
    assert len(dumps({"w": np.zeros((2, 3))})) == 9 + 2 + 1 + 1 + 8 + 48


def test_empty_map():
    assert loads(dumps({})) == {}


@pytest.mark.parametrize("cut", [2, 7, 12, 20, -1])
def test_truncation_raises_with_offset(rng, cut):
    buf = dumps(sample_map(rng))
    with pytest.raises(FormatError) as err:
        loads(buf[:cut])
    assert err.value.offset is not None and err.value.offset <= len(buf[:cut])


def test_bad_magic_version_trailing(rng):
    buf = dumps(sample_map(rng))
    with pytest.raises(FormatError, match="magic"):
        loads(b"NOPE" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        loads(buf[:4] + struct.pack("<B", 9) + buf[5:])
    with pytest.raises(FormatError, match="trailing"):
        loads(buf + b"\x00")
