import math

import numpy as np
import pytest

from pfedsam.numerics import Tensor
from pfedsam.optim import Adam
from pfedsam.rng import ALGORITHM, stream


def test_stream_is_pcg64_and_reproducible():
    g = stream(3, "batches", "c0", 1)
    assert ALGORITHM == "PCG64" and isinstance(g.bit_generator, np.random.PCG64)
    assert np.array_equal(g.random(5), stream(3, "batches", "c0", 1).random(5))


def test_streams_differ_by_label_and_seed():
    base = stream(3, "a", 1).random(4)
    assert not np.array_equal(base, stream(3, "a", 2).random(4))
    assert not np.array_equal(base, stream(4, "a", 1).random(4))
    assert not np.array_equal(stream(0, "ab").random(4), stream(0, "a", "b").random(4))


def test_stream_independent_of_other_draws():
    first = stream(1, "x").random(3)
    stream(1, "y").random(1000)
    assert np.array_equal(first, stream(1, "x").random(3))


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        stream(-1, "x")


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 0.5]))
    Adam({"p": p}, lr=0.1).step({"p": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], atol=1e-6)


def test_adam_two_steps_match_scalar_formula():
    p = Tensor(np.array([0.0]))
    opt = Adam({"p": p}, lr=0.01)
    m = v = 0.0
    x = 0.0
    for t, g in enumerate([1.0, -0.5], start=1):
        opt.step({"p": np.array([g])})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p.data[0] == pytest.approx(x, abs=1e-15)


def test_adam_skips_missing_and_does_not_mutate_shared_array():
    shared = np.ones(2)
    a, b = Tensor(shared), Tensor(np.zeros(2))
    Adam({"a": a, "b": b}, lr=0.1).step({"a": np.ones(2), "other": np.ones(2)})
    assert np.array_equal(shared, np.ones(2)) and a.data is not shared
    assert np.array_equal(b.data, np.zeros(2))
    with pytest.raises(ValueError):
        Adam({}, lr=-1.0)
