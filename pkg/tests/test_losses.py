import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from pfedsam import numerics as nm
from pfedsam.errors import ShapeError, ValidationError
from pfedsam.losses import LossWeights, ce_loss, kd_loss, personalized_loss
from pfedsam.numerics import Tensor, backward


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def ce_oracle(z, y):
    total = 0.0
    for zi, yi in zip(z.ravel(), y.ravel()):
        total += -(yi * math.log(sig(zi)) + (1 - yi) * math.log(1 - sig(zi)))
    return total / z.size


def kd_oracle(zs, zt, tau):
    total = 0.0
    for a, b in zip(zs.ravel(), zt.ravel()):
        pt, ps = sig(b / tau), sig(a / tau)
        total += pt * math.log(ps) + (1 - pt) * math.log(1 - ps)
    return -(tau**2) / zs.size * total


def binary_entropy(p):
    p = np.clip(p, 1e-300, 1.0)
    q = np.clip(1 - p, 1e-300, 1.0)
    return -(p * np.log(p) + q * np.log(q))


# ---------------------------------------------------------------- CE


def test_ce_saturated_correct():
    assert ce_loss(np.full((4, 4), 20.0), np.ones((4, 4))).item() < 1e-8


@pytest.mark.parametrize("seed", [0, 1])
def test_ce_zero_logits_is_ln2(seed):
    y = (np.random.default_rng(seed).uniform(size=(3, 3)) > 0.5).astype(float)
    assert ce_loss(np.zeros((3, 3)), y).item() == pytest.approx(math.log(2), abs=1e-15)


def test_ce_loop_oracle(rng):
    z = rng.normal(scale=3, size=(2, 5, 5))
    y = (rng.uniform(size=z.shape) > 0.4).astype(float)
    assert abs(ce_loss(z, y).item() - ce_oracle(z, y)) <= 1e-12


def test_ce_rejects_non_binary_and_shape():
    with pytest.raises(ValidationError):
        ce_loss(np.zeros(3), np.array([0.0, 0.5, 1.0]))
    with pytest.raises(ShapeError):
        ce_loss(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------- KD


def test_kd_scalar_hand_case():
    got = kd_loss(np.zeros((1, 1)), np.zeros((1, 1)), 0.5).item()
    expected = -0.25 * (0.5 * math.log(0.5) + 0.5 * math.log(0.5))
    assert got == pytest.approx(0.25 * math.log(2), abs=1e-15)
    assert got == pytest.approx(expected, abs=1e-15)
    assert got == pytest.approx(0.17329, abs=1e-5)


def test_kd_loop_oracle(rng):
    zs, zt = rng.normal(scale=2, size=(3, 4, 4)), rng.normal(scale=2, size=(3, 4, 4))
    for tau in (0.5, 1.0, 2.0):
        assert abs(kd_loss(zs, zt, tau).item() - kd_oracle(zs, zt, tau)) <= 1e-10


@pytest.mark.parametrize("z", [30.0, -30.0])
def test_kd_saturated_match_near_zero(z):
    assert kd_loss(np.full((2, 2), z), np.full((2, 2), z), 0.5).item() < 1e-20


def test_kd_limit_sequence_decreases():
    vals = [kd_loss(np.full((1, 1), z), np.full((1, 1), z), 0.5).item() for z in (1.0, 5.0, 10.0, 20.0)]
    assert vals == sorted(vals, reverse=True) and vals[-1] < 1e-15


@pytest.mark.parametrize("zt", [-2.0, -0.3, 0.0, 0.7, 3.1])
def test_kd_minimizer_recovers_teacher(zt):
    res = minimize_scalar(
        lambda zs: kd_loss(np.array([[zs]]), np.array([[zt]]), 0.5).item(),
        bracket=(zt - 1.0, zt + 1.0),
        tol=1e-12,
    )
    assert abs(res.x - zt) <= 1e-6


@settings(max_examples=40)
@given(
    arrays(np.float64, (3, 3), elements=st.floats(-6, 6)),
    arrays(np.float64, (3, 3), elements=st.floats(-6, 6)),
    st.sampled_from([0.25, 0.5, 1.0]),
)
def test_kd_entropy_lower_bound(zs, zt, tau):
    pt = nm._sigmoid(zt / tau)
    bound = tau**2 * binary_entropy(pt).mean()
    assert kd_loss(zs, zt, tau).item() >= bound - 1e-12
    assert kd_loss(zt, zt, tau).item() == pytest.approx(bound, abs=1e-12)


def test_kd_perturbation_increases_loss(rng):
    zt = rng.normal(size=(4, 4))
    at_match = kd_loss(zt, zt, 0.5).item()
    for delta in (1e-3, -1e-2, 0.5):
        assert kd_loss(zt + delta, zt, 0.5).item() > at_match


def test_kd_teacher_receives_no_gradient(rng):
    zs = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="student")
    zt = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="teacher")
    grads = backward(kd_loss(zs, zt, 0.5))
    assert set(grads) == {"student"} and zt.grad is None


def test_kd_rejects_bad_tau():
    with pytest.raises(ValidationError):
        kd_loss(np.zeros(2), np.zeros(2), 0.0)


@settings(max_examples=30)
@given(arrays(np.float64, (2, 4), elements=st.floats(-30, 30)), arrays(np.float64, (2, 4), elements=st.floats(-30, 30)))
def test_losses_nonnegative_and_finite(zs, zt):
    y = (zt > 0).astype(float)
    for v in (ce_loss(zs, y).item(), kd_loss(zs, zt, 0.5).item()):
        assert np.isfinite(v) and v >= 0


# ---------------------------------------------------------------- combined


def test_zero_weights_is_exactly_ce(rng):
    z, y, zt = rng.normal(size=(4, 4)), (rng.uniform(size=(4, 4)) > 0.5).astype(float), rng.normal(size=(4, 4))
    total, parts = personalized_loss(z, y, zt, Tensor(0.7), LossWeights(0.0, 0.0, 0.5))
    assert total.item() == ce_loss(z, y).item()
    assert parts["lmoe"] == pytest.approx(0.7)


def test_default_weights_combination(rng):
    z, y, zt = rng.normal(size=(4, 4)), (rng.uniform(size=(4, 4)) > 0.5).astype(float), rng.normal(size=(4, 4))
    aux = Tensor(1.3)
    total, parts = personalized_loss(z, y, zt, aux)
    a, b, c = parts["ce"], parts["lmoe"], parts["kd"]
    assert (a, b, c) == (ce_loss(z, y).item(), 1.3, kd_loss(z, zt, 0.5).item())
    assert total.item() == pytest.approx(a + 1.5 * b + 0.1 * c, abs=1e-12)


def test_weights_defaults():
    w = LossWeights()
    assert (w.lambda_lmoe, w.lambda_kd, w.tau) == (1.5, 0.1, 0.5)
    with pytest.raises(ValidationError):
        LossWeights(tau=-1.0)
    with pytest.raises(ValidationError):
        LossWeights(lambda_kd=-0.1)


def test_gradient_linearity(rng):
    z0, zt = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    y = (rng.uniform(size=(3, 3)) > 0.5).astype(float)
    g0 = rng.normal(size=4)

    def grads(build):
        z = Tensor(z0, requires_grad=True, name="z")
        g = Tensor(g0, requires_grad=True, name="g")
        aux = nm.tsum(nm.softmax(g) * nm.softmax(g)) * 4.0
        backward(build(z, aux))
        return z.grad, g.grad

    total = grads(lambda z, aux: personalized_loss(z, y, zt, aux)[0])
    ce = grads(lambda z, aux: ce_loss(z, y) + nm.tsum(aux) * 0.0)
    lm = grads(lambda z, aux: aux * 1.5 + nm.tsum(z) * 0.0)
    kd = grads(lambda z, aux: kd_loss(z, zt, 0.5) * 0.1 + nm.tsum(aux) * 0.0)
    for i in range(2):
        np.testing.assert_allclose(total[i], ce[i] + lm[i] + kd[i], atol=1e-10)


def test_no_teacher_no_aux(rng):
    z, y = rng.normal(size=(2, 2)), np.ones((2, 2))
    total, parts = personalized_loss(z, y, None, None)
    assert parts == {"ce": total.item(), "lmoe": 0.0, "kd": 0.0}
