import math

import numpy as np
import pytest
import torch

from imems import losses as L
from imems.embedding import LabelRangeError, ShapeError

from gradcheck import analytic_grad, max_rel_error, numeric_grad

T = torch.tensor


def test_l1_examples():
    x = torch.rand(2, 3, 4, 4)
    assert float(L.l1_loss(x, x)) == 0.0
    assert float(L.l1_loss(x + 0.5, x)) == pytest.approx(0.5, abs=1e-6)
    # (0.2 + 0.4) / 2
    a = T([0.2, 0.8], dtype=torch.float64).reshape(1, 2, 1, 1)
    b = T([0.0, 0.4], dtype=torch.float64).reshape(1, 2, 1, 1)
    assert float(L.l1_loss(a, b)) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(ShapeError):
        L.l1_loss(a, torch.zeros(1, 3, 1, 1))


def test_adversarial_examples():
    half = torch.full((1, 1, 4, 4), 0.5, dtype=torch.float64)
    d_loss, g_adv = L.adversarial_losses(half, half)
    assert float(d_loss) == pytest.approx(math.log(2), abs=1e-12)
    assert float(g_adv) == pytest.approx(math.log(2), abs=1e-12)

    d_loss, _ = L.adversarial_losses(torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2))
    assert float(d_loss) < 1e-6
    _, g_adv = L.adversarial_losses(torch.ones(1, 1, 2, 2), torch.ones(1, 1, 2, 2))
    assert float(g_adv) < 1e-6
    with pytest.raises(L.NumericDomainError):
        L.adversarial_losses(torch.full((1, 1, 2, 2), 1.5), half)
    with pytest.raises(L.NumericDomainError):
        L.adversarial_losses(half, torch.full((1, 1, 2, 2), -0.1))


def test_seg_loss_examples():
    k = 5
    gt = torch.randint(0, k, (1, 3, 3))
    onehot = torch.nn.functional.one_hot(gt, k).permute(0, 3, 1, 2).double()
    assert float(L.seg_loss(onehot, gt)) == pytest.approx(0.0, abs=1e-12)
    uniform = torch.full((1, k, 3, 3), 1 / k, dtype=torch.float64)
    assert float(L.seg_loss(uniform, gt)) == pytest.approx(math.log(5), abs=1e-12)
    # true-label probabilities 0.5 and 0.25 over two pixels
    probs = T([[0.5, 0.75], [0.5, 0.25]], dtype=torch.float64).reshape(1, 2, 1, 2)
    labels = torch.tensor([[[0, 1]]])
    assert float(L.seg_loss(probs, labels)) == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert (math.log(2) + math.log(4)) / 2 == pytest.approx(1.0397, abs=1e-4)
    with pytest.raises(LabelRangeError):
        L.seg_loss(uniform, torch.full((1, 3, 3), 5))
    with pytest.raises(ShapeError):
        L.seg_loss(uniform, torch.zeros(1, 2, 3, dtype=torch.long))


def test_rec_and_int_examples():
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    assert float(L.rec_loss(x, x)) == 0.0
    assert float(L.rec_loss(x + 0.1, x)) == pytest.approx(0.01, abs=1e-12)
    a = T([0.0, 0.5, 1.0], dtype=torch.float64).reshape(1, 3, 1, 1)
    b = T([0.1, 0.5, 0.8], dtype=torch.float64).reshape(1, 3, 1, 1)
    assert float(L.rec_loss(a, b)) == pytest.approx(0.05 / 3, abs=1e-12)

    maps = [torch.rand(1, 2, 4, 4, dtype=torch.float64), torch.rand(1, 4, 2, 2, dtype=torch.float64)]
    assert float(L.int_loss(maps, maps)) == 0.0
    shifted = [maps[0] + math.sqrt(0.2), maps[1]]
    assert float(L.int_loss(maps, shifted)) == pytest.approx(0.2, abs=1e-12)
    two = [maps[0] + math.sqrt(0.1), maps[1] + math.sqrt(0.3)]
    assert float(L.int_loss(maps, two)) == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(ShapeError):
        L.int_loss(maps, maps[:1])
    with pytest.raises(ShapeError):
        L.int_loss(maps, [maps[1], maps[0]])


def test_joint_loss_reductions():
    v = L.LossValues(seg=0.7, rec=0.3, int_sum=0.9)
    assert L.joint_loss(v, L.LossWeights(lambda_seg=1, lambda_rec=0)) == 0.7
    assert L.joint_loss(v, L.LossWeights(lambda_seg=0.6, lambda_rec=0.4)) == pytest.approx(0.6 * 0.7 + 0.4 * 0.3)
    w = L.LossWeights(lambda_seg=0.6, lambda_rec=0.4, lambda_int=0.8)
    assert L.joint_loss(v, w, include_int=True) == pytest.approx(0.6 * 0.7 + 0.4 * 0.3 + 0.8 * 0.9)
    w0 = L.LossWeights(lambda_seg=0.6, lambda_rec=0.4, lambda_int=0.0)
    assert L.joint_loss(v, w0, include_int=True) == L.joint_loss(v, w0)
    # linear in each weight
    base = L.joint_loss(v, L.LossWeights(lambda_seg=0.3, lambda_rec=0.0))
    assert L.joint_loss(v, L.LossWeights(lambda_seg=0.6, lambda_rec=0.0)) == pytest.approx(2 * base)
    with pytest.raises(ValueError):
        L.LossWeights(lambda_seg=-1)


def test_cgan_objective_lambda_zero_removes_l1():
    g_adv, l1 = torch.tensor(0.37), torch.tensor(123.0)
    assert L.cgan_generator_objective(g_adv, l1, 0.0) is g_adv
    assert float(L.cgan_generator_objective(g_adv, l1, 100.0)) == pytest.approx(0.37 + 12300.0)


# -- gradient checks on 2x2 inputs --------------------------------------------


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def _assert_grads(fn, arrays, tol=1e-3):
    a = analytic_grad(fn, [x.copy() for x in arrays])
    n = numeric_grad(fn, [x.copy() for x in arrays])
    for ai, ni in zip(a, n):
        assert max_rel_error(ai, ni) < tol


def test_grad_l1(rng):
    est = rng.uniform(0, 1, (1, 3, 2, 2))
    # keep every difference well away from the kink at zero
    tgt = est + rng.choice([-1, 1], est.shape) * rng.uniform(0.05, 0.3, est.shape)
    _assert_grads(L.l1_loss, [est, tgt])


def test_grad_seg(rng):
    probs = rng.uniform(0.1, 0.9, (1, 3, 2, 2))
    gt = torch.from_numpy(rng.integers(0, 3, (1, 2, 2)))
    _assert_grads(lambda p: L.seg_loss(p, gt), [probs])


def test_grad_rec(rng):
    _assert_grads(L.rec_loss, [rng.uniform(0, 1, (1, 3, 2, 2)), rng.uniform(0, 1, (1, 3, 2, 2))])


def test_grad_int(rng):
    e = [rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 4, 2, 2))]
    d = [rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 4, 2, 2))]
    _assert_grads(lambda a, b, c, dd: L.int_loss([a, b], [c, dd]), e + d)


def test_grad_bce(rng):
    real = rng.uniform(0.05, 0.95, (1, 1, 2, 2))
    fake = rng.uniform(0.05, 0.95, (1, 1, 2, 2))
    _assert_grads(lambda r, f: L.adversarial_losses(r, f)[0], [real, fake])
    _assert_grads(lambda r, f: L.adversarial_losses(r, f)[1] + 0 * r.sum(), [real, fake])
