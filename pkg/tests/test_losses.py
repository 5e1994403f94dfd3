import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protomark.core import ShapeError
from protomark.losses import loss_align, loss_mine, loss_reg, loss_total

T = torch.tensor

pytestmark = pytest.mark.usefixtures("float64")


def loop_reg(s, h):
    k_, H, W = s.shape
    tot = 0.0
    for k in range(k_):
        for i in range(H):
            for j in range(W):
                tot += (s[k, i, j] - h[k, i, j]) ** 2
    return tot / k_


def loop_align(ps):
    pairs = list(itertools.combinations(range(len(ps)), 2))
    tot = 0.0
    for m, n in pairs:
        k_, d = ps[m].shape
        acc = 0.0
        for k in range(k_):
            for c in range(d):
                acc += (ps[m][k, c] - ps[n][k, c]) ** 2
        tot += acc / k_
    return tot / len(pairs)


def loop_mine(ph, p):
    return sum((ph[k, c] - p[k, c]) ** 2 for k in range(p.shape[0]) for c in range(p.shape[1]))


def test_reg_basics():
    h = torch.rand(3, 4, 4)
    assert loss_reg(h.clone(), h) == 0
    assert float(loss_reg(T([[[0.0, 0.0]]]), T([[[1.0, 0.0]]]))) == 1.0
    with pytest.raises(ShapeError):
        loss_reg(torch.zeros(2, 3, 3), torch.zeros(3, 3, 3))


def test_reg_against_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, h = rng.normal(size=(3, 4, 5)), rng.uniform(size=(3, 4, 5))
        assert float(loss_reg(T(s), T(h))) == pytest.approx(loop_reg(s, h), abs=1e-12, rel=1e-13)


def test_reg_batch_is_mean_of_images():
    s, h = torch.randn(4, 3, 5, 5), torch.rand(4, 3, 5, 5)
    per = [float(loss_reg(s[b], h[b])) for b in range(4)]
    assert float(loss_reg(s, h)) == pytest.approx(np.mean(per), rel=1e-13)


def test_align_basics():
    p = torch.randn(3, 4)
    assert loss_align([p, p.clone()]) == 0
    assert float(loss_align([T([[0.0]]), T([[2.0]])])) == 4.0
    with pytest.raises(ValueError):
        loss_align([p])
    with pytest.raises(ShapeError):
        loss_align([p, torch.randn(3, 5)])


def test_align_against_pair_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ps = [rng.normal(size=(3, 2)) for _ in range(4)]
        got = float(loss_align(torch.stack([T(p) for p in ps])))
        assert got == pytest.approx(loop_align(ps), abs=1e-12, rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_align_permutation_invariant_and_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    ps = torch.randn(5, 3, 2, generator=g)
    perm = torch.randperm(5, generator=g)
    torch.testing.assert_close(loss_align(ps[perm]), loss_align(ps), rtol=1e-12, atol=1e-14)
    torch.testing.assert_close(loss_align(ps[[1, 0]]), loss_align(ps[[0, 1]]))


def test_mine_basics():
    p = torch.randn(3, 4)
    assert loss_mine(p.clone(), p) == 0
    assert float(loss_mine(T([[0.0], [0.0]]), T([[1.0], [2.0]]))) == 5.0
    assert float(loss_mine(T([[0.0], [0.0]]), T([[1.0], [2.0]]), indices=[1])) == 4.0


def test_mine_against_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        ph, p = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert float(loss_mine(T(ph), T(p))) == pytest.approx(loop_mine(ph, p), abs=1e-12, rel=1e-13)


def test_mine_target_side_has_zero_gradient():
    p = torch.randn(4, 3, requires_grad=True)
    ph = torch.randn(4, 3, requires_grad=True)
    loss_mine(ph, p).backward()
    assert p.grad is None or torch.all(p.grad == 0)
    torch.testing.assert_close(ph.grad, 2 * (ph - p).detach())


def test_total_combination():
    b = loss_total(1.0, 1.0, 1.0, 1.0, 3.0)
    assert b.total == 5.0
    assert loss_total(2.0, 7.0, 9.0, 0.0, 0.0).total == 2.0
    assert loss_total(0.0, 0.0, 0.0).total == 0.0
    with pytest.raises(ValueError):
        loss_total(1, 1, 1, -1, 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 100), st.floats(0, 10), st.floats(0, 10))
def test_total_invariant(reg, align, mine, l1, l2):
    b = loss_total(reg, align, mine, l1, l2)
    assert abs(b.total - (reg + l1 * align + l2 * mine)) <= 1e-9
    assert b.total >= 0
