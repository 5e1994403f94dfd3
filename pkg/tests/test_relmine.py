import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protomark.core import ShapeError
from protomark.relmine import (
    PositionalEmbedder,
    RelationHead,
    encode_positions,
    mask_count,
    mask_prototypes,
    reconstruct_prototypes,
)

pytestmark = pytest.mark.usefixtures("float64")


def direct_attention(x, wq, bq, wk, bk, wv, bv, wo, bo):
    """Single-head attention written out step by step in numpy."""
    q, k, v = x @ wq.T + bq, x @ wk.T + bk, x @ wv.T + bv
    scores = q @ k.T / math.sqrt(x.shape[1])
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    a = e / e.sum(axis=1, keepdims=True)
    return (a @ v) @ wo.T + bo, a


def test_zero_mlp_gives_zero_embeddings():
    emb = PositionalEmbedder(6)
    for p in emb.parameters():
        torch.nn.init.zeros_(p)
    assert torch.all(encode_positions(emb, torch.rand(4, 2)) == 0)


def test_identical_rows_identical_embeddings():
    emb = PositionalEmbedder(6, hidden=5)
    out = encode_positions(emb, torch.tensor([[0.3, 0.4], [0.3, 0.4], [0.9, 0.1]]))
    assert out.shape == (3, 6)
    assert torch.equal(out[0], out[1])


def test_unnormalized_coordinates_rejected():
    with pytest.raises(ValueError):
        encode_positions(PositionalEmbedder(4), torch.tensor([[1.5, 0.2]]))


def test_mask_ratio_counts():
    rng = np.random.default_rng(0)
    p = torch.randn(10, 4) + 5
    masked, spec = mask_prototypes(p, 0.7, rng)
    assert len(spec.masked_indices) == 7
    zero_rows = [k for k in range(10) if torch.all(masked[k] == 0)]
    assert zero_rows == list(spec.masked_indices)
    for k in set(range(10)) - set(spec.masked_indices):
        assert torch.equal(masked[k], p[k])


def test_mask_ratio_zero_is_identity():
    p = torch.randn(5, 3)
    masked, spec = mask_prototypes(p, 0.0, np.random.default_rng(1))
    assert torch.equal(masked, p) and spec.masked_indices == ()


def test_mask_deterministic_given_seed():
    p = torch.randn(10, 3)
    a = mask_prototypes(p, 0.5, np.random.default_rng(42))[1]
    b = mask_prototypes(p, 0.5, np.random.default_rng(42))[1]
    assert a == b


@pytest.mark.parametrize("ratio,k,n", [(0.01, 10, 1), (0.99, 10, 9), (0.5, 3, 2), (0.25, 10, 3), (0.9, 2, 1)])
def test_mask_count_clamped(ratio, k, n):
    assert mask_count(ratio, k) == n


def test_mask_indices_roughly_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    for _ in range(4000):
        counts[list(mask_prototypes(torch.ones(10, 1), 0.3, rng)[1].masked_indices)] += 1
    freq = counts / 4000
    assert np.all(np.abs(freq - 0.3) < 0.04)


def test_attention_rows_are_simplex():
    head = RelationHead(8, heads=4)
    _, attn = head(torch.randn(6, 8), return_attention=True)
    assert attn.shape == (4, 6, 6)
    assert torch.all(attn >= 0)
    torch.testing.assert_close(attn.sum(-1), torch.ones(4, 6), rtol=0, atol=1e-9)


def test_zero_value_projection_gives_zero_output():
    head = RelationHead(8, heads=2)
    torch.nn.init.zeros_(head.v.weight)
    torch.nn.init.zeros_(head.v.bias)
    torch.nn.init.zeros_(head.out.bias)
    assert torch.all(reconstruct_prototypes(head, torch.randn(5, 8), torch.randn(5, 8)) == 0)


def test_matches_hand_written_attention():
    rng = np.random.default_rng(7)
    head = RelationHead(4, heads=1)
    weights = {}
    for name in ("q", "k", "v", "out"):
        w, b = rng.normal(size=(4, 4)), rng.normal(size=4)
        getattr(head, name).weight.data = torch.tensor(w)
        getattr(head, name).bias.data = torch.tensor(b)
        weights[name] = (w, b)
    masked, e_pos = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    expect, attn = direct_attention(masked + e_pos, *weights["q"], *weights["k"], *weights["v"], *weights["out"])
    got = reconstruct_prototypes(head, torch.tensor(masked), torch.tensor(e_pos))
    np.testing.assert_allclose(got.detach().numpy(), expect, rtol=0, atol=1e-10)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        reconstruct_prototypes(RelationHead(4, 1), torch.randn(3, 4), torch.randn(2, 4))
    with pytest.raises(ValueError):
        RelationHead(6, heads=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    head = RelationHead(8, heads=2)
    x = torch.randn(7, 8, generator=g)
    perm = torch.randperm(7, generator=g)
    torch.testing.assert_close(head(x[perm]), head(x)[perm], rtol=1e-12, atol=1e-12)


def test_head_gradients_match_finite_differences():
    from protomark.fdcheck import check_gradients

    torch.manual_seed(0)
    head = RelationHead(6, heads=2)
    masked = torch.randn(5, 6, requires_grad=True)
    e_pos = torch.randn(5, 6, requires_grad=True)
    w = torch.randn(5, 6)
    fn = lambda: (reconstruct_prototypes(head, masked, e_pos) * w).sum()
    res = check_gradients(fn, dict(head.named_parameters(), masked=masked, e_pos=e_pos))
    assert res.max_rel_error < 1e-4, res.worst
