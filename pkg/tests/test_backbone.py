import numpy as np
import pytest
import torch

from protomark.backbone import extract_features, init_backbone
from protomark.core import RunConfig, ShapeError
from protomark.fdcheck import check_gradients


def cfg(**kw):
    return RunConfig(**{"image_size": (64, 64), "widths": (64, 32, 16), **kw})


def test_same_seed_byte_identical():
    a, b = init_backbone(cfg(), 3), init_backbone(cfg(), 3)
    for (_, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert p.numpy().tobytes() == q.numpy().tobytes()


def test_different_seed_differs():
    a, b = init_backbone(cfg(), 3), init_backbone(cfg(), 4)
    assert not torch.equal(a.enc1.conv1.weight, b.enc1.conv1.weight)


def test_feature_shape():
    net = init_backbone(cfg(), 0)
    assert net.feature_dim == 112
    f = extract_features(net, np.random.default_rng(0).uniform(size=(64, 64)))
    assert f.shape == (112, 64, 64)
    fb = extract_features(net, torch.rand(2, 64, 64))
    assert fb.shape == (2, 112, 64, 64)


def test_levels_resolutions():
    net = init_backbone(cfg(widths=(5, 6, 7), base_width=4, msa_heads=1), 0)
    x = torch.rand(1, 1, 16, 24)
    f1, f2, f3 = net.levels(x)
    assert f1.shape == (1, 5, 4, 6) and f2.shape == (1, 6, 8, 12) and f3.shape == (1, 7, 16, 24)
    out = net(x)
    assert out.shape == (1, 18, 16, 24)
    # channel order is [up(F1), up(F2), F3]
    torch.testing.assert_close(out[:, 11:], f3)


def test_indivisible_size_rejected():
    with pytest.raises(ShapeError):
        extract_features(init_backbone(cfg(), 0), np.zeros((63, 63)))


def test_zero_weights_zero_image_give_zero_features():
    net = init_backbone(cfg(base_width=4, widths=(4, 4, 4)), 0)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if "conv" in name or "head" in name:
                p.zero_()
    assert torch.all(extract_features(net, np.zeros((16, 16))) == 0)


@pytest.mark.parametrize("mode", ["nearest", "transposed"])
def test_deterministic_eval(mode):
    net = init_backbone(cfg(upsample_mode=mode, base_width=4, widths=(4, 4, 4)), 1).eval()
    x = torch.rand(1, 1, 16, 16)
    assert torch.equal(net(x), net(x))


def test_backbone_gradients_match_finite_differences():
    net = init_backbone(cfg(image_size=(8, 8), widths=(4, 4, 4), base_width=4), 0, dtype=torch.float64)
    x = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
    w = torch.randn(2, 12, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    fn = lambda: (net(x) * w).mean() + (net(x) ** 2).mean()
    res = check_gradients(fn, {**dict(net.named_parameters()), "image": x})
    assert res.max_rel_error < 1e-4, res.worst


def test_context_block_optional_and_round_trips():
    plain = cfg(base_width=4, widths=(4, 4, 4), context_dilations=())
    assert RunConfig.from_text(plain.to_text()) == plain
    net = init_backbone(plain, 0)
    assert len(net.context.convs) == 0
    assert [c.dilation for c in init_backbone(cfg(), 0).context.convs] == [(2, 2), (4, 4), (8, 8)]
    assert extract_features(net, np.zeros((16, 16))).shape == (12, 16, 16)
    with pytest.raises(Exception):
        cfg(context_dilations=(0,))

