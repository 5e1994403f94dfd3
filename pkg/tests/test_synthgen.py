import numpy as np
import pytest

from protomark.core import load_dataset
from protomark.synthgen import SynthConfig, generate_corpus, generate_dataset, template_anchors


def small(**kw):
    return SynthConfig(**{"image_size": (64, 64), "counts": (6, 6), **kw})


def test_counts_ids_and_groups():
    d = generate_dataset(small(counts=(3, 5)))
    assert len(d) == 8 and d.num_landmarks == 10
    assert [s.id for s in d][:4] == ["adult_0000", "adult_0001", "adult_0002", "adolescent_0000"]
    assert len(d.by_group("adult")) == 3 and len(d.by_group("adolescent")) == 5


def test_same_seed_identical_other_seed_differs():
    a, b, c = generate_dataset(small()), generate_dataset(small()), generate_dataset(small(seed=1))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and np.array_equal(x.landmarks, y.landmarks)
    assert not np.array_equal(a[0].landmarks, c[0].landmarks)


def test_landmarks_in_bounds_and_images_in_range():
    d = generate_dataset(small(counts=(20, 20), shift_px=8.0))
    for s in d:
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.all(s.landmarks >= 0) and np.all(s.landmarks <= 63)


def test_adolescent_shift_magnitude():
    d = generate_dataset(small(counts=(4, 30), shift_px=4.0))
    for s in d:
        off = np.linalg.norm(s.landmarks - np.asarray(s.meta["template"]), axis=1)
        if s.group == "adult":
            assert np.all(off == 0)
        else:
            assert np.all(off >= 0.75 * 4.0 - 1e-9) and np.all(off <= 1.25 * 4.0 + 1e-9)


def test_zero_shift_leaves_template():
    for s in generate_dataset(small(shift_px=0.0)).by_group("adolescent"):
        assert np.array_equal(s.landmarks, np.asarray(s.meta["template"]))


def test_landmarks_sit_on_bright_marks():
    d = generate_dataset(small(counts=(5, 5)))
    for s in d:
        ij = np.rint(s.landmarks[:, ::-1]).astype(int)
        assert s.image[ij[:, 0], ij[:, 1]].mean() > s.image.mean()


def test_template_extends_beyond_ten():
    t = template_anchors(14)
    assert t.shape == (14, 2) and np.array_equal(t[:10], template_anchors(10))
    assert np.array_equal(t, template_anchors(14))


def test_corpus_round_trip(tmp_path):
    cfg = small(counts=(2, 2))
    generate_corpus(cfg, tmp_path / "c")
    back = load_dataset(tmp_path / "c")
    for x, y in zip(generate_dataset(cfg), back):
        assert x.id == y.id and x.group == y.group
        np.testing.assert_allclose(x.landmarks, y.landmarks, atol=1e-9)
        np.testing.assert_allclose(x.image, y.image, atol=1 / 65535)


@pytest.mark.parametrize("kw", [{"counts": (0, 3)}, {"shift_px": -1.0}, {"num_landmarks": 1}, {"image_size": (4, 4)}])
def test_bad_config_rejected(kw):
    with pytest.raises(ValueError):
        small(**kw)
