import numpy as np
import pytest

from imilia import preprocess
from imilia.synthetic import synth_he_image


def test_white_image_gives_empty_mask():
    with pytest.warns(UserWarning, match="degenerate"):
        mask = preprocess.tissue_mask(np.full((64, 64, 3), 255, np.uint8))
    assert not mask.any()
    assert len(preprocess.tessellate(mask, 16)) == 0


def test_half_white_half_pink():
    img = np.full((128, 128, 3), 250, np.uint8)
    img[:, 64:] = (214, 120, 170)
    mask = preprocess.tissue_mask(img)
    assert mask[:, 64:].all() and not mask[:, :64].any()


@pytest.mark.parametrize("frac", [0.2, 0.4])
def test_blob_area_recovered(frac):
    img, truth = synth_he_image(448, frac, seed=1)
    mask = preprocess.tissue_mask(img)
    assert abs(mask.sum() - truth.sum()) <= 0.1 * truth.sum()
    half = preprocess.tissue_mask(img, downsample=2)
    assert half.shape == (224, 224)


def test_tessellate_counts():
    full = np.ones((448, 448), bool)
    grid = preprocess.tessellate(full, 224)
    assert [t[1:] for t in grid.tiles] == [(0, 0), (224, 0), (0, 224), (224, 224)]
    assert len(preprocess.tessellate(np.zeros((448, 448), bool), 224, 0.0)) == 0
    assert len(preprocess.tessellate(np.ones((448, 448), bool)[::4, ::4], 224, downsample=4)) == 4


def test_tessellate_monotone_and_bounded(rng):
    mask = rng.random((700, 900)) < 0.55
    counts = [len(preprocess.tessellate(mask, 64, f)) for f in np.linspace(0, 1, 11)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[0] <= (700 // 64) * (900 // 64)


def test_tessellate_argument_checks():
    with pytest.raises(ValueError):
        preprocess.tessellate(np.ones((10, 10), bool), 4, 1.5)
    with pytest.raises(ValueError):
        preprocess.tessellate(np.ones((10, 10), bool), 5, downsample=2)
    with pytest.raises(ValueError):
        preprocess.tissue_mask(np.zeros((4, 4)))
