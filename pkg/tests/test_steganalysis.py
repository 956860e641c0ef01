import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter

from advembed import data
from advembed import steganalysis as sa


def photo_like(seed, size=128):
    """A 128x128 cover with a camera-style tone curve.

    Applying a gamma curve to 8-bit data leaves the uneven histogram (gaps
    and pile-ups) that pair-of-values detectors rely on; small synthetic
    covers lack it.
    """
    rng = np.random.default_rng(seed)
    field = gaussian_filter(rng.standard_normal((size, size, 3)), (6, 6, 0), mode="wrap")
    x = 0.5 + 0.2 * field / field.std() + 0.02 * rng.standard_normal(field.shape)
    px = data.to_uint8(np.clip(x, 0, 1)).astype(np.float64)
    return data.from_uint8(np.round(255 * (px / 255) ** 0.8))


def ssim_oracle(a, b, w=8):
    """Window-by-window SSIM with plain loops."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[2]):
        for i in range(a.shape[0] - w + 1):
            for j in range(a.shape[1] - w + 1):
                x = a[i:i + w, j:j + w, ch].astype(np.float64).ravel()
                y = b[i:i + w, j:j + w, ch].astype(np.float64).ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = x.var(), y.var()
                cov = ((x - mx) * (y - my)).mean()
                vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                            / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.random((12, 10, 2))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert sa.ssim(a, b) == pytest.approx(ssim_oracle(a, b), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (9, 9, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (9, 9, 3), elements=st.floats(0, 1)))
def test_ssim_identity_and_symmetry(a, b):
    assert sa.ssim(a, a) == 1.0
    assert sa.ssim_loss_percent(a, a) == 0.0
    assert sa.ssim(a, b) == sa.ssim(b, a)
    assert -1 <= sa.ssim(a, b) <= 1


def test_ssim_anticorrelated_binary():
    x = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)[:, :, None]
    assert sa.ssim(x, 1 - x) < 0
    assert sa.ssim_loss_percent(x, 1 - x) > 100


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        sa.ssim(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


def test_spa_constant_image_is_zero():
    assert sa.spa_score(np.full((32, 32, 3), 0.4)) == 0.0
    assert sa.spa_score(np.zeros((1, 1, 1))) == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_spa_clean_and_full_rate(seed):
    cover = photo_like(seed)
    assert sa.spa_score(cover) < 0.1
    full = sa.lsb_replace(cover, 1.0, np.random.default_rng(seed))
    assert sa.spa_score(full) > 0.8


def test_spa_tracks_rate():
    cover = photo_like(7)
    rng = np.random.default_rng(7)
    for rate in (0.2, 0.5, 0.8):
        assert sa.spa_score(sa.lsb_replace(cover, rate, rng)) == pytest.approx(rate, abs=0.12)


def test_chi_square_on_tone_curved_covers():
    covers = [photo_like(s) for s in range(5)]
    assert np.median([sa.lsb_chi_square_score(c) for c in covers]) < 0.5
    rng = np.random.default_rng(1)
    for c in covers:
        assert sa.lsb_chi_square_score(sa.lsb_replace(c, 1.0, rng)) > 0.9


def test_chi_square_degenerate_histograms():
    evens = data.from_uint8(np.full((8, 8, 3), 100, np.uint8))
    assert sa.lsb_chi_square_score(evens) == 0.0
    spread = data.from_uint8((np.arange(192, dtype=np.uint8) * 2).reshape(8, 8, 3))
    assert 0 <= sa.lsb_chi_square_score(spread) <= 1


def test_lsb_replace():
    img = data.from_uint8(np.random.default_rng(0).integers(0, 256, (64, 64, 3)))
    assert np.array_equal(sa.lsb_replace(img, 0.0, np.random.default_rng(1)), img)
    out = data.to_uint8(sa.lsb_replace(img, 1.0, np.random.default_rng(1)))
    src = data.to_uint8(img)
    assert np.array_equal(out >> 1, src >> 1)
    assert np.mean(out != src) == pytest.approx(0.5, abs=0.02)
    with pytest.raises(ValueError):
        sa.lsb_replace(img, 1.5, np.random.default_rng(1))


def auc_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert sa.auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert sa.auc_roc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert sa.auc_roc([0.5] * 6, [0, 1] * 3) == 0.5
    with pytest.raises(ValueError):
        sa.auc_roc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        sa.auc_roc([0.1, 0.2], [1])


def test_auc_random_scores():
    rng = np.random.default_rng(3)
    assert sa.auc_roc(rng.random(1000), np.arange(1000) % 2) == pytest.approx(0.5, abs=0.05)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40)
       .filter(lambda xs: 0 < sum(l for _, l in xs) < len(xs)))
def test_auc_matches_pair_count_and_monotone_invariance(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [int(l) for _, l in pairs]
    auc = sa.auc_roc(scores, labels)
    assert auc == pytest.approx(auc_oracle(scores, labels))
    assert sa.auc_roc([np.exp(3 * s) - 7 for s in scores], labels) == pytest.approx(auc)
