from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionslots.motionseg import (DegradeConfig, MotionMask, MotionMaskSet, PostprocessParams,
                                   Segment, connected_components, downsample_mask,
                                   oracle_motion_masks, postprocess, read_mask_set,
                                   write_mask_set)

from conftest import make_clip, straight_object

IDENTITY = DegradeConfig()


def flood_fill_components(mask):
    """Reference 4-connected labelling by BFS in row-major seed order."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                comp = np.zeros_like(mask, dtype=bool)
                q = deque([(r, c)])
                seen[r, c] = True
                while q:
                    y, x = q.popleft()
                    comp[y, x] = True
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                            seen[yy, xx] = True
                            q.append((yy, xx))
                comps.append(comp)
    return comps


def test_connected_components_basic():
    assert connected_components(np.zeros((5, 5)))[0] == 0
    sq = np.zeros((8, 8), bool)
    sq[2:5, 2:5] = True
    assert connected_components(sq)[0] == 1
    two = np.zeros((6, 9), bool)
    two[1:4, 1:4] = True
    two[1:4, 5:8] = True  # column 4 empty
    assert connected_components(two)[0] == 2


def test_connected_components_match_flood_fill():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = rng.random((12, 15)) < rng.uniform(0.2, 0.7)
        n, comps = connected_components(m)
        ref = flood_fill_components(m)
        assert n == len(ref)
        for a, b in zip(comps, ref):
            assert np.array_equal(a, b)


def test_downsample_mask_cases():
    assert downsample_mask(np.ones((8, 8)), (4, 4)).all()
    one = np.zeros((8, 8))
    one[3, 5] = 1
    assert not downsample_mask(one, (4, 4)).any()
    tie = np.zeros((2, 2))
    tie[0, :] = 1
    assert downsample_mask(tie, (1, 1)).all()
    with pytest.raises(ValueError):
        downsample_mask(np.ones((9, 8)), (4, 4))


def test_downsample_matches_majority_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = rng.random((12, 16)) < 0.5
        out = downsample_mask(m, (3, 4))
        for i in range(3):
            for j in range(4):
                block = m[4 * i:4 * i + 4, 4 * j:4 * j + 4]
                assert out[i, j] == (block.sum() * 2 >= block.size)


def _four_movers(length=10):
    objs = [straight_object((14, 14), (1.5, 0), length, size=8),
            straight_object((44, 14), (0, 1.5), length, size=8, color=(0.1, 0.8, 0.1)),
            straight_object((14, 44), (-1.5, 0), length, size=8, color=(0.1, 0.1, 0.8)),
            straight_object((44, 44), (0, -1.5), length, size=8, color=(0.8, 0.8, 0.1))]
    return make_clip(objs, length=length, shape=(64, 64))


def test_identity_degradation_gives_downsampled_gt():
    clip = make_clip([straight_object((10, 16), (1.5, 0), 5, size=8)])
    ms = oracle_motion_masks(clip, IDENTITY, (16, 16))
    for t in range(5):
        assert len(ms[t]) == 1
        expected = downsample_mask(clip.instance_masks[t] == 1, (16, 16))
        assert np.array_equal(ms[t][0].mask, expected)


def test_drop_rate_one_empties_every_frame():
    ms = oracle_motion_masks(_four_movers(), DegradeConfig(drop_rate=1.0), (16, 16))
    assert ms.counts == [0] * 10


def test_drop_rate_binomial_monte_carlo():
    clip = _four_movers()
    assert all(len(ids) == 4 for ids in clip.moving_ids)
    counts = np.array([sum(oracle_motion_masks(clip, DegradeConfig(drop_rate=0.5), (64, 64),
                                               seed=s).counts) for s in range(1000)])
    n, p = 40, 0.5
    sigma_mean = np.sqrt(n * p * (1 - p) / len(counts))
    assert abs(counts.mean() - n * p) < 3 * sigma_mean
    assert abs(counts.var() - n * p * (1 - p)) < 0.2 * n * p * (1 - p)


def test_static_objects_are_not_supervised_by_default():
    objs = [straight_object((10, 16), (1.5, 0), 5, size=8),
            straight_object((24, 16), (0, 0), 5, size=8, color=(0, 1, 0))]
    clip = make_clip(objs)
    ms = oracle_motion_masks(clip, IDENTITY, (32, 32))
    for t in range(5):
        assert len(ms[t]) == 1
        assert np.array_equal(ms[t][0].mask, clip.instance_masks[t] == 1)
    everything = oracle_motion_masks(clip, DegradeConfig(static_keep_rate=1.0), (32, 32))
    assert everything.counts == [2] * 5


def test_masks_are_disjoint_and_valid():
    for seed in range(10):
        ms = oracle_motion_masks(_four_movers(), DegradeConfig(noise_flip_rate=0.2,
                                                                boundary_erosion=1), (16, 16), seed)
        for t in range(len(ms)):
            acc = np.zeros((16, 16), int)
            for m in ms[t]:
                assert m.mask.any()
                acc += m.mask
            assert acc.max() <= 1


def test_mask_types_validate():
    with pytest.raises(ValueError):
        MotionMask(np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        MotionMask(np.full((2, 2), 2))
    a = np.zeros((4, 4), bool)
    a[:2] = True
    with pytest.raises(ValueError, match="overlap"):
        MotionMaskSet([[MotionMask(a), MotionMask(a)]], (4, 4))
    with pytest.raises(ValueError):
        MotionMaskSet([[MotionMask(a)] * 1], (4, 4)).check_slots(0)


def test_mask_set_round_trip(tmp_path):
    ms = oracle_motion_masks(_four_movers(), DegradeConfig(confidence_beta=(2, 2)), (16, 16), 3)
    write_mask_set(ms, tmp_path)
    back = read_mask_set(tmp_path)
    assert back.counts == ms.counts
    for t in range(len(ms)):
        for a, b in zip(ms[t], back[t]):
            assert np.array_equal(a.mask, b.mask)
            assert a.confidence == b.confidence


# --------------------------------------------------------------------------- postprocess

def blob(shape, r0, c0, h, w):
    m = np.zeros(shape, bool)
    m[r0:r0 + h, c0:c0 + w] = True
    return m


def kept(seg, shape=(100, 100)):
    return len(postprocess([seg], shape)) == 1


def test_postprocess_size_rules():
    s = (100, 100)
    assert not kept(Segment(blob(s, 45, 45, 5, 10), 0.9, 0.2))    # 50 px
    assert not kept(Segment(blob(s, 40, 40, 9, 11), 0.9, 0.2))    # 99 px
    assert kept(Segment(blob(s, 40, 40, 10, 10), 0.9, 0.2))       # 100 px, 10x10 box
    assert not kept(Segment(blob(s, 30, 40, 30, 9), 0.9, 0.2))    # 270 px, 9 px wide
    assert kept(Segment(blob(s, 30, 40, 30, 10), 0.9, 0.2))


def test_postprocess_area_rule():
    s = (200, 200)
    assert not kept(Segment(blob(s, 20, 20, 160, 160), 0.9, 0.2), s)   # 64 %
    assert not kept(Segment(blob(s, 0, 0, 200, 130), 0.9, 0.2), s)     # 65 %
    assert kept(Segment(blob(s, 20, 20, 150, 160), 0.9, 0.2), s)       # 60 % exactly


def test_postprocess_boundary_rule():
    s = (100, 100)
    assert not kept(Segment(blob(s, 14, 40, 20, 20), 0.9, 0.2))
    assert kept(Segment(blob(s, 15, 40, 20, 20), 0.9, 0.2))
    assert kept(Segment(blob(s, 65, 65, 20, 20), 0.9, 0.2))        # last row/col = 84
    assert not kept(Segment(blob(s, 66, 40, 20, 20), 0.9, 0.2))
    assert not kept(Segment(blob(s, 40, 66, 20, 20), 0.9, 0.2))
    assert not kept(Segment(blob(s, 40, 14, 20, 20), 0.9, 0.2))


def test_postprocess_component_rule():
    s = (100, 100)
    two = blob(s, 30, 30, 10, 20) | blob(s, 55, 30, 10, 20)
    assert not kept(Segment(two, 0.9, 0.2))
    assert kept(Segment(blob(s, 30, 30, 25, 20), 0.9, 0.2))


def test_postprocess_confidence_and_magnitude():
    m = blob((100, 100), 40, 40, 20, 25)
    assert kept(Segment(m, 0.9, 0.2))
    assert not kept(Segment(m, 0.24, 0.2))
    assert kept(Segment(m, 0.25, 0.2))
    assert not kept(Segment(m, 0.9, 0.049))
    assert kept(Segment(m, 0.9, 0.05))


def test_postprocess_defaults():
    p = PostprocessParams()
    assert (p.min_pixels, p.min_bbox_side, p.max_area_fraction, p.boundary_margin,
            p.max_components, p.conf_threshold, p.mag_threshold) == (100, 10, 0.6, 15, 1, 0.25, 0.05)


@st.composite
def segment_sets(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    n = draw(st.integers(0, 6))
    out = []
    for _ in range(n):
        h, w = rng.integers(1, 60, size=2)
        r0, c0 = rng.integers(0, 100 - h), rng.integers(0, 100 - w)
        m = blob((100, 100), r0, c0, h, w)
        if rng.random() < 0.3:
            m ^= rng.random((100, 100)) < 0.01
        out.append(Segment(m, float(rng.random()), float(rng.random() * 0.3)))
    return out


@settings(max_examples=200, deadline=None)
@given(segment_sets())
def test_postprocess_idempotent_and_subset(segs):
    once = postprocess(segs, (100, 100))
    twice = postprocess(once, (100, 100))
    assert len(once) == len(twice)
    assert all(a is b or np.array_equal(a.mask, b.mask) for a, b in zip(once, twice))
    assert all(any(s.mask is x.mask for x in segs) for s in once)


def test_permissive_postprocess_keeps_identity_oracle():
    clip = _four_movers(5)
    plain = oracle_motion_masks(clip, IDENTITY, (16, 16))
    filtered = oracle_motion_masks(clip, IDENTITY, (16, 16),
                                   postprocess_params=PostprocessParams.permissive())
    for t in range(5):
        assert len(plain[t]) == len(filtered[t]) == 4
        for a, b in zip(plain[t], filtered[t]):
            assert np.array_equal(a.mask, b.mask)
