import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcases import tiny_model_config
from roundtrip import partition_recovered, relink, separated_videos
from tevit import rle
from tevit.core.errors import ConfigError, ContractError
from tevit.linker import (ClipInstanceResult, ClipResult, LinkConfig, TrackStore, box_iou, link_clips, mask_iou,
                          pair_iou, run_inference, similarity_matrix, split_video)
from tevit.model import TeViT, predict_clip


# -- splitting ------------------------------------------------------------------

def test_split_offline_single_clip():
    assert split_video(36, 36, 36) == [(0, 36)]
    assert split_video(7, 36, 10) == [(0, 7)]


def test_split_worked_example():
    assert split_video(20, 10, 5) == [(0, 10), (5, 15), (10, 20)]


def test_split_disjoint_tiling():
    assert split_video(15, 5, 5) == [(0, 5), (5, 10), (10, 15)]


def test_split_last_clip_shifted_back():
    assert split_video(12, 5, 3) == [(0, 5), (3, 8), (6, 11), (7, 12)]


def test_split_errors():
    with pytest.raises(ContractError):
        split_video(0, 5, 3)
    with pytest.raises(ContractError):
        split_video(10, 5, 6)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 80), st.integers(1, 20), st.data())
def test_split_covers_without_gaps(n, clip_len, data):
    stride = data.draw(st.integers(1, clip_len))
    ranges = split_video(n, clip_len, stride)
    covered = np.zeros(n, dtype=bool)
    for s, e in ranges:
        assert 0 <= s < e <= n
        assert e - s == min(clip_len, n)
        covered[s:e] = True
    assert covered.all()
    assert ranges[0][0] == 0 and ranges[-1][1] == n
    for (s0, e0), (s1, e1) in zip(ranges[:-2], ranges[1:-1]):
        assert e0 - s1 == clip_len - stride  # regular overlap except possibly the final clip


# -- IoU ------------------------------------------------------------------------

def test_pair_iou_identical_and_disjoint():
    m = np.zeros((6, 6), dtype=bool)
    m[1:3, 1:4] = True
    assert pair_iou([0, 0, 2, 2], m, [0, 0, 2, 2], m) == (1.0, 1.0)
    other = np.zeros_like(m)
    other[4:, 4:] = True
    assert pair_iou([0, 0, 1, 1], m, [3, 3, 5, 5], other) == (0.0, 0.0)


def test_box_iou_hand():
    assert box_iou([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3)


def test_mask_iou_empty_conventions():
    e = np.zeros((3, 3), dtype=bool)
    f = e.copy()
    f[1, 1] = True
    assert mask_iou(e, e) == 1.0 and mask_iou(e, f) == 0.0


# -- similarity and linking -------------------------------------------------------

def _inst(boxes, masks, cat=0, score=0.9):
    probs = np.zeros((len(boxes), 3))
    probs[:, cat] = 1.0
    return ClipInstanceResult(cat, score, np.asarray(boxes, float), np.asarray(masks, bool), probs)


def _square(frames, x, size=3, shape=(10, 10)):
    masks = np.zeros((frames,) + shape, dtype=bool)
    masks[:, 2:2 + size, x:x + size] = True
    boxes = np.tile([x, 2, x + size, 2 + size], (frames, 1))
    return boxes, masks


def test_similarity_duplicate_and_disjoint():
    a = _inst(*_square(4, 0))
    b = _inst(*_square(4, 6))
    prev = ClipResult(0, 4, [a, b])
    nxt = ClipResult(2, 6, [_inst(*_square(4, 0)), _inst(*_square(4, 6))])
    sim = similarity_matrix(prev, nxt)
    np.testing.assert_allclose(sim, np.eye(2), atol=1e-15)
    assert ((sim >= 0) & (sim <= 1)).all()


def test_similarity_box_only_weights():
    a = _inst(*_square(2, 0))
    bx, mk = _square(2, 1)
    mk[:] = False  # masks disagree entirely, boxes partly overlap
    prev, nxt = ClipResult(0, 2, [a]), ClipResult(0, 2, [_inst(bx, mk)])
    assert similarity_matrix(prev, nxt, 1.0, 0.0)[0, 0] == pytest.approx(box_iou(a.boxes[0], bx[0]))


def test_similarity_needs_overlap():
    with pytest.raises(ContractError, match="stride"):
        similarity_matrix(ClipResult(0, 3, [_inst(*_square(3, 0))]), ClipResult(3, 6, [_inst(*_square(3, 0))]))


def test_absent_frames_count_zero():
    a = _inst(*_square(4, 0))
    b = _inst(*_square(4, 0))
    b.present = np.array([True, False, True, True])
    sim = similarity_matrix(ClipResult(0, 4, [a]), ClipResult(0, 4, [b]))
    assert sim[0, 0] == pytest.approx(0.75)


def test_empty_next_clip_leaves_store():
    store = TrackStore(6, (10, 10))
    link_clips(store, ClipResult(0, 4, [_inst(*_square(4, 0))]), LinkConfig(4, 2))
    before = store.to_bytes()
    link_clips(store, ClipResult(2, 6, []), LinkConfig(4, 2))
    assert store.to_bytes() == before


def test_tie_break_lowest_index():
    cfg = LinkConfig(4, 2)
    store = TrackStore(6, (10, 10))
    link_clips(store, ClipResult(0, 4, [_inst(*_square(4, 0))]), cfg)
    twin = _square(4, 0)
    link_clips(store, ClipResult(2, 6, [_inst(*twin, score=0.5), _inst(*twin, score=0.7)]), cfg)
    assert store.last_ids == [0, 1]
    assert store.tracks[0].num_clips == 2 and store.tracks[0].score == pytest.approx((0.9 + 0.5) / 2)


def test_keep_earlier_and_keep_later():
    first_b, first_m = _square(4, 0)
    later_b, later_m = _square(4, 1)
    for keep, expect in ((True, first_m[0]), (False, later_m[0])):
        cfg = LinkConfig(4, 2, keep_earlier=keep, tau_link=0.1)
        store = TrackStore(6, (10, 10))
        link_clips(store, ClipResult(0, 4, [_inst(first_b, first_m)]), cfg)
        link_clips(store, ClipResult(2, 6, [_inst(later_b, later_m)]), cfg)
        assert len(store) == 1
        np.testing.assert_array_equal(store.tracks[0].masks[3], expect)
        np.testing.assert_array_equal(store.tracks[0].masks[5], later_m[0])


def test_weak_similarity_starts_new_track():
    cfg = LinkConfig(4, 2)
    store = TrackStore(6, (10, 10))
    link_clips(store, ClipResult(0, 4, [_inst(*_square(4, 0))]), cfg)
    link_clips(store, ClipResult(2, 6, [_inst(*_square(4, 6))]), cfg)
    assert len(store) == 2


def test_link_config_validation():
    with pytest.raises(ConfigError):
        LinkConfig(5, 6)
    with pytest.raises(ConfigError):
        LinkConfig(5, 3, w_box=0.7, w_mask=0.7)


def test_results_json_layout():
    store = TrackStore(5, (10, 10))
    link_clips(store, ClipResult(1, 3, [_inst(*_square(2, 0), cat=2)]), LinkConfig(2, 1))
    (rec,) = store.to_json()
    assert rec["track_id"] == 0 and rec["category_id"] == 2 and rec["score"] == pytest.approx(0.9)
    assert rec["segmentations"][0] is None and rec["boxes"][4] is None
    np.testing.assert_array_equal(rle.decode(rec["segmentations"][1]), _square(1, 0)[1][0])
    assert rec["boxes"][2] == [0.0, 2.0, 3.0, 5.0]


# -- round trip -------------------------------------------------------------------

@pytest.mark.parametrize("permute", [None, 5])
def test_round_trip_small(permute):
    videos = separated_videos(10, master_seed=3)
    for v in videos:
        assert partition_recovered(v, relink(v, 10, 5, permute))


# -- model-driven inference ---------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    return TeViT(tiny_model_config().model_config(), seed=0)


def test_offline_equals_direct_forward(tiny_model):
    frames = np.random.default_rng(0).uniform(size=(4, 3, 32, 32))
    cfg = LinkConfig(clip_len=8, stride=8, score_threshold=0.0)
    store = run_inference(tiny_model, frames, cfg)
    direct = predict_clip(tiny_model, frames, 0.0)
    recs = store.to_json()
    assert len(recs) == len(direct) > 0
    for rec, inst in zip(recs, direct):
        assert rec["category_id"] == inst.category and rec["score"] == inst.score
        for f in range(4):
            np.testing.assert_array_equal(rle.decode(rec["segmentations"][f]), inst.masks[f])
            assert rec["boxes"][f] == [float(x) for x in inst.boxes[f]]


def test_near_online_runs_and_is_deterministic(tiny_model):
    frames = np.random.default_rng(1).uniform(size=(11, 3, 32, 32))
    cfg = LinkConfig(clip_len=5, stride=3, score_threshold=0.0)
    a = run_inference(tiny_model, frames, cfg)
    b = run_inference(tiny_model, frames, cfg)
    assert len(a) > 0 and a.to_bytes() == b.to_bytes()
    covered = set()
    for tr in a.tracks.values():
        covered.update(tr.frames())
    assert covered == set(range(11))
