import itertools
import json

import numpy as np
import pytest

from vesselreid import metrics
from vesselreid.gallery import RankedList
from vesselreid.masks import BitMask


def ranked(*items):
    return RankedList(list(items))


def test_iou_hand_cases():
    a = (0.0, 0.0, 2.0, 2.0)
    assert metrics.iou(a, a) == 1.0
    assert metrics.iou(a, (10.0, 0.0, 2.0, 2.0)) == 0.0
    # half-shifted: intersection 1x2=2, union 4+4-2=6
    assert metrics.iou(a, (1.0, 0.0, 2.0, 2.0)) == pytest.approx(1 / 3, rel=1e-12)
    assert metrics.iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


def test_iou_touching_boxes_is_zero():
    assert metrics.iou((0.0, 0.0, 2.0, 2.0), (2.0, 0.0, 2.0, 2.0)) == 0.0


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    b[1:3] = True
    assert metrics.mask_iou(a, b) == pytest.approx(4 / 12, rel=1e-12)
    assert metrics.mask_iou(a, a) == 1.0
    assert metrics.mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0
    assert metrics.mask_iou(BitMask(a), BitMask(b)) == pytest.approx(4 / 12)
    with pytest.raises(ValueError, match="differ"):
        metrics.mask_iou(a, np.zeros((3, 3), bool))


def test_cmc_counts_rank_of_true_identity():
    cases = [
        metrics.ReidEvalCase(0, ranked((0, 0.1), (1, 0.2), (2, 0.3))),  # rank 0
        metrics.ReidEvalCase(2, ranked((0, 0.1), (2, 0.2), (1, 0.3))),  # rank 1
        metrics.ReidEvalCase(1, ranked((0, 0.1), (2, 0.2), (1, 0.3))),  # rank 2
    ]
    out = metrics.cmc(cases, ks=(1, 2, 3))
    assert out[1] == pytest.approx(1 / 3)
    assert out[2] == pytest.approx(2 / 3)
    assert out[3] == 1.0


def test_cmc_validations():
    with pytest.raises(ValueError, match="no evaluation cases"):
        metrics.cmc([])
    case = metrics.ReidEvalCase(9, ranked((0, 0.1), (1, 0.2)))
    with pytest.raises(ValueError, match="missing"):
        metrics.cmc([case])
    with pytest.raises(ValueError, match="nonempty"):
        metrics.ReidEvalCase(0, RankedList([]))


def test_average_precision_known_value():
    assert metrics.average_precision([True, False, True]) == pytest.approx(
        5 / 6, rel=1e-12
    )
    assert metrics.average_precision([True]) == 1.0
    assert metrics.average_precision([False, True]) == 0.5


def test_average_precision_matches_definition_on_random_lists():
    rng = np.random.default_rng(41)
    for _ in range(50):
        rel = rng.random(size=rng.integers(1, 12)) < 0.4
        if not rel.any():
            rel[int(rng.integers(0, len(rel)))] = True
        expected = 0.0
        seen = 0
        for i, flag in enumerate(rel):
            if flag:
                seen += 1
                expected += seen / (i + 1)
        expected /= rel.sum()
        assert metrics.average_precision(list(rel)) == pytest.approx(
            expected, rel=1e-12
        )


def test_average_precision_requires_a_relevant_item():
    with pytest.raises(ValueError, match="no relevant"):
        metrics.average_precision([False, False])
    with pytest.raises(ValueError, match="no queries"):
        metrics.mean_average_precision([])


def test_mean_average_precision_is_mean_of_aps():
    lists = [[True], [False, True], [True, False, True]]
    expected = np.mean([1.0, 0.5, 5 / 6])
    assert metrics.mean_average_precision(lists) == pytest.approx(expected, rel=1e-12)


BOX = (0.0, 0.0, 10.0, 10.0)


def at(cx, cy=0.0):
    return (cx, cy, 10.0, 10.0)


def test_track_eval_frame_rejects_duplicate_ids():
    with pytest.raises(ValueError, match="duplicate gt"):
        metrics.TrackEvalFrame([(0, BOX), (0, BOX)], [])
    with pytest.raises(ValueError, match="duplicate hyp"):
        metrics.TrackEvalFrame([], [(1, BOX), (1, BOX)])


def test_mota_perfect_tracking():
    frames = [
        metrics.TrackEvalFrame([(0, at(i))], [(7, at(i))]) for i in range(3)
    ]
    out = metrics.mota(frames)
    assert out.mota == 1.0
    assert (out.fp, out.fn, out.ids, out.gt_total) == (0, 0, 0, 3)


def test_mota_counts_misses_and_false_positives():
    frames = [
        metrics.TrackEvalFrame([(0, BOX)], []),  # fn
        metrics.TrackEvalFrame([], [(1, BOX)]),  # fp
        metrics.TrackEvalFrame([(0, BOX)], [(1, BOX)]),
    ]
    out = metrics.mota(frames)
    assert (out.fp, out.fn, out.ids) == (1, 1, 0)
    assert out.mota == pytest.approx(1.0 - 2 / 2)


def test_mota_counts_identity_switch():
    frames = [
        metrics.TrackEvalFrame([(0, BOX)], [(1, BOX)]),
        metrics.TrackEvalFrame([(0, BOX)], [(2, BOX)]),
    ]
    out = metrics.mota(frames)
    assert out.ids == 1
    assert out.mota == pytest.approx(0.5)


def test_mota_counts_switch_across_absence():
    frames = [
        metrics.TrackEvalFrame([(0, BOX)], [(1, BOX)]),
        metrics.TrackEvalFrame([], []),
        metrics.TrackEvalFrame([(0, BOX)], [(2, BOX)]),
    ]
    assert metrics.mota(frames).ids == 1


def test_mota_persistence_beats_higher_iou_newcomer():
    # h1 keeps its gt pairing even when h2 overlaps the gt perfectly later.
    frames = [
        metrics.TrackEvalFrame([(0, at(0.0))], [(1, at(2.0))]),
        metrics.TrackEvalFrame([(0, at(0.0))], [(1, at(2.0)), (2, at(0.0))]),
    ]
    out = metrics.mota(frames)
    assert out.ids == 0
    assert out.fp == 1
    assert out.mota == pytest.approx(0.5)


def test_mota_empty_input_is_perfect():
    out = metrics.mota([])
    assert out.mota == 1.0 and out.gt_total == 0


def test_mota_threshold_validation():
    with pytest.raises(ValueError):
        metrics.mota([], iou_threshold=0.0)
    with pytest.raises(ValueError):
        metrics.idf1([], iou_threshold=1.0)


CELLS = [(0.0, 0.0), (100.0, 0.0), (200.0, 0.0), (0.0, 100.0), (100.0, 100.0)]


def cell_box(c):
    return (CELLS[c][0], CELLS[c][1], 10.0, 10.0)


def random_unambiguous_frames(rng, n_frames=8, n_gt=3):
    """Each cell holds at most one gt and one hyp, so IoU is 0 or 1 and any
    correct CLEAR matcher produces the same pairing."""
    frames = []
    for _ in range(n_frames):
        gt, hyp = [], []
        for g in range(n_gt):
            if rng.random() < 0.8:
                gt.append((g, cell_box(g)))
            if rng.random() < 0.75:
                hyp.append((int(2 * g + rng.integers(0, 2)), cell_box(g)))
        if rng.random() < 0.25:
            hyp.append((90, cell_box(3)))  # spurious, never overlaps gt
        frames.append(metrics.TrackEvalFrame(gt, hyp))
    return frames


def reference_mota(frames):
    last = {}
    fp = fn = ids = gt_total = 0
    for frame in frames:
        gt_cells = {tuple(box[:2]): g for g, box in frame.gt}
        hyp_cells = {tuple(box[:2]): h for h, box in frame.hyp}
        gt_total += len(frame.gt)
        for cell, g in gt_cells.items():
            if cell in hyp_cells:
                h = hyp_cells[cell]
                if g in last and last[g] != h:
                    ids += 1
                last[g] = h
            else:
                fn += 1
        fp += sum(1 for cell in hyp_cells if cell not in gt_cells)
    value = 1.0 - (fp + fn + ids) / gt_total if gt_total else 1.0
    return value, fp, fn, ids


def test_mota_matches_reference_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(30):
        frames = random_unambiguous_frames(rng)
        got = metrics.mota(frames)
        value, fp, fn, ids = reference_mota(frames)
        assert (got.fp, got.fn, got.ids) == (fp, fn, ids)
        assert got.mota == pytest.approx(value, abs=1e-12)


def exhaustive_idf1(frames, iou_threshold=0.5):
    gt_ids = sorted({g for f in frames for g, _ in f.gt})
    hyp_ids = sorted({h for f in frames for h, _ in f.hyp})
    gt_count = sum(len(f.gt) for f in frames)
    hyp_count = sum(len(f.hyp) for f in frames)
    if not gt_ids or not hyp_ids:
        return 0.0 if (gt_count or hyp_count) else 1.0
    overlap = {}
    for f in frames:
        for g, gbox in f.gt:
            for h, hbox in f.hyp:
                if metrics.iou(gbox, hbox) >= iou_threshold:
                    overlap[(g, h)] = overlap.get((g, h), 0) + 1
    best = 0
    small, large = (gt_ids, hyp_ids) if len(gt_ids) <= len(hyp_ids) else (
        hyp_ids,
        gt_ids,
    )
    flip = len(gt_ids) > len(hyp_ids)
    for perm in itertools.permutations(large, len(small)):
        total = 0
        for a, b in zip(small, perm):
            key = (b, a) if flip else (a, b)
            total += overlap.get(key, 0)
        best = max(best, total)
    denom = 2 * best + (gt_count - best) + (hyp_count - best)
    return 2 * best / denom if denom else 1.0


def test_idf1_edge_cases():
    assert metrics.idf1([]) == 1.0
    assert metrics.idf1([metrics.TrackEvalFrame([], [])]) == 1.0
    assert metrics.idf1([metrics.TrackEvalFrame([(0, BOX)], [])]) == 0.0
    assert metrics.idf1([metrics.TrackEvalFrame([], [(0, BOX)])]) == 0.0
    perfect = [
        metrics.TrackEvalFrame([(0, at(i))], [(3, at(i))]) for i in range(4)
    ]
    assert metrics.idf1(perfect) == 1.0


def test_idf1_penalizes_identity_split():
    # one gt covered by two hyp ids for half the frames each
    frames = [
        metrics.TrackEvalFrame([(0, at(i))], [(1 if i < 2 else 2, at(i))])
        for i in range(4)
    ]
    # best bijection keeps one hyp id: idtp=2, idfn=2, idfp=2 -> 2*2/(4+4)=0.5
    assert metrics.idf1(frames) == pytest.approx(0.5)


def test_idf1_matches_exhaustive_oracle_on_random_instances():
    rng = np.random.default_rng(43)
    for _ in range(25):
        frames = []
        for _ in range(int(rng.integers(2, 7))):
            gt, hyp = [], []
            for g in range(int(rng.integers(0, 4))):
                if rng.random() < 0.8:
                    gt.append((g, cell_box(g)))
            used = set()
            for _ in range(int(rng.integers(0, 4))):
                h = int(rng.integers(0, 4))
                if h in used:
                    continue
                used.add(h)
                hyp.append((h, cell_box(int(rng.integers(0, 4)))))
            frames.append(metrics.TrackEvalFrame(gt, hyp))
        assert metrics.idf1(frames) == pytest.approx(
            exhaustive_idf1(frames), abs=1e-12
        )


def test_report_round_trip_and_formats(tmp_path):
    entries = {"top1": 0.9375, "queries": 80, "mode": "all_views"}
    path = tmp_path / "report.tsv"
    json_path = tmp_path / "report.json"
    metrics.write_report(entries, path, json_path)
    text = path.read_text(encoding="utf-8")
    assert text.splitlines() == ["top1\t0.937500", "queries\t80", "mode\tall_views"]
    back = metrics.read_report(path)
    assert back == {"top1": "0.937500", "queries": "80", "mode": "all_views"}
    mirrored = json.loads(json_path.read_text(encoding="utf-8"))
    assert mirrored == entries


def test_write_report_without_json_mirror(tmp_path):
    path = tmp_path / "only.tsv"
    metrics.write_report({"a": 1.0}, path)
    assert path.read_text(encoding="utf-8") == "a\t1.000000\n"
    assert not (tmp_path / "only.json").exists()
