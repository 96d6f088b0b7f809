"""Evaluation metrics: CMC Top-k and mAP for ranking, MOTA and IDF1 for tracks.

Boxes everywhere are (cx, cy, w, h) with center coordinates, matching the
tracker's output rows.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .gallery import RankedList


@dataclass
class ReidEvalCase:
    true_identity: int
    ranking: RankedList

    def __post_init__(self):
        if not self.ranking.items:
            raise ValueError("ranked list must be nonempty")


def cmc(cases: list, ks: tuple = (1, 5)) -> dict:
    """Top-k accuracy: true identity within the first k distinct identities."""
    if not cases:
        raise ValueError("no evaluation cases")
    ranks = []
    for case in cases:
        ids = case.ranking.identities()
        if case.true_identity not in ids:
            raise ValueError(f"identity {case.true_identity} missing from ranking")
        ranks.append(ids.index(case.true_identity))
    ranks = np.array(ranks)
    return {k: float(np.mean(ranks < k)) for k in ks}


def average_precision(relevance: list) -> float:
    """Raw AP: mean over relevant items of precision at that item's rank."""
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise ValueError("query has no relevant gallery items")
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.mean(hits[rel] / ranks[rel]))


def mean_average_precision(relevance_lists: list) -> float:
    if not relevance_lists:
        raise ValueError("no queries")
    return float(np.mean([average_precision(r) for r in relevance_lists]))


# ---------------------------------------------------------------------------
# Tracking metrics
# ---------------------------------------------------------------------------

@dataclass
class TrackEvalFrame:
    gt: list  # (gt_id, (cx, cy, w, h))
    hyp: list  # (track_id, (cx, cy, w, h))

    def __post_init__(self):
        for side, name in ((self.gt, "gt"), (self.hyp, "hyp")):
            ids = [i for i, _ in side]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {name} ids within a frame")


def iou(box_a: tuple, box_b: tuple) -> float:
    """Intersection over union of two center-format (cx, cy, w, h) boxes."""
    ax0, ay0 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax1, ay1 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx0, by0 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx1, by1 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a, b) -> float:
    """IoU of two boolean masks (any matching-shape bool arrays)."""
    bits_a = a.bits if hasattr(a, "bits") else np.asarray(a, dtype=bool)
    bits_b = b.bits if hasattr(b, "bits") else np.asarray(b, dtype=bool)
    if bits_a.shape != bits_b.shape:
        raise ValueError("mask shapes differ")
    union = np.logical_or(bits_a, bits_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(bits_a, bits_b).sum() / union)


@dataclass
class MotaResult:
    mota: float
    fp: int
    fn: int
    ids: int
    gt_total: int


def mota(frames: list, iou_threshold: float = 0.5) -> MotaResult:
    """CLEAR-style MOTA with match persistence.

    Per frame, previous gt-hyp pairings are kept while both sides are present
    and still overlap; the remainder are matched greedily by descending IoU.
    An ID switch is counted when a gt's matched hyp id changes from its last
    known correspondence.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError("iou threshold must be in (0, 1)")
    prev = {}  # gt_id -> last matched hyp_id
    fp = fn = ids = gt_total = 0
    for frame in frames:
        gt_boxes = dict(frame.gt)
        hyp_boxes = dict(frame.hyp)
        gt_total += len(gt_boxes)
        matches = {}

        for gid in sorted(gt_boxes):
            hid = prev.get(gid)
            if (
                hid is not None
                and hid in hyp_boxes
                and hid not in matches.values()
                and iou(gt_boxes[gid], hyp_boxes[hid]) >= iou_threshold
            ):
                matches[gid] = hid

        free_g = [g for g in gt_boxes if g not in matches]
        free_h = [h for h in hyp_boxes if h not in matches.values()]
        pairs = [
            (-iou(gt_boxes[g], hyp_boxes[h]), g, h)
            for g in free_g
            for h in free_h
            if iou(gt_boxes[g], hyp_boxes[h]) >= iou_threshold
        ]
        for _, g, h in sorted(pairs):
            if g in free_g and h in free_h:
                matches[g] = h
                free_g.remove(g)
                free_h.remove(h)

        for g, h in matches.items():
            if g in prev and prev[g] != h:
                ids += 1
            prev[g] = h
        fp += len(free_h)
        fn += len(free_g)
    value = 1.0 - (fp + fn + ids) / gt_total if gt_total else 1.0
    return MotaResult(float(value), fp, fn, ids, gt_total)


def idf1(frames: list, iou_threshold: float = 0.5) -> float:
    """IDF1 under the IDTP-maximizing global gt-track to hyp-track bijection."""
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError("iou threshold must be in (0, 1)")
    gt_ids, hyp_ids = set(), set()
    for frame in frames:
        gt_ids.update(i for i, _ in frame.gt)
        hyp_ids.update(i for i, _ in frame.hyp)
    gt_ids = sorted(gt_ids)
    hyp_ids = sorted(hyp_ids)
    gt_count = sum(len(f.gt) for f in frames)
    hyp_count = sum(len(f.hyp) for f in frames)
    if not gt_ids or not hyp_ids:
        return 0.0 if (gt_count or hyp_count) else 1.0

    overlap = np.zeros((len(gt_ids), len(hyp_ids)))
    g_index = {g: i for i, g in enumerate(gt_ids)}
    h_index = {h: i for i, h in enumerate(hyp_ids)}
    for frame in frames:
        for g, gbox in frame.gt:
            for h, hbox in frame.hyp:
                if iou(gbox, hbox) >= iou_threshold:
                    overlap[g_index[g], h_index[h]] += 1

    rows, cols = linear_sum_assignment(-overlap)
    idtp = float(overlap[rows, cols].sum())
    idfn = gt_count - idtp
    idfp = hyp_count - idtp
    denom = 2 * idtp + idfp + idfn
    return float(2 * idtp / denom) if denom else 1.0


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def write_report(entries: dict, path, summary_json_path=None):
    """UTF-8 key<TAB>value lines in insertion order; optional JSON mirror."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            if isinstance(value, float):
                fh.write(f"{key}\t{value:.6f}\n")
            else:
                fh.write(f"{key}\t{value}\n")
    if summary_json_path is not None:
        with open(summary_json_path, "w", encoding="utf-8") as fh:
            json.dump(entries, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_report(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, value = line.split("\t", 1)
            out[key] = value
    return out
