"""Shared fixtures: a small rendered dataset and scripted tracking scenes."""

import numpy as np
import pytest

from vesselreid import assoc, metrics, synthgen


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """6 identities x 8 azimuths at 96 px; shared read-only across tests."""
    out = tmp_path_factory.mktemp("dataset")
    cfg = synthgen.SynthConfig(identities=6, azimuths=8, image_size=96, seed=3)
    rows = synthgen.make_dataset(cfg, out)
    return {"dir": str(out), "cfg": cfg, "rows": rows}


def crossing_frames():
    """Two targets approach, cross behind an occluder, and leave reversed.

    While unseen (frames 25..28) both reverse course, so one-step motion
    prediction points away from where they reappear and only appearance can
    recover the correspondence. Embeddings are constant and orthogonal.
    """
    ea, eb = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    frames = {}
    for t in range(25):
        frames[t] = [
            assoc.Detection(t, (10.0 + 2.0 * t, 20.0), (8.0, 8.0), ea, 1.0),
            assoc.Detection(t, (110.0 - 2.0 * t, 20.0), (8.0, 8.0), eb, 1.0),
        ]
    for t in range(29, 40):
        frames[t] = [
            assoc.Detection(t, (58.0 - 2.0 * (t - 24), 20.0), (8.0, 8.0), ea, 1.0),
            assoc.Detection(t, (62.0 + 2.0 * (t - 24), 20.0), (8.0, 8.0), eb, 1.0),
        ]
    return frames


def linear_scene_frames(n_frames: int = 100):
    """Two well-separated constant-velocity targets, detected every frame."""
    frames = {}
    for t in range(n_frames):
        a = (5.0 + 1.5 * t, 10.0)
        b = (200.0 - 1.0 * t, 40.0)
        frames[t] = [
            assoc.Detection(t, a, (10.0, 6.0), np.zeros(2), 1.0),
            assoc.Detection(t, b, (10.0, 6.0), np.zeros(2), 1.0),
        ]
    return frames


def frames_to_gt(frames, label_fn):
    """Ground-truth TrackEvalFrame inputs [(frame, [(gt_id, box), ...])]."""
    out = []
    for t in sorted(frames):
        gt = [
            (label_fn(d), (d.center[0], d.center[1], d.box[0], d.box[1]))
            for d in frames[t]
        ]
        out.append((t, gt))
    return out


def eval_tracker(frames, cfg, label_fn):
    """Run a tracker over frames and score it against labeled ground truth."""
    tracker = assoc.Tracker(cfg)
    rows = tracker.run(frames)
    by_frame = {}
    for f, tid, cx, cy, w, h in rows:
        by_frame.setdefault(f, []).append((tid, (cx, cy, w, h)))
    cases = [
        metrics.TrackEvalFrame(gt=gt, hyp=by_frame.get(t, []))
        for t, gt in frames_to_gt(frames, label_fn)
    ]
    return metrics.mota(cases), metrics.idf1(cases), rows


@pytest.fixture
def crossing_scene():
    return crossing_frames()


@pytest.fixture
def linear_scene():
    return linear_scene_frames()


@pytest.fixture
def tracker_scorer():
    return eval_tracker
