import json
import os

import numpy as np
import pytest

from vesselreid import assoc, head, pipelines, segnet, synthgen
from conftest import crossing_frames


@pytest.fixture(scope="module")
def trained_head(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("head_run")
    cfg = head.HeadTrainConfig(epochs=3, batch_size=8, seed=0, d_space=16)
    report = pipelines.run_train_head(small_dataset["dir"], out, cfg)
    return {"out": str(out), "report": report, "cfg": cfg}


def test_run_synth_writes_dataset(tmp_path):
    cfg = synthgen.SynthConfig(identities=2, azimuths=2, image_size=96, seed=5)
    report = pipelines.run_synth(cfg, tmp_path / "ds")
    assert report["rows"] == 4
    assert report["identities"] == 2
    assert os.path.exists(report["manifest"])
    rows = synthgen.read_manifest(report["dataset_dir"])
    assert len(rows) == 4


def test_split_rows_unknown_split(small_dataset):
    with pytest.raises(ValueError, match="no rows in split"):
        pipelines.split_rows(small_dataset["dir"], "validation")


def test_split_rows_partitions_by_azimuth(small_dataset):
    train = pipelines.split_rows(small_dataset["dir"], "train")
    test = pipelines.split_rows(small_dataset["dir"], "test")
    assert len(train) == len(test) == 24
    assert {r.azimuth_deg for r in train}.isdisjoint({r.azimuth_deg for r in test})


def test_row_area_ratios_are_normalized(small_dataset):
    row = pipelines.split_rows(small_dataset["dir"], "train")[0]
    ar = pipelines.row_area_ratios(small_dataset["dir"], row)
    total = ar.front + ar.side + ar.rear
    assert 0.0 < total <= 1.0 + 1e-9


def test_run_train_seg_and_evaluate(small_dataset, tmp_path):
    cfg = segnet.SegTrainConfig(epochs=2, batch_size=8, seed=0, image_size=96)
    report = pipelines.run_train_seg(small_dataset["dir"], tmp_path, cfg)
    assert report["samples"] == 24
    assert report["epochs"] == 2
    assert os.path.exists(report["params_path"])
    loss_lines = open(report["loss_path"]).read().splitlines()
    assert len(loss_lines) == 2
    echoed = json.loads((tmp_path / "train_seg_config.json").read_text())
    assert echoed["image_size"] == 96 and echoed["epochs"] == 2

    params = segnet.load_params(report["params_path"])
    out = pipelines.evaluate_segmentation(
        params, small_dataset["dir"], split="test", size=96
    )
    assert out["samples"] == 24
    assert 0.0 <= out["mean_iou"] <= 1.0


def test_run_train_head_outputs(small_dataset, trained_head):
    report = trained_head["report"]
    assert report["classes"] == [0, 1, 2, 3, 4, 5]
    assert report["samples"] == 24
    assert os.path.exists(report["params_path"])
    lines = open(report["loss_path"]).read().splitlines()
    assert lines[0] == "epoch\tid_loss\ttriplet_loss\ttotal_loss"
    assert len(lines) == 1 + 3
    params = head.load_head(report["params_path"])
    assert params.d_space == 16


def test_run_enroll_builds_gallery(small_dataset, trained_head, tmp_path):
    report = pipelines.run_enroll(
        small_dataset["dir"], trained_head["report"]["params_path"], tmp_path
    )
    assert report["entries"] == 24
    assert report["identities"] == 6
    assert os.path.exists(report["gallery_path"])


def test_run_query_ranks_against_gallery(small_dataset, trained_head, tmp_path):
    enroll = pipelines.run_enroll(
        small_dataset["dir"], trained_head["report"]["params_path"], tmp_path / "g"
    )
    query_row = pipelines.split_rows(small_dataset["dir"], "test")[0]
    result = pipelines.run_query(
        small_dataset["dir"],
        trained_head["report"]["params_path"],
        enroll["gallery_path"],
        query_row.image_path,
        out_dir=tmp_path / "q",
    )
    assert result["image_path"] == query_row.image_path
    assert result["mode"] == "all_views"
    assert len(result["ranking"]) == 6
    assert len(result["area_ratios"]) == 3
    assert "decision" not in result
    lines = (tmp_path / "q" / "query_result.tsv").read_text().splitlines()
    assert len(lines) == 6

    with pytest.raises(ValueError, match="not found in manifest"):
        pipelines.run_query(
            small_dataset["dir"],
            trained_head["report"]["params_path"],
            enroll["gallery_path"],
            "images/none.pgm",
        )


def test_run_query_enroll_decision(small_dataset, trained_head, tmp_path):
    enroll = pipelines.run_enroll(
        small_dataset["dir"], trained_head["report"]["params_path"], tmp_path
    )
    query_row = pipelines.split_rows(small_dataset["dir"], "test")[0]
    result = pipelines.run_query(
        small_dataset["dir"],
        trained_head["report"]["params_path"],
        enroll["gallery_path"],
        query_row.image_path,
        enroll=True,
        enroll_threshold=10.0,  # force a match, keep the gallery file intact
    )
    assert result["decision"]["status"] == "matched"
    assert result["decision"]["distance"] <= 10.0


def test_run_eval_reid_report_and_determinism(small_dataset, trained_head, tmp_path):
    head_path = trained_head["report"]["params_path"]
    first = pipelines.run_eval_reid(small_dataset["dir"], head_path, tmp_path / "a")
    assert set(first) == {
        "top1", "top5", "map", "queries", "gallery_entries", "fusion_mode",
    }
    assert first["queries"] == 24
    assert first["gallery_entries"] == 24
    assert first["fusion_mode"] == "all_views"
    assert 0.0 <= first["map"] <= 1.0
    pipelines.run_eval_reid(small_dataset["dir"], head_path, tmp_path / "b")
    for name in ("reid_report.tsv", "reid_report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (
            tmp_path / "b" / name
        ).read_bytes()


def test_run_eval_track_with_ground_truth(tmp_path):
    frames = crossing_frames()
    dets = [d for frame in frames.values() for d in frame]
    det_path = tmp_path / "dets.tsv"
    assoc.write_detections(dets, det_path)

    def label(d):
        return 0 if d.embedding[0] > 0 else 1

    gt_rows = []
    for t in sorted(frames):
        for d in frames[t]:
            gt_rows.append((t, label(d), d.center[0], d.center[1], d.box[0], d.box[1]))
    gt_path = tmp_path / "gt.tsv"
    assoc.write_tracks(gt_rows, gt_path)

    report = pipelines.run_eval_track(
        det_path, tmp_path / "out", gt_path=gt_path
    )
    assert os.path.exists(report["tracks_path"])
    assert report["observations"] == sum(len(v) for v in frames.values())
    for key in ("mota", "idf1", "fp", "fn", "ids", "gt_total"):
        assert key in report
    assert os.path.exists(tmp_path / "out" / "track_report.tsv")


def test_run_eval_track_without_ground_truth(tmp_path):
    dets = [
        assoc.Detection(t, (10.0 + 2.0 * t, 20.0), (8.0, 8.0), np.zeros(2), 1.0)
        for t in range(5)
    ]
    det_path = tmp_path / "dets.tsv"
    assoc.write_detections(dets, det_path)
    report = pipelines.run_eval_track(det_path, tmp_path / "out")
    assert set(report) == {"tracks_path", "observations"}
    assert report["observations"] == 5
    assert not os.path.exists(tmp_path / "out" / "track_report.tsv")
