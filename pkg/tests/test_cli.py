import json

import numpy as np
import pytest

from vesselreid import assoc, cli, gallery, synthgen
from vesselreid.head import SpaceEmbeddings
from vesselreid.masks import AreaRatios
from conftest import crossing_frames, linear_scene_frames


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_parser_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args([])
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["synth", "--bogus-flag", "1"])


def test_parser_knows_all_subcommands():
    parser = cli.build_parser()
    for name in ("synth", "train-seg", "train-head", "enroll", "query",
                 "eval-reid", "eval-track", "gallery-info", "serve"):
        args = parser.parse_args([name] if name != "gallery-info"
                                 else [name, "--gallery", "g.bin"])
        assert args.command == name


def test_synth_command_in_process(capsys, tmp_path):
    code, out, err = run_cli(
        capsys, "synth", "--out", str(tmp_path / "ds"), "--identities", "2",
        "--azimuths", "2", "--image-size", "96", "--seed", "7",
    )
    assert code == 0, err
    body = json.loads(out)
    assert body["rows"] == 4
    assert synthgen.read_dataset_config(tmp_path / "ds").seed == 7


def test_config_file_merge_and_flag_precedence(capsys, tmp_path):
    cfg_path = tmp_path / "synth.json"
    cfg_path.write_text(json.dumps({
        "out_dir": str(tmp_path / "ds"),
        "identities": 2,
        "azimuths": 2,
        "image_size": 96,
        "seed": 3,
    }))
    code, out, _ = run_cli(
        capsys, "synth", "--config", str(cfg_path), "--seed", "9"
    )
    assert code == 0
    loaded = synthgen.read_dataset_config(tmp_path / "ds")
    assert loaded.seed == 9  # flag wins
    assert loaded.identities == 2  # from the config file


def test_unknown_config_key_is_client_error(capsys, tmp_path):
    cfg_path = tmp_path / "synth.json"
    cfg_path.write_text(json.dumps({"out_dir": str(tmp_path), "identitees": 3}))
    code, out, err = run_cli(capsys, "synth", "--config", str(cfg_path))
    assert code == 2
    assert err.startswith("error:")
    assert "identitees" in err


def test_config_file_must_be_object(capsys, tmp_path):
    cfg_path = tmp_path / "synth.json"
    cfg_path.write_text("[1, 2]")
    code, _, err = run_cli(capsys, "synth", "--config", str(cfg_path))
    assert code == 2
    assert "JSON object" in err


def test_missing_required_field_is_client_error(capsys):
    code, _, err = run_cli(capsys, "synth")
    assert code == 2
    assert err.startswith("error:")


def unit_rows(seed, d=2):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(4, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_gallery_info_command(capsys, tmp_path):
    db = gallery.GalleryDB()
    for ident in (0, 1):
        db.insert(gallery.GalleryEntry(
            ident, SpaceEmbeddings(unit_rows(ident)), AreaRatios(0.2, 0.3, 0.5)
        ))
    path = tmp_path / "gallery.bin"
    gallery.save(db, path)
    code, out, _ = run_cli(capsys, "gallery-info", "--gallery", str(path))
    assert code == 0
    body = json.loads(out)
    assert body["entries"] == 2
    assert body["identities"] == [0, 1]
    assert body["d_space"] == 2


def test_gallery_info_missing_file_is_server_error(capsys, tmp_path):
    code, out, err = run_cli(
        capsys, "gallery-info", "--gallery", str(tmp_path / "no.bin")
    )
    assert code == 1
    assert out == ""
    assert "detail" in json.loads(err)


def write_scene(tmp_path):
    frames = linear_scene_frames(20)
    dets = [d for frame in frames.values() for d in frame]
    det_path = tmp_path / "dets.tsv"
    assoc.write_detections(dets, det_path)
    gt_rows = []
    for t in sorted(frames):
        for d in frames[t]:
            gid = 0 if d.center[0] < 100 else 1
            gt_rows.append((t, gid, d.center[0], d.center[1], d.box[0], d.box[1]))
    gt_path = tmp_path / "gt.tsv"
    assoc.write_tracks(gt_rows, gt_path)
    return det_path, gt_path


def test_eval_track_command_end_to_end(capsys, tmp_path):
    det_path, gt_path = write_scene(tmp_path)
    code, out, err = run_cli(
        capsys, "eval-track", "--detections", str(det_path),
        "--out", str(tmp_path / "run"), "--gt", str(gt_path),
    )
    assert code == 0, err
    body = json.loads(out)
    assert body["mota"] == 1.0
    assert body["idf1"] == 1.0
    assert body["observations"] == 40


def test_eval_track_rerun_writes_identical_reports(capsys, tmp_path):
    det_path, gt_path = write_scene(tmp_path)
    for name in ("a", "b"):
        code, _, _ = run_cli(
            capsys, "eval-track", "--detections", str(det_path),
            "--out", str(tmp_path / name), "--gt", str(gt_path),
        )
        assert code == 0
    for report in ("tracks.tsv", "track_report.tsv", "track_report.json"):
        assert (tmp_path / "a" / report).read_bytes() == (
            tmp_path / "b" / report
        ).read_bytes()


def test_eval_track_embedding_flag_changes_outcome(capsys, tmp_path):
    frames = crossing_frames()
    dets = [d for frame in frames.values() for d in frame]
    det_path = tmp_path / "dets.tsv"
    assoc.write_detections(dets, det_path)
    gt_rows = []
    for t in sorted(frames):
        for d in frames[t]:
            gid = 0 if d.embedding[0] > 0 else 1
            gt_rows.append((t, gid, d.center[0], d.center[1], d.box[0], d.box[1]))
    gt_path = tmp_path / "gt.tsv"
    assoc.write_tracks(gt_rows, gt_path)

    code, out, _ = run_cli(
        capsys, "eval-track", "--detections", str(det_path),
        "--out", str(tmp_path / "with_emb"), "--gt", str(gt_path),
        "--radius", "5",
    )
    assert code == 0
    assert json.loads(out)["ids"] == 0

    code, out, _ = run_cli(
        capsys, "eval-track", "--detections", str(det_path),
        "--out", str(tmp_path / "no_emb"), "--gt", str(gt_path),
        "--radius", "5", "--no-embeddings",
    )
    assert code == 0
    body = json.loads(out)
    assert body["ids"] == 2
    assert body["mota"] < 1.0


def test_server_error_surfaces_as_exit_1(capsys, tmp_path):
    code, out, err = run_cli(
        capsys, "train-seg", "--dataset", str(tmp_path / "none"),
        "--out", str(tmp_path / "run"),
    )
    assert code == 1
    assert out == ""
    assert "detail" in json.loads(err)
