"""End-to-end operations shared by the CLI and the HTTP service.

Every run writes its fully resolved configuration into the output directory,
so results are reproducible from the artifacts alone. All randomness is
seeded through the config objects; identical configs produce byte-identical
outputs.
"""

import json
import os
from dataclasses import asdict

import numpy as np

from . import assoc, gallery, head, metrics, segnet, synthgen
from .masks import ViewMaskSet, compute_area_ratios, load_mask, load_pgm


def _echo_config(out_dir, name: str, payload: dict):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def load_row_masks(dataset_dir, row):
    fg = load_mask(os.path.join(dataset_dir, row.fg_path))
    views = ViewMaskSet(
        front=load_mask(os.path.join(dataset_dir, row.front_path)),
        side=load_mask(os.path.join(dataset_dir, row.side_path)),
        rear=load_mask(os.path.join(dataset_dir, row.rear_path)),
    )
    return fg, views


def row_area_ratios(dataset_dir, row):
    fg, views = load_row_masks(dataset_dir, row)
    return compute_area_ratios(fg, views)


def split_rows(dataset_dir, split: str) -> list:
    rows = [r for r in synthgen.read_manifest(dataset_dir) if r.split == split]
    if not rows:
        raise ValueError(f"no rows in split {split!r}")
    return rows


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_synth(cfg: synthgen.SynthConfig, out_dir) -> dict:
    rows = synthgen.make_dataset(cfg, out_dir)
    return {
        "dataset_dir": str(out_dir),
        "rows": len(rows),
        "identities": cfg.identities,
        "azimuths": cfg.azimuths,
        "manifest": os.path.join(str(out_dir), "manifest.tsv"),
    }


def run_train_seg(dataset_dir, out_dir, cfg: segnet.SegTrainConfig,
                  split: str = "train") -> dict:
    rows = split_rows(dataset_dir, split)
    pairs = [
        (
            load_pgm(os.path.join(dataset_dir, r.image_path)),
            load_mask(os.path.join(dataset_dir, r.fg_path)),
        )
        for r in rows
    ]
    result = segnet.train_from_pairs(pairs, cfg)
    os.makedirs(out_dir, exist_ok=True)
    params_path = os.path.join(str(out_dir), "segnet.params")
    segnet.save_params(result.params, params_path)
    loss_path = os.path.join(str(out_dir), "seg_loss.tsv")
    with open(loss_path, "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(result.epoch_losses):
            fh.write(f"{epoch}\t{loss:.9f}\n")
    _echo_config(out_dir, "train_seg_config.json",
                 {"dataset_dir": str(dataset_dir), "split": split, **asdict(cfg)})
    return {
        "params_path": params_path,
        "loss_path": loss_path,
        "final_loss": result.epoch_losses[-1],
        "epochs": cfg.epochs,
        "samples": len(pairs),
    }


def evaluate_segmentation(params: segnet.SegNetParams, dataset_dir,
                          split: str = "test", threshold: float = 0.5,
                          size: int = segnet.INPUT_SIZE) -> dict:
    """Mean mask IoU of segment() against ground-truth foregrounds."""
    rows = split_rows(dataset_dir, split)
    ious = []
    for r in rows:
        image = load_pgm(os.path.join(dataset_dir, r.image_path))
        gt = load_mask(os.path.join(dataset_dir, r.fg_path))
        pred = segnet.segment(params, image, threshold, size)
        ious.append(metrics.mask_iou(pred, gt))
    return {"mean_iou": float(np.mean(ious)), "samples": len(rows)}


def build_head_samples(dataset_dir, rows, provider) -> list:
    return [
        head.HeadSample(
            feature=provider.features(r),
            area_ratios=row_area_ratios(dataset_dir, r),
            identity=r.identity_id,
            azimuth_deg=r.azimuth_deg,
        )
        for r in rows
    ]


def run_train_head(dataset_dir, out_dir, cfg: head.HeadTrainConfig,
                   split: str = "train") -> dict:
    rows = split_rows(dataset_dir, split)
    provider = synthgen.SyntheticFeatureProvider(dataset_dir)
    samples = build_head_samples(dataset_dir, rows, provider)
    result = head.train_head(samples, cfg)
    os.makedirs(out_dir, exist_ok=True)
    params_path = os.path.join(str(out_dir), "head.params")
    head.save_head(result.params, params_path)
    loss_path = os.path.join(str(out_dir), "head_loss.tsv")
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tid_loss\ttriplet_loss\ttotal_loss\n")
        for epoch in range(len(result.total_losses)):
            fh.write(
                f"{epoch}\t{result.id_losses[epoch]:.9f}\t"
                f"{result.triplet_losses[epoch]:.9f}\t{result.total_losses[epoch]:.9f}\n"
            )
    _echo_config(out_dir, "train_head_config.json",
                 {"dataset_dir": str(dataset_dir), "split": split, **asdict(cfg)})
    return {
        "params_path": params_path,
        "loss_path": loss_path,
        "classes": result.classes,
        "final_total_loss": result.total_losses[-1],
        "samples": len(samples),
    }


def build_gallery_db(dataset_dir, rows, provider, params: head.HeadParams) -> gallery.GalleryDB:
    db = gallery.GalleryDB()
    for r in rows:
        emb = head.map_to_spaces(params, provider.features(r))
        db.insert(
            gallery.GalleryEntry(
                identity_id=r.identity_id,
                embeddings=emb,
                area_ratios=row_area_ratios(dataset_dir, r),
                tag=r.image_path,
            )
        )
    return db


def run_enroll(dataset_dir, head_path, out_dir, split: str = "train") -> dict:
    params = head.load_head(head_path)
    rows = split_rows(dataset_dir, split)
    provider = synthgen.SyntheticFeatureProvider(dataset_dir)
    db = build_gallery_db(dataset_dir, rows, provider, params)
    os.makedirs(out_dir, exist_ok=True)
    gallery_path = os.path.join(str(out_dir), "gallery.bin")
    gallery.save(db, gallery_path)
    _echo_config(out_dir, "enroll_config.json", {
        "dataset_dir": str(dataset_dir),
        "head_path": str(head_path),
        "split": split,
    })
    return {
        "gallery_path": gallery_path,
        "entries": len(db.entries),
        "identities": len(db.identities()),
    }


def _query_case(dataset_dir, provider, params, row):
    emb = head.map_to_spaces(params, provider.features(row))
    return emb, row_area_ratios(dataset_dir, row)


def run_query(
    dataset_dir,
    head_path,
    gallery_path,
    image_path: str,
    mode: str = "all_views",
    enroll_threshold: float = gallery.DEFAULT_ENROLL_THRESHOLD,
    enroll: bool = False,
    out_dir=None,
) -> dict:
    params = head.load_head(head_path)
    provider = synthgen.SyntheticFeatureProvider(dataset_dir)
    matches = [r for r in synthgen.read_manifest(dataset_dir) if r.image_path == image_path]
    if not matches:
        raise ValueError(f"image {image_path!r} not found in manifest")
    row = matches[0]
    emb, ar = _query_case(dataset_dir, provider, params, row)
    db = gallery.load(gallery_path)
    ranked = gallery.rank(emb, ar, db, mode)
    result = {
        "image_path": image_path,
        "mode": mode,
        "ranking": ranked.items,
        "area_ratios": list(ar.as_array()),
    }
    if enroll:
        decision = gallery.reid(emb, ar, db, enroll_threshold, tag=image_path, mode=mode)
        result["decision"] = {
            "status": decision.status,
            "identity_id": decision.identity_id,
            "distance": decision.distance,
        }
        if decision.status == "enrolled":
            gallery.save(db, gallery_path)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(str(out_dir), "query_result.tsv"), "w", encoding="utf-8") as fh:
            for ident, dist in ranked.items:
                fh.write(f"{ident}\t{dist:.9f}\n")
        _echo_config(out_dir, "query_config.json", {
            "dataset_dir": str(dataset_dir),
            "head_path": str(head_path),
            "gallery_path": str(gallery_path),
            "image_path": image_path,
            "mode": mode,
            "enroll": enroll,
            "enroll_threshold": enroll_threshold,
        })
    return result


def run_eval_reid(
    dataset_dir,
    head_path,
    out_dir,
    mode: str = "all_views",
    gallery_split: str = "train",
    query_split: str = "test",
) -> dict:
    params = head.load_head(head_path)
    provider = synthgen.SyntheticFeatureProvider(dataset_dir)
    db = build_gallery_db(dataset_dir, split_rows(dataset_dir, gallery_split),
                          provider, params)
    query_rows = split_rows(dataset_dir, query_split)

    cases = []
    relevance_lists = []
    for r in query_rows:
        emb, ar = _query_case(dataset_dir, provider, params, r)
        ranked = gallery.rank(emb, ar, db, mode)
        cases.append(metrics.ReidEvalCase(r.identity_id, ranked))
        image_rank = gallery.rank_entries(emb, ar, db, mode)
        relevance_lists.append([ident == r.identity_id for _, ident, _ in image_rank])

    topk = metrics.cmc(cases, ks=(1, 5))
    mean_ap = metrics.mean_average_precision(relevance_lists)
    report = {
        "top1": topk[1],
        "top5": topk[5],
        "map": mean_ap,
        "queries": len(query_rows),
        "gallery_entries": len(db.entries),
        "fusion_mode": mode,
    }
    os.makedirs(out_dir, exist_ok=True)
    metrics.write_report(
        report,
        os.path.join(str(out_dir), "reid_report.tsv"),
        os.path.join(str(out_dir), "reid_report.json"),
    )
    _echo_config(out_dir, "eval_reid_config.json", {
        "dataset_dir": str(dataset_dir),
        "head_path": str(head_path),
        "mode": mode,
        "gallery_split": gallery_split,
        "query_split": query_split,
    })
    return report


def _frames_from_rows(gt_rows, hyp_rows) -> list:
    frames = sorted({r[0] for r in gt_rows} | {r[0] for r in hyp_rows})
    by_frame = []
    for f in frames:
        by_frame.append(metrics.TrackEvalFrame(
            gt=[(r[1], (r[2], r[3], r[4], r[5])) for r in gt_rows if r[0] == f],
            hyp=[(r[1], (r[2], r[3], r[4], r[5])) for r in hyp_rows if r[0] == f],
        ))
    return by_frame


def run_eval_track(
    detections_path,
    out_dir,
    cfg: assoc.AssocConfig = None,
    gt_path=None,
    iou_threshold: float = 0.5,
) -> dict:
    cfg = cfg or assoc.AssocConfig()
    frames = assoc.read_detections(detections_path)
    tracker = assoc.Tracker(cfg)
    rows = tracker.run(frames)
    os.makedirs(out_dir, exist_ok=True)
    tracks_path = os.path.join(str(out_dir), "tracks.tsv")
    assoc.write_tracks(rows, tracks_path)
    report = {"tracks_path": tracks_path, "observations": len(rows)}
    if gt_path is not None:
        gt_rows = assoc.read_tracks(gt_path)
        eval_frames = _frames_from_rows(gt_rows, rows)
        mota_res = metrics.mota(eval_frames, iou_threshold)
        report.update({
            "mota": mota_res.mota,
            "idf1": metrics.idf1(eval_frames, iou_threshold),
            "fp": mota_res.fp,
            "fn": mota_res.fn,
            "ids": mota_res.ids,
            "gt_total": mota_res.gt_total,
        })
        metrics.write_report(
            {k: v for k, v in report.items() if k != "tracks_path"},
            os.path.join(str(out_dir), "track_report.tsv"),
            os.path.join(str(out_dir), "track_report.json"),
        )
    _echo_config(out_dir, "eval_track_config.json", {
        "detections_path": str(detections_path),
        "gt_path": str(gt_path) if gt_path else None,
        "iou_threshold": iou_threshold,
        **asdict(cfg),
    })
    return report
