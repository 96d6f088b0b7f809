"""FastAPI service wrapping the re-identification pipelines.

One app instance serializes gallery mutations with a lock, so a query's
check-then-enroll is atomic with respect to other writers.
"""

import threading

from fastapi import FastAPI, HTTPException

from .. import __version__, assoc, gallery, head, pipelines, segnet, synthgen
from . import schemas


def _fail(exc: Exception):
    raise HTTPException(status_code=400, detail=str(exc))


def create_app() -> FastAPI:
    app = FastAPI(title="vesselreid", version=__version__)
    gallery_lock = threading.Lock()

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        try:
            cfg = synthgen.SynthConfig(
                identities=req.identities,
                azimuths=req.azimuths,
                image_size=req.image_size,
                feature_noise_sigma=req.feature_noise_sigma,
                pixel_noise_sigma=req.pixel_noise_sigma,
                seed=req.seed,
            )
            return schemas.SynthResponse(**pipelines.run_synth(cfg, req.out_dir))
        except (ValueError, OSError) as exc:
            _fail(exc)

    @app.post("/train/seg", response_model=schemas.TrainSegResponse)
    def train_seg(req: schemas.TrainSegRequest):
        try:
            cfg = segnet.SegTrainConfig(
                learning_rate=req.learning_rate,
                momentum=req.momentum,
                epochs=req.epochs,
                batch_size=req.batch_size,
                seed=req.seed,
                image_size=req.image_size,
            )
            return schemas.TrainSegResponse(
                **pipelines.run_train_seg(req.dataset_dir, req.out_dir, cfg, req.split)
            )
        except (ValueError, OSError) as exc:
            _fail(exc)

    @app.post("/train/head", response_model=schemas.TrainHeadResponse)
    def train_head(req: schemas.TrainHeadRequest):
        try:
            cfg = head.HeadTrainConfig(
                learning_rate=req.learning_rate,
                momentum=req.momentum,
                epochs=req.epochs,
                batch_size=req.batch_size,
                seed=req.seed,
                d_space=req.d_space,
                arc=head.ArcFaceConfig(scale=req.arc_scale, margin=req.arc_margin),
                loss=head.LossConfig(
                    lambda_id=req.lambda_id,
                    lambda_triplet=req.lambda_triplet,
                    triplet_margin=req.triplet_margin,
                ),
            )
            return schemas.TrainHeadResponse(
                **pipelines.run_train_head(req.dataset_dir, req.out_dir, cfg, req.split)
            )
        except (ValueError, OSError) as exc:
            _fail(exc)

    @app.post("/enroll", response_model=schemas.EnrollResponse)
    def enroll(req: schemas.EnrollRequest):
        try:
            with gallery_lock:
                return schemas.EnrollResponse(
                    **pipelines.run_enroll(
                        req.dataset_dir, req.head_path, req.out_dir, req.split
                    )
                )
        except (ValueError, OSError, head.HeadFormatError) as exc:
            _fail(exc)

    @app.post("/query", response_model=schemas.QueryResponse)
    def query(req: schemas.QueryRequest):
        try:
            with gallery_lock:
                result = pipelines.run_query(
                    req.dataset_dir,
                    req.head_path,
                    req.gallery_path,
                    req.image_path,
                    mode=req.mode,
                    enroll_threshold=req.enroll_threshold,
                    enroll=req.enroll,
                    out_dir=req.out_dir,
                )
        except (ValueError, OSError, KeyError) as exc:
            _fail(exc)
        decision = result.get("decision")
        return schemas.QueryResponse(
            image_path=result["image_path"],
            mode=result["mode"],
            ranking=[
                schemas.RankedItem(identity_id=i, distance=d)
                for i, d in result["ranking"]
            ],
            area_ratios=result["area_ratios"],
            decision=schemas.ReidDecisionModel(**decision) if decision else None,
        )

    @app.get("/gallery/info", response_model=schemas.GalleryInfoResponse)
    def gallery_info(path: str):
        try:
            db = gallery.load(path)
        except (ValueError, OSError) as exc:
            _fail(exc)
        return schemas.GalleryInfoResponse(
            path=path,
            entries=len(db.entries),
            identities=db.identities(),
            d_space=db.d_space,
        )

    @app.post("/eval/reid", response_model=schemas.EvalReidResponse)
    def eval_reid(req: schemas.EvalReidRequest):
        try:
            return schemas.EvalReidResponse(
                **pipelines.run_eval_reid(
                    req.dataset_dir,
                    req.head_path,
                    req.out_dir,
                    mode=req.mode,
                    gallery_split=req.gallery_split,
                    query_split=req.query_split,
                )
            )
        except (ValueError, OSError) as exc:
            _fail(exc)

    @app.post("/eval/track", response_model=schemas.EvalTrackResponse)
    def eval_track(req: schemas.EvalTrackRequest):
        try:
            cfg = assoc.AssocConfig(
                radius=req.radius,
                cosine_threshold=req.cosine_threshold,
                max_age=req.max_age,
                min_confidence=req.min_confidence,
                use_embeddings=req.use_embeddings,
            )
            return schemas.EvalTrackResponse(
                **pipelines.run_eval_track(
                    req.detections_path,
                    req.out_dir,
                    cfg,
                    gt_path=req.gt_path,
                    iou_threshold=req.iou_threshold,
                )
            )
        except (ValueError, OSError) as exc:
            _fail(exc)

    return app
