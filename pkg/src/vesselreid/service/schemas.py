"""Request/response models for the HTTP service.

All path fields refer to files on the machine running the service; the CLI
runs the app in-process by default, so paths behave like local CLI arguments.
"""

from typing import List, Optional

from pydantic import BaseModel


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthRequest(BaseModel):
    out_dir: str
    identities: int = 20
    azimuths: int = 8
    image_size: int = 192
    feature_noise_sigma: float = 0.18
    pixel_noise_sigma: float = 4.0
    seed: int = 0


class SynthResponse(BaseModel):
    dataset_dir: str
    rows: int
    identities: int
    azimuths: int
    manifest: str


class TrainSegRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    image_size: int = 192
    split: str = "train"


class TrainSegResponse(BaseModel):
    params_path: str
    loss_path: str
    final_loss: float
    epochs: int
    samples: int


class TrainHeadRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    d_space: int = 128
    arc_scale: float = 30.0
    arc_margin: float = 0.5
    lambda_id: float = 1.0
    lambda_triplet: float = 1.0
    triplet_margin: float = 0.3
    split: str = "train"


class TrainHeadResponse(BaseModel):
    params_path: str
    loss_path: str
    classes: List[int]
    final_total_loss: float
    samples: int


class EnrollRequest(BaseModel):
    dataset_dir: str
    head_path: str
    out_dir: str
    split: str = "train"


class EnrollResponse(BaseModel):
    gallery_path: str
    entries: int
    identities: int


class RankedItem(BaseModel):
    identity_id: int
    distance: float


class ReidDecisionModel(BaseModel):
    status: str
    identity_id: int
    distance: Optional[float] = None


class QueryRequest(BaseModel):
    dataset_dir: str
    head_path: str
    gallery_path: str
    image_path: str
    mode: str = "all_views"
    enroll: bool = False
    enroll_threshold: float = 0.35
    out_dir: Optional[str] = None


class QueryResponse(BaseModel):
    image_path: str
    mode: str
    ranking: List[RankedItem]
    area_ratios: List[float]
    decision: Optional[ReidDecisionModel] = None


class GalleryInfoResponse(BaseModel):
    path: str
    entries: int
    identities: List[int]
    d_space: int


class EvalReidRequest(BaseModel):
    dataset_dir: str
    head_path: str
    out_dir: str
    mode: str = "all_views"
    gallery_split: str = "train"
    query_split: str = "test"


class EvalReidResponse(BaseModel):
    top1: float
    top5: float
    map: float
    queries: int
    gallery_entries: int
    fusion_mode: str


class EvalTrackRequest(BaseModel):
    detections_path: str
    out_dir: str
    gt_path: Optional[str] = None
    radius: float = 50.0
    cosine_threshold: float = 0.5
    max_age: int = 10
    min_confidence: float = 0.3
    use_embeddings: bool = True
    iou_threshold: float = 0.5


class EvalTrackResponse(BaseModel):
    tracks_path: str
    observations: int
    mota: Optional[float] = None
    idf1: Optional[float] = None
    fp: Optional[int] = None
    fn: Optional[int] = None
    ids: Optional[int] = None
    gt_total: Optional[int] = None
