"""Two-round detection-to-tracklet association with constant-velocity motion.

Round 1 greedily pairs predicted track centers with detection centers by
ascending Euclidean distance, admitting pairs within a radius; each pick is
the mutual nearest among the remaining candidates. Round 2 pairs the
leftovers by descending embedding cosine similarity above a threshold, which
recovers tracks whose motion prediction failed (occlusion gaps, course
changes). Both rounds are injective and deterministic.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import cosine_similarity


@dataclass
class Detection:
    frame: int
    center: tuple  # (x, y) pixels
    box: tuple  # (w, h) pixels
    embedding: np.ndarray
    confidence: float

    def __post_init__(self):
        if self.box[0] <= 0 or self.box[1] <= 0:
            raise ValueError("box dimensions must be positive")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must be in [0, 1]")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)


@dataclass
class Tracklet:
    track_id: int
    last_center: tuple
    velocity: tuple = (0.0, 0.0)
    embedding: np.ndarray = None
    age_since_seen: int = 0
    last_frame: int = 0
    history: list = field(default_factory=list)  # (frame, center, box)


@dataclass
class AssocConfig:
    radius: float = 50.0
    cosine_threshold: float = 0.5
    max_age: int = 10
    min_confidence: float = 0.3
    use_embeddings: bool = True  # round 2 on/off

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if not (-1.0 < self.cosine_threshold < 1.0):
            raise ValueError("cosine threshold must be in (-1, 1)")
        if self.max_age < 1:
            raise ValueError("max_age must be >= 1")
        if not (0.0 <= self.min_confidence <= 1.0):
            raise ValueError("min_confidence must be in [0, 1]")


@dataclass
class Assignment:
    matches: list  # (track_index, det_index, round) sorted by track index
    unmatched_tracks: list
    unmatched_detections: list


def predict(tracklet: Tracklet) -> tuple:
    """One-step constant-velocity extrapolation from the last observation."""
    return (
        tracklet.last_center[0] + tracklet.velocity[0],
        tracklet.last_center[1] + tracklet.velocity[1],
    )


def associate(tracklets: list, detections: list, cfg: AssocConfig) -> Assignment:
    free_t = list(range(len(tracklets)))
    free_d = list(range(len(detections)))
    matches = []

    # Round 1: greedy mutual-nearest by center distance within the radius.
    pairs = []
    for ti in free_t:
        px, py = predict(tracklets[ti])
        for di in free_d:
            dx, dy = detections[di].center
            dist = float(np.hypot(px - dx, py - dy))
            if dist <= cfg.radius:
                pairs.append((dist, tracklets[ti].track_id, di, ti))
    for dist, _, di, ti in sorted(pairs):
        if ti in free_t and di in free_d:
            matches.append((ti, di, 1))
            free_t.remove(ti)
            free_d.remove(di)

    # Round 2: leftovers by descending embedding cosine similarity.
    if cfg.use_embeddings:
        pairs = []
        for ti in free_t:
            emb = tracklets[ti].embedding
            if emb is None or not np.any(emb):
                continue
            for di in free_d:
                det_emb = detections[di].embedding
                if not np.any(det_emb):
                    continue
                sim = cosine_similarity(emb, det_emb)
                if sim >= cfg.cosine_threshold:
                    pairs.append((-sim, tracklets[ti].track_id, di, ti))
        for _, _, di, ti in sorted(pairs):
            if ti in free_t and di in free_d:
                matches.append((ti, di, 2))
                free_t.remove(ti)
                free_d.remove(di)

    matches.sort()
    return Assignment(matches, free_t, free_d)


_EMB_KEEP = 0.9  # running-mean weight on the existing track embedding


def step(tracklets: list, detections: list, cfg: AssocConfig, next_id: int = None):
    """Advance one frame: associate, update, spawn, retire.

    Detections below min_confidence are ignored. Matched tracks update center,
    per-frame velocity (displacement over the frame gap), running-mean
    embedding, and history; unmatched tracks age and are retired past max_age;
    unmatched detections spawn fresh ids. Returns (tracklets, next_id).
    """
    kept = [d for d in detections if d.confidence >= cfg.min_confidence]
    if next_id is None:
        next_id = max((t.track_id for t in tracklets), default=-1) + 1
    assign = associate(tracklets, kept, cfg)

    updated = []
    matched_tracks = {ti: di for ti, di, _ in assign.matches}
    for ti, trk in enumerate(tracklets):
        if ti in matched_tracks:
            det = kept[matched_tracks[ti]]
            gap = max(1, det.frame - trk.last_frame)
            vx = (det.center[0] - trk.last_center[0]) / gap
            vy = (det.center[1] - trk.last_center[1]) / gap
            emb = (
                _EMB_KEEP * trk.embedding + (1.0 - _EMB_KEEP) * det.embedding
                if trk.embedding is not None
                else det.embedding.copy()
            )
            trk.last_center = det.center
            trk.velocity = (vx, vy)
            trk.embedding = emb
            trk.age_since_seen = 0
            trk.last_frame = det.frame
            trk.history.append((det.frame, det.center, det.box))
            updated.append(trk)
        else:
            trk.age_since_seen += 1
            if trk.age_since_seen <= cfg.max_age:
                updated.append(trk)

    for di in assign.unmatched_detections:
        det = kept[di]
        updated.append(
            Tracklet(
                track_id=next_id,
                last_center=det.center,
                velocity=(0.0, 0.0),
                embedding=det.embedding.copy(),
                age_since_seen=0,
                last_frame=det.frame,
                history=[(det.frame, det.center, det.box)],
            )
        )
        next_id += 1
    return updated, next_id


class Tracker:
    """Streams frames through step(), collecting per-observation output rows."""

    def __init__(self, cfg: AssocConfig = None):
        self.cfg = cfg or AssocConfig()
        self.tracklets = []
        self.next_id = 0
        self.rows = []  # (frame, track_id, cx, cy, w, h)

    def step(self, frame: int, detections: list) -> list:
        before = {t.track_id: len(t.history) for t in self.tracklets}
        self.tracklets, self.next_id = step(
            self.tracklets, detections, self.cfg, self.next_id
        )
        for t in self.tracklets:
            if t.history and len(t.history) != before.get(t.track_id, 0):
                f, (cx, cy), (w, h) = t.history[-1]
                self.rows.append((f, t.track_id, cx, cy, w, h))
        return self.tracklets

    def run(self, frames: dict) -> list:
        for frame in sorted(frames):
            self.step(frame, frames[frame])
        return self.rows


# ---------------------------------------------------------------------------
# Detection / track TSV formats
# ---------------------------------------------------------------------------

def write_detections(detections: list, path):
    """frame, cx, cy, w, h, confidence, then the embedding as float columns."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in sorted(detections, key=lambda d: d.frame):
            emb = "\t".join(f"{v:.9g}" for v in d.embedding)
            fh.write(
                f"{d.frame}\t{d.center[0]:.6g}\t{d.center[1]:.6g}\t"
                f"{d.box[0]:.6g}\t{d.box[1]:.6g}\t{d.confidence:.6g}\t{emb}\n"
            )


def read_detections(path) -> dict:
    """TSV -> {frame: [Detection, ...]} preserving file order within frames."""
    frames = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 7:
                raise ValueError(f"detections line {line_no}: expected >= 7 fields")
            det = Detection(
                frame=int(parts[0]),
                center=(float(parts[1]), float(parts[2])),
                box=(float(parts[3]), float(parts[4])),
                embedding=np.array([float(v) for v in parts[6:]]),
                confidence=float(parts[5]),
            )
            frames.setdefault(det.frame, []).append(det)
    return frames


def write_tracks(rows: list, path):
    with open(path, "w", encoding="utf-8") as fh:
        for frame, tid, cx, cy, w, h in rows:
            fh.write(f"{frame}\t{tid}\t{cx:.6g}\t{cy:.6g}\t{w:.6g}\t{h:.6g}\n")


def read_tracks(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            f, tid, cx, cy, w, h = line.split("\t")
            rows.append((int(f), int(tid), float(cx), float(cy), float(w), float(h)))
    return rows
