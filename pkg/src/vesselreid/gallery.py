"""Dynamic identity gallery: enrollment, persistence, and fused ranking.

A query is scored against each enrolled identity by taking, per space, the
minimum L2 distance to that identity's entries, then fusing the four
per-space distances as {D_global + D_front*AR_front + D_side*AR_side +
D_rear*AR_rear} / 2, where the area ratios come from the QUERY image. Low
visibility of a side suppresses its (unreliable) space.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .head import SPACES, SpaceEmbeddings
from .masks import AreaRatios

MAGIC = b"REIDGAL1"
VERSION = 1

FUSION_MODES = ("all_views", "largest_view", "global_only")
DEFAULT_ENROLL_THRESHOLD = 0.35

_UNIT_ATOL = 1e-4


class GalleryFormatError(ValueError):
    """Bad magic, version, or record structure in a gallery file."""


@dataclass
class GalleryEntry:
    identity_id: int
    embeddings: SpaceEmbeddings
    area_ratios: AreaRatios
    tag: str = ""


@dataclass
class RankedList:
    """(identity_id, total_distance) ascending; ties broken by ascending id."""

    items: list

    def __post_init__(self):
        dists = [d for _, d in self.items]
        if any(b < a for a, b in zip(dists, dists[1:])):
            raise ValueError("distances must be non-decreasing")
        ids = [i for i, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("identity ids must be unique")

    def best(self):
        return self.items[0]

    def identities(self) -> list:
        return [i for i, _ in self.items]


@dataclass
class ReidDecision:
    status: str  # "matched" or "enrolled"
    identity_id: int
    distance: float = None


@dataclass
class GalleryDB:
    d_space: int = None
    entries: list = field(default_factory=list)
    version: int = VERSION

    def insert(self, entry: GalleryEntry):
        dim = entry.embeddings.dim
        if self.d_space is None:
            self.d_space = dim
        elif dim != self.d_space:
            raise ValueError(f"embedding dim {dim} != gallery dim {self.d_space}")
        norms = np.linalg.norm(entry.embeddings.vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=_UNIT_ATOL):
            raise ValueError("entry embeddings must be unit-norm per space")
        self.entries.append(entry)

    def remove_identity(self, identity_id: int):
        kept = [e for e in self.entries if e.identity_id != identity_id]
        if len(kept) == len(self.entries):
            raise KeyError(f"unknown identity {identity_id}")
        self.entries = kept

    def identities(self) -> list:
        return sorted({e.identity_id for e in self.entries})

    def entries_for(self, identity_id: int) -> list:
        found = [e for e in self.entries if e.identity_id == identity_id]
        if not found:
            raise KeyError(f"unknown identity {identity_id}")
        return found


def fusion_weights(area_ratios: AreaRatios, mode: str = "all_views") -> np.ndarray:
    """Space weights (global, front, side, rear) for a fusion mode.

    largest_view keeps only the side space with the maximal area ratio (plus
    global); ties resolve to the first of (front, side, rear).
    """
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    ar = area_ratios.as_array()
    if mode == "global_only":
        return np.array([1.0, 0.0, 0.0, 0.0])
    if mode == "largest_view":
        w = np.zeros(4)
        w[0] = 1.0
        m = int(np.argmax(ar))
        w[1 + m] = ar[m]
        return w
    return np.concatenate([[1.0], ar])


def _space_distances(query: SpaceEmbeddings, entries: list) -> np.ndarray:
    """Per-space min distance over an identity's entries, shape (4,)."""
    stack = np.stack([e.embeddings.vectors for e in entries])  # (n, 4, D)
    return np.linalg.norm(stack - query.vectors[None], axis=2).min(axis=0)


def distance_total(
    query: SpaceEmbeddings,
    query_ar: AreaRatios,
    db: GalleryDB,
    identity_id: int,
    mode: str = "all_views",
) -> float:
    """Fused distance of a query to one enrolled identity."""
    d = _space_distances(query, db.entries_for(identity_id))
    return float(fusion_weights(query_ar, mode) @ d / 2.0)


def rank(
    query: SpaceEmbeddings,
    query_ar: AreaRatios,
    db: GalleryDB,
    mode: str = "all_views",
) -> RankedList:
    """All identities by ascending fused distance; ties by ascending id."""
    if not db.entries:
        raise ValueError("empty gallery")
    w = fusion_weights(query_ar, mode)
    scored = []
    for ident in db.identities():
        d = _space_distances(query, db.entries_for(ident))
        scored.append((ident, float(w @ d / 2.0)))
    scored.sort(key=lambda t: (t[1], t[0]))
    return RankedList(scored)


def rank_entries(
    query: SpaceEmbeddings,
    query_ar: AreaRatios,
    db: GalleryDB,
    mode: str = "all_views",
) -> list:
    """Per gallery-image ranking: (entry_index, identity_id, distance) ascending.

    Each entry is scored with its own fused distance (no per-identity min);
    this is the image-granularity ranking used for average precision.
    """
    if not db.entries:
        raise ValueError("empty gallery")
    w = fusion_weights(query_ar, mode)
    stack = np.stack([e.embeddings.vectors for e in db.entries])  # (n, 4, D)
    dists = np.linalg.norm(stack - query.vectors[None], axis=2) @ w / 2.0
    order = sorted(
        range(len(db.entries)),
        key=lambda i: (dists[i], db.entries[i].identity_id, i),
    )
    return [(i, db.entries[i].identity_id, float(dists[i])) for i in order]


def reid(
    query: SpaceEmbeddings,
    query_ar: AreaRatios,
    db: GalleryDB,
    enroll_threshold: float = DEFAULT_ENROLL_THRESHOLD,
    tag: str = "",
    mode: str = "all_views",
) -> ReidDecision:
    """Match against the gallery or enroll the query as a fresh identity."""
    if enroll_threshold <= 0:
        raise ValueError("enroll_threshold must be > 0")
    if db.entries:
        ranked = rank(query, query_ar, db, mode)
        best_id, best_dist = ranked.best()
        if best_dist <= enroll_threshold:
            return ReidDecision("matched", best_id, best_dist)
        new_id = max(db.identities()) + 1
    else:
        best_dist = None
        new_id = 0
    db.insert(GalleryEntry(new_id, query, query_ar, tag))
    return ReidDecision("enrolled", new_id, best_dist)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save(db: GalleryDB, path):
    if db.d_space is None:
        raise ValueError("cannot save a gallery with no dimension set")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", db.version, db.d_space, len(db.entries)))
        for e in db.entries:
            fh.write(struct.pack("<q", e.identity_id))
            fh.write(np.ascontiguousarray(e.embeddings.vectors, dtype="<f4").tobytes())
            fh.write(
                np.array(
                    [e.area_ratios.front, e.area_ratios.side, e.area_ratios.rear],
                    dtype="<f4",
                ).tobytes()
            )
            tag = e.tag.encode("utf-8")
            fh.write(struct.pack("<I", len(tag)))
            fh.write(tag)


def load(path) -> GalleryDB:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise GalleryFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(12)
        if len(raw) != 12:
            raise GalleryFormatError("truncated header")
        version, d_space, count = struct.unpack("<3I", raw)
        if version != VERSION:
            raise GalleryFormatError(f"unsupported version {version}")
        db = GalleryDB(d_space=int(d_space))
        for _ in range(count):
            head = fh.read(8)
            if len(head) != 8:
                raise GalleryFormatError("truncated entry id")
            (ident,) = struct.unpack("<q", head)
            vec_bytes = fh.read(4 * 4 * d_space)
            if len(vec_bytes) != 4 * 4 * d_space:
                raise GalleryFormatError("truncated entry embeddings")
            vectors = np.frombuffer(vec_bytes, dtype="<f4").reshape(
                len(SPACES), d_space
            ).astype(np.float64)
            ar_bytes = fh.read(12)
            if len(ar_bytes) != 12:
                raise GalleryFormatError("truncated entry area ratios")
            arf, ars, arr = np.frombuffer(ar_bytes, dtype="<f4").astype(np.float64)
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise GalleryFormatError("truncated tag length")
            (tlen,) = struct.unpack("<I", raw_len)
            tag_bytes = fh.read(tlen)
            if len(tag_bytes) != tlen:
                raise GalleryFormatError("truncated tag")
            db.entries.append(
                GalleryEntry(
                    identity_id=int(ident),
                    embeddings=SpaceEmbeddings(vectors),
                    area_ratios=AreaRatios(float(arf), float(ars), float(arr)),
                    tag=tag_bytes.decode("utf-8"),
                )
            )
        trailing = fh.read(1)
        if trailing:
            raise GalleryFormatError("trailing bytes after last entry")
    return db
