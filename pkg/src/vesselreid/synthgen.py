"""Deterministic procedural vessel dataset generator.

Identities are box-hull assemblies with per-identity notch patterns. Renders
are exact orthographic ray casts, so ground-truth foreground and view masks
partition each silhouette pixel-exactly. A seeded feature provider stands in
for a pretrained image backbone: features are a fixed random projection of
the shape parameters concatenated with view-weighted per-side components.

Azimuth convention: 0 deg bow-on, 90 deg beam-on, 180 deg stern-on. Port and
starboard are mirror images and share the single "side" view.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .masks import BitMask, GrayImage, ViewMaskSet, save_mask, save_pgm

BOW_AXIS = np.array([1.0, 0.0, 0.0])
DEFAULT_ELEVATION_DEG = 6.0
DEFAULT_IMAGE_SIZE = 192
DEFAULT_FEATURE_DIM = 384
DEFAULT_BUCKET_DEG = 11.25

# Scales of the raw-feature components. Identity evidence sits mostly in the
# per-side components, whose visibility weights vary with azimuth; the shape
# parameters add a weak azimuth-independent signal. Without noise, identity
# separation still dominates cross-azimuth variation.
_PARAM_SCALE = 0.1
_VIEW_SCALE = 1.0
_IDENT_DESC_DIM = 24

_SUPER_SLOTS = 4
_NOTCH_SLOTS = 4


class RenderError(ValueError):
    """Degenerate projection or invalid render request."""


@dataclass
class Box3:
    """Axis-aligned box in vessel coordinates."""

    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float


@dataclass
class VesselShape:
    """Procedural vessel: raked box hull, deck boxes, and notch cutouts.

    Superstructure boxes and notches are bilaterally symmetric in y, so a
    view from azimuth theta mirrors the view from -theta exactly.
    """

    identity_id: int
    hull_length: float
    hull_beam: float
    hull_height: float
    bow_rake_deg: float
    superstructures: list  # list[Box3] on deck, y-centered
    notches: list  # list[Box3] through-cuts subtracted from the hull

    def __post_init__(self):
        if min(self.hull_length, self.hull_beam, self.hull_height) <= 0:
            raise ValueError("hull dimensions must be positive")
        if not (1 <= len(self.superstructures) <= 4):
            raise ValueError("expected 1..4 superstructure boxes")

    def param_vector(self) -> np.ndarray:
        """Normalized shape parameters, zero-padded to a fixed layout."""
        vals = [
            self.hull_length / 5.0,
            self.hull_beam / 1.5,
            self.hull_height / 1.2,
            self.bow_rake_deg / 45.0,
        ]
        for i in range(_SUPER_SLOTS):
            if i < len(self.superstructures):
                b = self.superstructures[i]
                vals += [b.x0 / self.hull_length, b.x1 / self.hull_length,
                         b.y1 / self.hull_beam, (b.z1 - b.z0) / self.hull_height]
            else:
                vals += [0.0, 0.0, 0.0, 0.0]
        for i in range(_NOTCH_SLOTS):
            if i < len(self.notches):
                b = self.notches[i]
                vals += [b.x0 / self.hull_length, b.x1 / self.hull_length,
                         b.z0 / self.hull_height, b.z1 / self.hull_height]
            else:
                vals += [0.0, 0.0, 0.0, 0.0]
        return np.array(vals, dtype=np.float64)


@dataclass
class RenderedSample:
    """One render plus its pixel-exact ground truth."""

    image: GrayImage
    fg: BitMask
    views: ViewMaskSet
    identity_id: int
    azimuth_deg: float
    shape: VesselShape


def make_identity(seed: int) -> VesselShape:
    """Draw a deterministic vessel shape; distinct seeds give distinct shapes."""
    rng = np.random.default_rng(seed)
    length = rng.uniform(3.0, 5.0)
    beam = rng.uniform(0.8, 1.4)
    height = rng.uniform(0.7, 1.1)
    rake = rng.uniform(10.0, 40.0)

    # Partition the deck into alternating slots for superstructures and
    # notches so cutouts never undermine a deck box.
    n_super = int(rng.integers(1, 4))
    n_notch = int(rng.integers(2, 5))
    n_slots = n_super + n_notch
    edges = np.linspace(0.06 * length, 0.88 * length, n_slots + 1)
    slot_kind = ["super"] * n_super + ["notch"] * n_notch
    rng.shuffle(slot_kind)

    supers, notches = [], []
    for k, kind in enumerate(slot_kind):
        lo, hi = edges[k], edges[k + 1]
        span = hi - lo
        x0 = lo + rng.uniform(0.05, 0.25) * span
        x1 = hi - rng.uniform(0.05, 0.25) * span
        if kind == "super":
            half_w = 0.5 * beam * rng.uniform(0.45, 0.8)
            top = height + rng.uniform(0.3, 0.7) * height
            supers.append(Box3(x0, x1, -half_w, half_w, height, top))
        else:
            depth = rng.uniform(0.15, 0.38) * height
            # Through-cut across the full beam at the deck edge.
            notches.append(Box3(x0, x1, -beam, beam, height - depth, height + 2.0))
    return VesselShape(
        identity_id=seed,
        hull_length=length,
        hull_beam=beam,
        hull_height=height,
        bow_rake_deg=rake,
        superstructures=supers,
        notches=notches,
    )


# ---------------------------------------------------------------------------
# Orthographic ray casting
# ---------------------------------------------------------------------------

@dataclass
class _Convex:
    normals: np.ndarray  # (m, 3) unit outward normals of a . p <= b faces
    offsets: np.ndarray  # (m,)


def _box_convex(b: Box3) -> _Convex:
    normals = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=np.float64,
    )
    offsets = np.array([b.x1, -b.x0, b.y1, -b.y0, b.z1, -b.z0], dtype=np.float64)
    return _Convex(normals, offsets)


def _hull_convex(shape: VesselShape) -> _Convex:
    tan_r = np.tan(np.radians(shape.bow_rake_deg))
    rake = np.array([1.0, 0.0, -tan_r])
    rake /= np.linalg.norm(rake)
    # Rake plane passes through (L, y, H); deck overhangs the keel.
    rake_off = float(rake @ np.array([shape.hull_length, 0.0, shape.hull_height]))
    normals = np.array(
        [
            rake,
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ],
        dtype=np.float64,
    )
    offsets = np.array(
        [rake_off, 0.0, shape.hull_beam / 2, shape.hull_beam / 2, shape.hull_height, 0.0],
        dtype=np.float64,
    )
    return _Convex(normals, offsets)


def _hull_vertices(shape: VesselShape) -> np.ndarray:
    L, B, H = shape.hull_length, shape.hull_beam, shape.hull_height
    keel_bow = L - H * np.tan(np.radians(shape.bow_rake_deg))
    pts = [
        (0, -B / 2, 0), (0, B / 2, 0), (0, -B / 2, H), (0, B / 2, H),
        (keel_bow, -B / 2, 0), (keel_bow, B / 2, 0), (L, -B / 2, H), (L, B / 2, H),
    ]
    for b in shape.superstructures:
        for x in (b.x0, b.x1):
            for y in (b.y0, b.y1):
                for z in (b.z0, b.z1):
                    pts.append((x, y, z))
    return np.array(pts, dtype=np.float64)


def _ray_slab(convex: _Convex, origins: np.ndarray, d: np.ndarray):
    """Intersect parallel rays with a convex solid.

    Returns (hit, t_in, t_out, entry_idx, exit_idx) with plane indices into
    convex.normals for the entry and exit faces.
    """
    denom = convex.normals @ d  # (m,)
    num = convex.offsets[:, None] - convex.normals @ origins.T  # (m, P)
    P = origins.shape[0]
    lowers = np.full((len(denom), P), -np.inf)
    uppers = np.full((len(denom), P), np.inf)
    ok = np.ones(P, dtype=bool)
    for k, dk in enumerate(denom):
        if dk < -1e-12:
            lowers[k] = num[k] / dk
        elif dk > 1e-12:
            uppers[k] = num[k] / dk
        else:
            ok &= num[k] >= -1e-12
    t_in = lowers.max(axis=0)
    entry_idx = lowers.argmax(axis=0)
    t_out = uppers.min(axis=0)
    exit_idx = uppers.argmin(axis=0)
    hit = ok & (t_in <= t_out + 1e-12)
    return hit, t_in, t_out, entry_idx, exit_idx


def _camera_frame(azimuth_deg: float, elevation_deg: float):
    a = np.radians(azimuth_deg)
    e = np.radians(elevation_deg)
    # Direction from camera into the scene.
    d = -np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    right = np.array([np.sin(a), -np.cos(a), 0.0])
    up = np.cross(d, right)
    return d, right, up


def render_view(
    shape: VesselShape,
    azimuth_deg: float,
    image_size: int = DEFAULT_IMAGE_SIZE,
    elevation_deg: float = DEFAULT_ELEVATION_DEG,
    pixel_noise_sigma: float = 4.0,
    seed: int = 0,
) -> RenderedSample:
    """Orthographic render with exact per-pixel view classification.

    Each visible surface is classified by its outward normal: within 90 deg
    of the bow axis is front, of the stern axis is rear, otherwise side.
    """
    if image_size < 64:
        raise RenderError(f"image_size must be >= 64, got {image_size}")
    W = int(image_size)
    d, right, up = _camera_frame(azimuth_deg, elevation_deg)

    verts = _hull_vertices(shape)
    top = float(verts[:, 2].max())
    center = np.array([shape.hull_length / 2.0, 0.0, top / 2.0])
    rel = verts - center
    s_vals = rel @ right
    t_vals = rel @ up
    span_s = 2.0 * float(np.abs(s_vals).max())
    span_t = float(t_vals.max() - t_vals.min())
    span = max(span_s, span_t)
    if not np.isfinite(span) or span <= 1e-9:
        raise RenderError("degenerate projection: vessel collapses to a point")
    wpp = span / (W * 0.8)  # world units per pixel, 10% margin each side
    t_center = 0.5 * float(t_vals.max() + t_vals.min())

    cols = (np.arange(W) + 0.5 - W / 2.0) * wpp
    rows = (W / 2.0 - np.arange(W) - 0.5) * wpp + t_center
    S, T = np.meshgrid(cols, rows)  # (W, W) row-major
    back = 4.0 * max(shape.hull_length, top) + 10.0
    origins = (
        center[None, :]
        + S.reshape(-1, 1) * right[None, :]
        + T.reshape(-1, 1) * up[None, :]
        - back * d[None, :]
    )
    P = origins.shape[0]

    hull = _hull_convex(shape)
    h_hit, h_tin, h_tout, h_entry, _ = _ray_slab(hull, origins, d)
    entry_t = h_tin.copy()
    entry_n = hull.normals[h_entry].copy()
    active = h_hit.copy()

    notch_data = []
    for nb in shape.notches:
        conv = _box_convex(nb)
        notch_data.append((conv, *_ray_slab(conv, origins, d)))
    # A ray entering the hull inside a cutout resurfaces at the cutout's
    # exit wall; repeat to a fixpoint since a ray may cross several cutouts.
    for _ in range(len(shape.notches) + 1):
        for conv, n_hit, n_tin, n_tout, _, n_exit in notch_data:
            inside = active & n_hit & (entry_t >= n_tin - 1e-9) & (entry_t <= n_tout - 1e-9)
            if not inside.any():
                continue
            entry_t[inside] = n_tout[inside]
            entry_n[inside] = -conv.normals[n_exit[inside]]
    active &= entry_t <= h_tout + 1e-9

    cand_t = [np.where(active, entry_t, np.inf)]
    cand_n = [entry_n]
    for sb in shape.superstructures:
        conv = _box_convex(sb)
        s_hit, s_tin, _, s_entry, _ = _ray_slab(conv, origins, d)
        cand_t.append(np.where(s_hit, s_tin, np.inf))
        cand_n.append(conv.normals[s_entry])
    cand_t = np.stack(cand_t)  # (n_solids, P)
    best = cand_t.argmin(axis=0)
    fg_flat = np.isfinite(cand_t.min(axis=0))
    normals = np.zeros((P, 3))
    for i, n_arr in enumerate(cand_n):
        sel = best == i
        normals[sel] = n_arr[sel]

    nx = normals[:, 0]
    front_flat = fg_flat & (nx > 1e-9)
    rear_flat = fg_flat & (nx < -1e-9)
    side_flat = fg_flat & ~front_flat & ~rear_flat

    fg = BitMask(fg_flat.reshape(W, W))
    views = ViewMaskSet(
        front=BitMask(front_flat.reshape(W, W)),
        side=BitMask(side_flat.reshape(W, W)),
        rear=BitMask(rear_flat.reshape(W, W)),
    )
    if fg.area() == 0:
        raise RenderError("degenerate projection: vessel fully out of frame")

    img = _shade(shape, fg_flat, normals, rows, center, up, wpp, W,
                 pixel_noise_sigma, seed, azimuth_deg)
    return RenderedSample(
        image=img, fg=fg, views=views,
        identity_id=shape.identity_id, azimuth_deg=float(azimuth_deg), shape=shape,
    )


def _shade(shape, fg_flat, normals, rows, center, up, wpp, W,
           noise_sigma, seed, azimuth_deg):
    """Bright lambertian hull over a sky/water gradient background."""
    rng = np.random.default_rng(
        [seed & 0x7FFFFFFF, shape.identity_id & 0x7FFFFFFF, int(round(azimuth_deg * 1000)) & 0x7FFFFFFF]
    )
    light = np.array([0.42, 0.27, 0.86])
    light /= np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, 1.0)
    ident_tone = 12.0 * (_identity_rng(shape, "tone").uniform() - 0.5)

    horizon_t = -center[2] * up[2]  # projection of the waterline plane z=0
    row_t = np.repeat(rows, W)
    img = np.empty(W * W, dtype=np.float64)
    above = row_t >= horizon_t
    # Sky brightens toward the top, water darkens toward the bottom.
    img[above] = 72.0 + 60.0 * (row_t[above] - horizon_t) / (W * wpp)
    below = ~above
    img[below] = 46.0 - 55.0 * (horizon_t - row_t[below]) / (W * wpp)
    ripple = 5.0 * np.sin(np.tile(np.arange(W), W) * 0.31 + row_t * 2.1)
    img[below] += ripple[below]
    img[fg_flat] = 150.0 + 72.0 * lambert[fg_flat] + ident_tone
    img += rng.normal(0.0, noise_sigma, size=img.shape)
    return GrayImage(np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(W, W))


# ---------------------------------------------------------------------------
# Synthetic backbone features
# ---------------------------------------------------------------------------

@dataclass
class FeatureConfig:
    dim: int = DEFAULT_FEATURE_DIM
    noise_sigma: float = 0.18
    bucket_deg: float = DEFAULT_BUCKET_DEG


def view_weights(azimuth_deg: float) -> np.ndarray:
    """Visibility weights (front, side, rear) for an azimuth in degrees."""
    a = np.radians(azimuth_deg)
    return np.array([max(0.0, np.cos(a)), abs(np.sin(a)), max(0.0, -np.cos(a))])


def azimuth_bucket(azimuth_deg: float, bucket_deg: float) -> int:
    return int(np.floor((azimuth_deg % 360.0) / bucket_deg))


def _identity_rng(shape: VesselShape, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(
        shape.param_vector().tobytes() + label.encode("utf-8"), digest_size=16
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def backbone_features(
    shape: VesselShape,
    azimuth_deg: float,
    seed: int,
    cfg: FeatureConfig = FeatureConfig(),
) -> np.ndarray:
    """Deterministic stand-in for a pretrained image-feature backbone.

    The raw descriptor concatenates the shape parameters with per-side
    identity directions weighted by the visibility of that side at the
    sample's azimuth bucket. A projection matrix fixed by `seed` mixes the
    descriptor into `cfg.dim` dimensions; bucket-seeded Gaussian noise is
    added on top, so equal (identity, bucket, seed) always yields the
    identical vector.
    """
    bucket = azimuth_bucket(azimuth_deg, cfg.bucket_deg)
    w = view_weights((bucket + 0.5) * cfg.bucket_deg)

    ident = shape.param_vector() * _PARAM_SCALE
    sides = [
        w[i] * _VIEW_SCALE * _unit(_identity_rng(shape, name), _IDENT_DESC_DIM)
        for i, name in enumerate(("front", "side", "rear"))
    ]
    raw = np.concatenate([ident] + sides)

    proj_rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xFEA7])
    proj = proj_rng.normal(0.0, 1.0 / np.sqrt(raw.size), size=(cfg.dim, raw.size))
    feat = proj @ raw
    if cfg.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(
            [seed & 0x7FFFFFFF, shape.identity_id & 0x7FFFFFFF, bucket, 0x5EED]
        )
        feat = feat + noise_rng.normal(0.0, cfg.noise_sigma, size=feat.shape)
    return feat


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    identities: int = 20
    azimuths: int = 8
    image_size: int = DEFAULT_IMAGE_SIZE
    feature_noise_sigma: float = 0.18
    pixel_noise_sigma: float = 4.0
    elevation_deg: float = DEFAULT_ELEVATION_DEG
    feature_dim: int = DEFAULT_FEATURE_DIM
    bucket_deg: float = DEFAULT_BUCKET_DEG
    seed: int = 0


@dataclass
class ManifestRow:
    image_path: str
    fg_path: str
    front_path: str
    side_path: str
    rear_path: str
    identity_id: int
    azimuth_deg: float
    split: str


_MANIFEST_COLUMNS = (
    "image_path", "fg_path", "front_path", "side_path", "rear_path",
    "identity_id", "azimuth_deg", "split",
)


def dataset_azimuths(n: int) -> list:
    """Evenly spaced azimuths over [0, 180); the far half mirrors this range."""
    return [i * 180.0 / n for i in range(n)]


def identity_seed(dataset_seed: int, index: int) -> int:
    return dataset_seed * 1_000_003 + index + 1


def identity_shape(cfg: SynthConfig, index: int) -> VesselShape:
    shape = make_identity(identity_seed(cfg.seed, index))
    shape.identity_id = index
    return shape


def make_dataset(cfg: SynthConfig, out_dir) -> list:
    """Render every (identity, azimuth) pair and write a TSV manifest.

    Even-indexed azimuths form the train split; odd-indexed azimuths are the
    held-out test split. Returns the manifest rows.
    """
    if cfg.identities < 2:
        raise ValueError("need at least 2 identities")
    out_dir = str(out_dir)
    images_dir = os.path.join(out_dir, "images")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)

    rows = []
    for ident in range(cfg.identities):
        shape = identity_shape(cfg, ident)
        for k, az in enumerate(dataset_azimuths(cfg.azimuths)):
            sample = render_view(
                shape, az,
                image_size=cfg.image_size,
                elevation_deg=cfg.elevation_deg,
                pixel_noise_sigma=cfg.pixel_noise_sigma,
                seed=cfg.seed,
            )
            stem = f"id{ident:03d}_az{az:07.3f}"
            rel_img = f"images/{stem}.pgm"
            rel = {
                "fg": f"masks/{stem}_fg.pgm",
                "front": f"masks/{stem}_front.pgm",
                "side": f"masks/{stem}_side.pgm",
                "rear": f"masks/{stem}_rear.pgm",
            }
            save_pgm(sample.image, os.path.join(out_dir, rel_img))
            save_mask(sample.fg, os.path.join(out_dir, rel["fg"]))
            save_mask(sample.views.front, os.path.join(out_dir, rel["front"]))
            save_mask(sample.views.side, os.path.join(out_dir, rel["side"]))
            save_mask(sample.views.rear, os.path.join(out_dir, rel["rear"]))
            rows.append(ManifestRow(
                image_path=rel_img,
                fg_path=rel["fg"],
                front_path=rel["front"],
                side_path=rel["side"],
                rear_path=rel["rear"],
                identity_id=ident,
                azimuth_deg=az,
                split="train" if k % 2 == 0 else "test",
            ))

    with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(
                f"{r.image_path}\t{r.fg_path}\t{r.front_path}\t{r.side_path}\t"
                f"{r.rear_path}\t{r.identity_id}\t{r.azimuth_deg:.4f}\t{r.split}\n"
            )
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows


def read_manifest(dataset_dir) -> list:
    rows = []
    with open(os.path.join(str(dataset_dir), "manifest.tsv"), encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(_MANIFEST_COLUMNS):
                raise ValueError(f"manifest line {line_no}: expected "
                                 f"{len(_MANIFEST_COLUMNS)} fields, got {len(parts)}")
            rows.append(ManifestRow(
                image_path=parts[0], fg_path=parts[1], front_path=parts[2],
                side_path=parts[3], rear_path=parts[4],
                identity_id=int(parts[5]), azimuth_deg=float(parts[6]), split=parts[7],
            ))
    return rows


def read_dataset_config(dataset_dir) -> SynthConfig:
    with open(os.path.join(str(dataset_dir), "config.json"), encoding="utf-8") as fh:
        payload = json.load(fh)
    return SynthConfig(**payload)


class SyntheticFeatureProvider:
    """Recomputes backbone features for manifest rows of a generated dataset."""

    def __init__(self, dataset_dir):
        self.dataset_dir = str(dataset_dir)
        self.cfg = read_dataset_config(dataset_dir)
        self._shapes = {}

    def shape(self, identity_id: int) -> VesselShape:
        if identity_id not in self._shapes:
            self._shapes[identity_id] = identity_shape(self.cfg, identity_id)
        return self._shapes[identity_id]

    def features(self, row: ManifestRow) -> np.ndarray:
        fc = FeatureConfig(
            dim=self.cfg.feature_dim,
            noise_sigma=self.cfg.feature_noise_sigma,
            bucket_deg=self.cfg.bucket_deg,
        )
        return backbone_features(self.shape(row.identity_id), row.azimuth_deg,
                                 self.cfg.seed, fc)
