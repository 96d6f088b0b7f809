"""Four-space embedding head: angular-margin identity loss plus triplet loss.

A shared input feature is mapped by four parallel linear layers into unit-norm
embeddings (global, front, side, rear). Identity classification applies an
additive angular margin per space, fuses the per-space logits with the query's
view-area ratios using the same weighting as the ranking distance, halved, and
takes cross entropy. The triplet term sums per-space Euclidean hinges. All
gradients are analytic; area ratios are treated as frozen constants.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .masks import AreaRatios

SPACES = ("global", "front", "side", "rear")
_ACOS_EPS = 1e-7
MAGIC = b"REIDHD1\x00"

DEFAULT_D_SPACE = 128


class HeadFormatError(ValueError):
    """Bad magic, version, or record structure in a head parameter file."""


@dataclass
class SpaceEmbeddings:
    """Unit-norm embedding per space, rows in SPACES order."""

    vectors: np.ndarray  # (4, D)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(SPACES):
            raise ValueError(f"expected (4, D) embeddings, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embeddings must be finite")

    def __getitem__(self, space: str) -> np.ndarray:
        return self.vectors[SPACES.index(space)]

    @property
    def front(self) -> np.ndarray:
        return self.vectors[1]

    @property
    def side(self) -> np.ndarray:
        return self.vectors[2]

    @property
    def rear(self) -> np.ndarray:
        return self.vectors[3]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ArcFaceConfig:
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if not (0.0 <= self.margin < np.pi / 2):
            raise ValueError("margin must be in [0, pi/2)")


@dataclass
class LossConfig:
    lambda_id: float = 1.0
    lambda_triplet: float = 1.0
    triplet_margin: float = 0.3

    def __post_init__(self):
        if self.lambda_id < 0 or self.lambda_triplet < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda_id == 0 and self.lambda_triplet == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.triplet_margin < 0:
            raise ValueError("triplet margin must be >= 0")


@dataclass
class HeadParams:
    maps: np.ndarray  # (4, D_space, D_in)
    biases: np.ndarray  # (4, D_space)
    class_weights: np.ndarray  # (4, D_space, K), unit-norm columns

    @property
    def d_in(self) -> int:
        return self.maps.shape[2]

    @property
    def d_space(self) -> int:
        return self.maps.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[2]

    def copy(self) -> "HeadParams":
        return HeadParams(self.maps.copy(), self.biases.copy(), self.class_weights.copy())

    @staticmethod
    def zeros_like(other: "HeadParams") -> "HeadParams":
        return HeadParams(
            np.zeros_like(other.maps),
            np.zeros_like(other.biases),
            np.zeros_like(other.class_weights),
        )


def init_head(seed: int, d_in: int, d_space: int, num_classes: int) -> HeadParams:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / d_in)
    maps = rng.uniform(-limit, limit, size=(4, d_space, d_in))
    biases = np.zeros((4, d_space))
    cw = rng.normal(size=(4, d_space, num_classes))
    cw /= np.linalg.norm(cw, axis=1, keepdims=True)
    return HeadParams(maps, biases, cw)


# ---------------------------------------------------------------------------
# Forward maps
# ---------------------------------------------------------------------------

def _space_forward(params: HeadParams, feature: np.ndarray):
    """Returns (E, V, norms): unit embeddings, raw outputs, raw norms."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape != (params.d_in,):
        raise ValueError(f"feature dim {f.shape} != ({params.d_in},)")
    V = params.maps @ f + params.biases  # (4, D_space)
    norms = np.linalg.norm(V, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding before normalization")
    return V / norms[:, None], V, norms


def map_to_spaces(params: HeadParams, feature: np.ndarray) -> SpaceEmbeddings:
    """e_s = l2_normalize(W_s f + b_s) for each of the four spaces."""
    E, _, _ = _space_forward(params, feature)
    return SpaceEmbeddings(E)


def _embed_backward(feature, E, norms, dE):
    """Chain embedding grads through normalization and the linear map."""
    dV = (dE - E * np.sum(E * dE, axis=1, keepdims=True)) / norms[:, None]
    dmaps = dV[:, :, None] * feature[None, None, :]
    return dmaps, dV


def arcface_logits(
    class_weights: np.ndarray,
    embedding: np.ndarray,
    cfg: ArcFaceConfig,
    target_class: int = None,
) -> np.ndarray:
    """Scaled-cosine logits; additive angular margin on the target only.

    class_weights: (D, K) with unit-norm columns; embedding: unit-norm (D,).
    """
    cw = np.asarray(class_weights, dtype=np.float64)
    e = np.asarray(embedding, dtype=np.float64)
    if cw.ndim != 2 or e.shape != (cw.shape[0],):
        raise ValueError("embedding dim must match class-weight rows")
    k = cw.shape[1]
    cos = np.clip(e @ cw, -1.0 + _ACOS_EPS, 1.0 - _ACOS_EPS)
    logits = cfg.scale * cos
    if target_class is not None:
        if not (0 <= target_class < k):
            raise ValueError(f"target class {target_class} out of range [0, {k})")
        theta = np.arccos(cos[target_class])
        logits[target_class] = cfg.scale * np.cos(theta + cfg.margin)
    return logits


def fused_weights(area_ratios: AreaRatios) -> np.ndarray:
    """Space weights (1, AR_front, AR_side, AR_rear) used by ranking and loss."""
    return np.array([1.0, area_ratios.front, area_ratios.side, area_ratios.rear])


def id_loss(
    params: HeadParams,
    feature: np.ndarray,
    area_ratios: AreaRatios,
    target_index: int,
    cfg: ArcFaceConfig,
):
    """Cross entropy over view-fused angular-margin logits.

    Fused logit per class: (z_global + AR_f z_front + AR_s z_side +
    AR_r z_rear) / 2, margin applied to the target class in every space.
    Returns (loss, HeadParams-shaped grads).
    """
    k = params.num_classes
    if not (0 <= target_index < k):
        raise ValueError(f"target index {target_index} out of range [0, {k})")
    f = np.asarray(feature, dtype=np.float64)
    E, _, norms = _space_forward(params, f)

    cos_raw = np.einsum("sd,sdk->sk", E, params.class_weights)  # (4, K)
    c = np.clip(cos_raw, -1.0 + _ACOS_EPS, 1.0 - _ACOS_EPS)
    inside = (cos_raw > -1.0 + _ACOS_EPS) & (cos_raw < 1.0 - _ACOS_EPS)

    z = cfg.scale * c
    ct = c[:, target_index]
    sin_t = np.sqrt(1.0 - ct * ct)
    z[:, target_index] = cfg.scale * (ct * np.cos(cfg.margin) - sin_t * np.sin(cfg.margin))

    u = fused_weights(area_ratios)
    fused = (u @ z) / 2.0  # (K,)
    shifted = fused - fused.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    loss = float(-log_probs[target_index])

    dfused = np.exp(log_probs)
    dfused[target_index] -= 1.0
    dz = np.outer(u, dfused) / 2.0  # (4, K)
    dc = dz * cfg.scale
    # d cos(theta + m) / d cos(theta) = cos m + sin m * c / sqrt(1 - c^2)
    dc[:, target_index] *= np.cos(cfg.margin) + np.sin(cfg.margin) * ct / sin_t
    dc *= inside

    dE = np.einsum("sk,sdk->sd", dc, params.class_weights)
    dcw = E[:, :, None] * dc[:, None, :]
    dmaps, dbiases = _embed_backward(f, E, norms, dE)
    return loss, HeadParams(dmaps, dbiases, dcw)


def triplet_loss(
    anchor: SpaceEmbeddings,
    positive: SpaceEmbeddings,
    negative: SpaceEmbeddings,
    margin: float,
):
    """Sum over spaces of max(0, d(a,p) - d(a,n) + margin).

    Returns (loss, (dA, dP, dN)) with grads as (4, D) arrays; the hinge kink
    and the distance kink at coincident points both take subgradient 0.
    """
    A, P, N = anchor.vectors, positive.vectors, negative.vectors
    if not (A.shape == P.shape == N.shape):
        raise ValueError("embedding shapes differ")
    diff_p = A - P
    diff_n = A - N
    d_ap = np.linalg.norm(diff_p, axis=1)
    d_an = np.linalg.norm(diff_n, axis=1)
    terms = d_ap - d_an + margin
    active = terms > 0
    loss = float(terms[active].sum())

    dA = np.zeros_like(A)
    dP = np.zeros_like(P)
    dN = np.zeros_like(N)
    for s in range(len(SPACES)):
        if not active[s]:
            continue
        gp = diff_p[s] / d_ap[s] if d_ap[s] > 0 else np.zeros(A.shape[1])
        gn = diff_n[s] / d_an[s] if d_an[s] > 0 else np.zeros(A.shape[1])
        dA[s] = gp - gn
        dP[s] = -gp
        dN[s] = gn
    return loss, (dA, dP, dN)


def triplet_loss_params(
    params: HeadParams,
    anchor_feature: np.ndarray,
    positive_feature: np.ndarray,
    negative_feature: np.ndarray,
    margin: float,
):
    """Triplet loss with grads propagated into the linear maps of all branches."""
    packs = [
        _space_forward(params, np.asarray(f, dtype=np.float64))
        for f in (anchor_feature, positive_feature, negative_feature)
    ]
    embeds = [SpaceEmbeddings(E) for E, _, _ in packs]
    loss, dEs = triplet_loss(*embeds, margin=margin)
    grads = HeadParams.zeros_like(params)
    for (E, _, norms), feat, dE in zip(
        packs, (anchor_feature, positive_feature, negative_feature), dEs
    ):
        dmaps, dbiases = _embed_backward(np.asarray(feat, dtype=np.float64), E, norms, dE)
        grads.maps += dmaps
        grads.biases += dbiases
    return loss, grads


def total_loss(l_id: float, l_triplet: float, cfg: LossConfig) -> float:
    return cfg.lambda_id * l_id + cfg.lambda_triplet * l_triplet


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class HeadSample:
    feature: np.ndarray
    area_ratios: AreaRatios
    identity: int
    azimuth_deg: float


@dataclass
class HeadTrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    d_space: int = DEFAULT_D_SPACE
    arc: ArcFaceConfig = field(default_factory=ArcFaceConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class HeadTrainResult:
    params: HeadParams
    classes: list  # identity id per class index
    id_losses: list = field(default_factory=list)
    triplet_losses: list = field(default_factory=list)
    total_losses: list = field(default_factory=list)


def train_head(samples: list, cfg: HeadTrainConfig) -> HeadTrainResult:
    """Mini-batch SGD with momentum over identity + triplet losses.

    Positives share the anchor identity at a different azimuth; negatives are
    drawn from a uniformly chosen other identity. Class-weight columns are
    renormalized to unit length after every optimizer step.
    """
    if not samples:
        raise ValueError("empty training set")
    by_id = {}
    for i, s in enumerate(samples):
        by_id.setdefault(s.identity, []).append(i)
    if len(by_id) < 2:
        raise ValueError("need at least 2 identities")
    for ident, idxs in by_id.items():
        if len({samples[i].azimuth_deg for i in idxs}) < 2:
            raise ValueError(f"identity {ident} needs views at >= 2 azimuths")

    classes = sorted(by_id)
    cls_index = {ident: i for i, ident in enumerate(classes)}
    d_in = np.asarray(samples[0].feature).shape[0]
    params = init_head(cfg.seed, d_in, cfg.d_space, len(classes))
    vel = HeadParams.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)

    result = HeadTrainResult(params=params, classes=classes)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_id = 0.0
        epoch_tr = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = HeadParams.zeros_like(params)
            for i in batch:
                a = samples[i]
                l_id, g_id = id_loss(
                    params, a.feature, a.area_ratios, cls_index[a.identity], cfg.arc
                )
                pos_pool = [
                    j for j in by_id[a.identity]
                    if samples[j].azimuth_deg != a.azimuth_deg
                ]
                pos = samples[pos_pool[rng.integers(len(pos_pool))]]
                other_ids = [ident for ident in classes if ident != a.identity]
                neg_id = other_ids[rng.integers(len(other_ids))]
                neg = samples[by_id[neg_id][rng.integers(len(by_id[neg_id]))]]
                l_tr, g_tr = triplet_loss_params(
                    params, a.feature, pos.feature, neg.feature, cfg.loss.triplet_margin
                )
                epoch_id += l_id
                epoch_tr += l_tr
                grads.maps += cfg.loss.lambda_id * g_id.maps + cfg.loss.lambda_triplet * g_tr.maps
                grads.biases += cfg.loss.lambda_id * g_id.biases + cfg.loss.lambda_triplet * g_tr.biases
                grads.class_weights += cfg.loss.lambda_id * g_id.class_weights

            scale = 1.0 / len(batch)
            vel.maps = cfg.momentum * vel.maps - cfg.learning_rate * grads.maps * scale
            vel.biases = cfg.momentum * vel.biases - cfg.learning_rate * grads.biases * scale
            vel.class_weights = (
                cfg.momentum * vel.class_weights
                - cfg.learning_rate * grads.class_weights * scale
            )
            params.maps = params.maps + vel.maps
            params.biases = params.biases + vel.biases
            params.class_weights = params.class_weights + vel.class_weights
            params.class_weights /= np.linalg.norm(
                params.class_weights, axis=1, keepdims=True
            )
        result.id_losses.append(epoch_id / n)
        result.triplet_losses.append(epoch_tr / n)
        result.total_losses.append(
            total_loss(epoch_id / n, epoch_tr / n, cfg.loss)
        )
    result.params = params
    return result


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _write_record(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    shape4 = (1,) * (4 - arr.ndim) + arr.shape
    fh.write(struct.pack("<4i", *shape4))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise HeadFormatError("truncated record header")
    (nlen,) = struct.unpack("<I", head)
    nb = fh.read(nlen)
    if len(nb) != nlen:
        raise HeadFormatError("truncated record name")
    raw_shape = fh.read(16)
    if len(raw_shape) != 16:
        raise HeadFormatError("truncated record shape")
    shape = struct.unpack("<4i", raw_shape)
    if any(s <= 0 for s in shape):
        raise HeadFormatError(f"invalid record shape {shape}")
    count = int(np.prod(shape))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise HeadFormatError("truncated record payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return nb.decode("utf-8"), arr


def save_head(params: HeadParams, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", params.d_in, params.d_space, params.num_classes))
        for name in SPACES:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
        for i, name in enumerate(SPACES):
            _write_record(fh, f"{name}:map", params.maps[i])
            _write_record(fh, f"{name}:bias", params.biases[i])
            _write_record(fh, f"{name}:classes", params.class_weights[i])


def load_head(path) -> HeadParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise HeadFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw = fh.read(12)
        if len(raw) != 12:
            raise HeadFormatError("truncated header")
        d_in, d_space, k = struct.unpack("<3I", raw)
        for expected in SPACES:
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise HeadFormatError("truncated space list")
            (nlen,) = struct.unpack("<I", raw_len)
            name = fh.read(nlen).decode("utf-8")
            if name != expected:
                raise HeadFormatError(f"unexpected space order: {name!r}")
        records = {}
        order = []
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            records[rec[0]] = rec[1]
            order.append(rec[0])
    expected_order = []
    for name in SPACES:
        expected_order += [f"{name}:map", f"{name}:bias", f"{name}:classes"]
    if order != expected_order:
        raise HeadFormatError("unexpected record layout")
    maps = np.zeros((4, d_space, d_in))
    biases = np.zeros((4, d_space))
    cw = np.zeros((4, d_space, k))
    for i, name in enumerate(SPACES):
        m = records[f"{name}:map"].reshape(-1)
        if m.size != d_space * d_in:
            raise HeadFormatError(f"{name}: map size mismatch")
        maps[i] = m.reshape(d_space, d_in)
        b = records[f"{name}:bias"].reshape(-1)
        if b.size != d_space:
            raise HeadFormatError(f"{name}: bias size mismatch")
        biases[i] = b
        c = records[f"{name}:classes"].reshape(-1)
        if c.size != d_space * k:
            raise HeadFormatError(f"{name}: class-weight size mismatch")
        cw[i] = c.reshape(d_space, k)
    return HeadParams(maps, biases, cw)
