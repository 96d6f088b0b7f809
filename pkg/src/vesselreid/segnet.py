"""Encoder-decoder foreground segmenter with hand-rolled backprop.

Fixed architecture: nine 3x3 same-padding convolutions (3->16, 16->8, five
8->8, 8->16, 16->1), four 2x2 max pools, four 2x nearest upsamples, and three
additive skips joining encoder activations to the matching decoder scale.
ReLU after every convolution except the last, which feeds a sigmoid. All
arithmetic is double precision; files store float32.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .masks import BitMask, GrayImage, binarize

INPUT_SIZE = 192
MAGIC = b"SEGNET1\x00"

# (name, in_channels, out_channels) in forward order.
CONV_LAYERS = (
    ("conv2d", 3, 16),
    ("conv2d_1", 16, 8),
    ("conv2d_2", 8, 8),
    ("conv2d_3", 8, 8),
    ("conv2d_4", 8, 8),
    ("conv2d_5", 8, 8),
    ("conv2d_6", 8, 8),
    ("conv2d_7", 8, 16),
    ("conv2d_8", 16, 1),
)
LAYER_NAMES = tuple(name for name, _, _ in CONV_LAYERS)

_CLAMP_LO = 1e-7
_CLAMP_HI = 1.0 - 1e-7


class SegNetFormatError(ValueError):
    """Bad magic, version, or record structure in a parameter file."""


@dataclass
class SegNetParams:
    kernels: dict  # name -> (3, 3, Cin, Cout) float64
    biases: dict  # name -> (Cout,) float64

    def copy(self) -> "SegNetParams":
        return SegNetParams(
            kernels={k: v.copy() for k, v in self.kernels.items()},
            biases={k: v.copy() for k, v in self.biases.items()},
        )


@dataclass
class SegTrainConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    binarize_threshold: float = 0.5
    image_size: int = INPUT_SIZE  # working resolution; any positive multiple of 16

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError("image_size must be a positive multiple of 16")


@dataclass
class SegTrainResult:
    params: SegNetParams
    epoch_losses: list = field(default_factory=list)


def init_params(seed: int) -> SegNetParams:
    """Uniform fan-in-scaled kernels (limit sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    kernels, biases = {}, {}
    for name, cin, cout in CONV_LAYERS:
        limit = np.sqrt(6.0 / (9 * cin))
        kernels[name] = rng.uniform(-limit, limit, size=(3, 3, cin, cout))
        biases[name] = np.zeros(cout)
    return SegNetParams(kernels, biases)


def param_count(params: SegNetParams) -> int:
    return sum(k.size for k in params.kernels.values()) + sum(
        b.size for b in params.biases.values()
    )


# ---------------------------------------------------------------------------
# Layer primitives (forward + backward)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, H, W, 3, 3, C))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di:di + H, dj:dj + W, :]
    return cols.reshape(B * H * W, 9 * C)


def _conv_forward(x, kernel, bias):
    B, H, W, _ = x.shape
    cout = kernel.shape[3]
    out = _im2col(x) @ kernel.reshape(-1, cout) + bias
    return out.reshape(B, H, W, cout)


def _conv_backward(x, kernel, dout):
    B, H, W, C = x.shape
    cout = kernel.shape[3]
    dflat = dout.reshape(-1, cout)
    cols = _im2col(x)
    dk = (cols.T @ dflat).reshape(kernel.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ kernel.reshape(-1, cout).T).reshape(B, H, W, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + H, dj:dj + W, :] += dcols[:, :, :, di, dj, :]
    return dk, db, dxp[:, 1:H + 1, 1:W + 1, :]


def _pool_forward(x):
    B, H, W, C = x.shape
    xw = (
        x.reshape(B, H // 2, 2, W // 2, 2, C)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, H // 2, W // 2, C, 4)
    )
    idx = xw.argmax(axis=4)  # first max wins on ties
    out = np.take_along_axis(xw, idx[..., None], axis=4)[..., 0]
    return out, idx


def _pool_backward(idx, dout, in_shape):
    B, H, W, C = in_shape
    dw = np.zeros((B, H // 2, W // 2, C, 4))
    np.put_along_axis(dw, idx[..., None], dout[..., None], axis=4)
    return (
        dw.reshape(B, H // 2, W // 2, C, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(B, H, W, C)
    )


def _up_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_backward(dout):
    B, H2, W2, C = dout.shape
    return dout.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Network forward / backward
# ---------------------------------------------------------------------------

def _check_input(x: np.ndarray):
    if x.ndim != 4 or x.shape[3] != 3:
        raise ValueError(f"expected input (B, H, W, 3), got {x.shape}")
    if x.shape[1] % 16 != 0 or x.shape[2] % 16 != 0 or min(x.shape[1:3]) < 16:
        raise ValueError(
            f"spatial dims must be multiples of 16 (four 2x2 pools), got {x.shape}"
        )


def _forward_core(params, x, trace=None):
    """Run the network; returns (probs, cache-for-backward)."""
    _check_input(x)
    k, b = params.kernels, params.biases

    def tr(name, kind, tensor):
        if trace is not None:
            trace.append((name, kind, tuple(tensor.shape)))

    tr("input", "InputLayer", x)
    z0 = _conv_forward(x, k["conv2d"], b["conv2d"])
    a0 = np.maximum(z0, 0.0)
    tr("conv2d", "Conv2D", a0)
    p0, i0 = _pool_forward(a0)
    tr("max_pooling2d", "MaxPooling2D", p0)
    z1 = _conv_forward(p0, k["conv2d_1"], b["conv2d_1"])
    a1 = np.maximum(z1, 0.0)
    tr("conv2d_1", "Conv2D", a1)
    p1, i1 = _pool_forward(a1)
    tr("max_pooling2d_1", "MaxPooling2D", p1)
    z2 = _conv_forward(p1, k["conv2d_2"], b["conv2d_2"])
    a2 = np.maximum(z2, 0.0)
    tr("conv2d_2", "Conv2D", a2)
    p2, i2 = _pool_forward(a2)
    tr("max_pooling2d_2", "MaxPooling2D", p2)
    z3 = _conv_forward(p2, k["conv2d_3"], b["conv2d_3"])
    a3 = np.maximum(z3, 0.0)
    tr("conv2d_3", "Conv2D", a3)
    p3, i3 = _pool_forward(a3)
    tr("max_pooling2d_3", "MaxPooling2D", p3)
    z4 = _conv_forward(p3, k["conv2d_4"], b["conv2d_4"])
    a4 = np.maximum(z4, 0.0)
    tr("conv2d_4", "Conv2D", a4)

    u0 = _up_forward(a4)
    tr("up_sampling2d", "UpSampling2D", u0)
    s0 = u0 + a3
    tr("add", "Add", s0)
    z5 = _conv_forward(s0, k["conv2d_5"], b["conv2d_5"])
    a5 = np.maximum(z5, 0.0)
    tr("conv2d_5", "Conv2D", a5)
    u1 = _up_forward(a5)
    tr("up_sampling2d_1", "UpSampling2D", u1)
    s1 = u1 + a2
    tr("add_1", "Add", s1)
    z6 = _conv_forward(s1, k["conv2d_6"], b["conv2d_6"])
    a6 = np.maximum(z6, 0.0)
    tr("conv2d_6", "Conv2D", a6)
    u2 = _up_forward(a6)
    tr("up_sampling2d_2", "UpSampling2D", u2)
    s2 = u2 + a1
    tr("add_2", "Add", s2)
    z7 = _conv_forward(s2, k["conv2d_7"], b["conv2d_7"])
    a7 = np.maximum(z7, 0.0)
    tr("conv2d_7", "Conv2D", a7)
    u3 = _up_forward(a7)
    tr("up_sampling2d_3", "UpSampling2D", u3)
    z8 = _conv_forward(u3, k["conv2d_8"], b["conv2d_8"])
    tr("conv2d_8", "Conv2D", z8)
    probs = _sigmoid(z8)

    cache = {
        "x": x, "p0": p0, "p1": p1, "p2": p2, "p3": p3,
        "s0": s0, "s1": s1, "s2": s2, "u3": u3,
        "m": [z0 > 0, z1 > 0, z2 > 0, z3 > 0, z4 > 0, z5 > 0, z6 > 0, z7 > 0],
        "idx": [i0, i1, i2, i3],
        "ashape": [a0.shape, a1.shape, a2.shape, a3.shape],
        "probs": probs,
    }
    return probs, cache


def _backward_core(params, cache, dz8):
    """Gradients w.r.t. all kernels/biases given dL/d(final preactivation)."""
    k = params.kernels
    m = cache["m"]
    idx = cache["idx"]
    ash = cache["ashape"]
    gk, gb = {}, {}

    gk["conv2d_8"], gb["conv2d_8"], du3 = _conv_backward(cache["u3"], k["conv2d_8"], dz8)
    dz7 = _up_backward(du3) * m[7]
    gk["conv2d_7"], gb["conv2d_7"], ds2 = _conv_backward(cache["s2"], k["conv2d_7"], dz7)
    da1_skip = ds2
    dz6 = _up_backward(ds2) * m[6]
    gk["conv2d_6"], gb["conv2d_6"], ds1 = _conv_backward(cache["s1"], k["conv2d_6"], dz6)
    da2_skip = ds1
    dz5 = _up_backward(ds1) * m[5]
    gk["conv2d_5"], gb["conv2d_5"], ds0 = _conv_backward(cache["s0"], k["conv2d_5"], dz5)
    da3_skip = ds0
    dz4 = _up_backward(ds0) * m[4]
    gk["conv2d_4"], gb["conv2d_4"], dp3 = _conv_backward(cache["p3"], k["conv2d_4"], dz4)
    dz3 = (_pool_backward(idx[3], dp3, ash[3]) + da3_skip) * m[3]
    gk["conv2d_3"], gb["conv2d_3"], dp2 = _conv_backward(cache["p2"], k["conv2d_3"], dz3)
    dz2 = (_pool_backward(idx[2], dp2, ash[2]) + da2_skip) * m[2]
    gk["conv2d_2"], gb["conv2d_2"], dp1 = _conv_backward(cache["p1"], k["conv2d_2"], dz2)
    dz1 = (_pool_backward(idx[1], dp1, ash[1]) + da1_skip) * m[1]
    gk["conv2d_1"], gb["conv2d_1"], dp0 = _conv_backward(cache["p0"], k["conv2d_1"], dz1)
    dz0 = _pool_backward(idx[0], dp0, ash[0]) * m[0]
    gk["conv2d"], gb["conv2d"], _ = _conv_backward(cache["x"], k["conv2d"], dz0)
    return SegNetParams(gk, gb)


def forward_batch(params: SegNetParams, x: np.ndarray) -> np.ndarray:
    """Probabilities for a preprocessed batch (B, H, W, 3) -> (B, H, W, 1)."""
    probs, _ = _forward_core(params, np.asarray(x, dtype=np.float64))
    return probs


def shape_trace(params: SegNetParams = None, batch: int = 1) -> list:
    """(name, kind, output_shape) for every layer on a 192x192x3 input."""
    if params is None:
        params = init_params(0)
    trace = []
    _forward_core(params, np.zeros((batch, INPUT_SIZE, INPUT_SIZE, 3)), trace=trace)
    return trace


def bce_loss_and_grads(params: SegNetParams, x: np.ndarray, targets: np.ndarray):
    """Mean pixel BCE with probabilities clamped to [1e-7, 1 - 1e-7].

    targets: (B, H, W) or (B, H, W, 1) in {0, 1} (float or bool).
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 3:
        t = t[..., None]
    probs, cache = _forward_core(params, x)
    if t.shape != probs.shape:
        raise ValueError(f"target shape {t.shape} != output shape {probs.shape}")
    pc = np.clip(probs, _CLAMP_LO, _CLAMP_HI)
    n = pc.size
    loss = float(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))))
    # Where the clamp is active the clamped objective is locally flat.
    inside = (probs > _CLAMP_LO) & (probs < _CLAMP_HI)
    dz8 = np.where(inside, probs - t, 0.0) / n
    grads = _backward_core(params, cache, dz8)
    return loss, grads


def train(images: np.ndarray, targets: np.ndarray, cfg: SegTrainConfig) -> SegTrainResult:
    """Mini-batch SGD with momentum over preprocessed (N,H,W,3) arrays."""
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if len(images) != len(targets):
        raise ValueError("images and targets must align")

    params = init_params(cfg.seed)
    vel = SegNetParams(
        kernels={n: np.zeros_like(k) for n, k in params.kernels.items()},
        biases={n: np.zeros_like(b) for n, b in params.biases.items()},
    )
    rng = np.random.default_rng(cfg.seed)
    n = len(images)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss, grads = bce_loss_and_grads(params, images[sel], targets[sel])
            total += loss * len(sel)
            for name in LAYER_NAMES:
                vel.kernels[name] = cfg.momentum * vel.kernels[name] \
                    - cfg.learning_rate * grads.kernels[name]
                vel.biases[name] = cfg.momentum * vel.biases[name] \
                    - cfg.learning_rate * grads.biases[name]
                params.kernels[name] = params.kernels[name] + vel.kernels[name]
                params.biases[name] = params.biases[name] + vel.biases[name]
        losses.append(total / n)
    return SegTrainResult(params=params, epoch_losses=losses)


# ---------------------------------------------------------------------------
# GrayImage front door: letterbox in, probabilities out at original size
# ---------------------------------------------------------------------------

@dataclass
class LetterboxBox:
    src_h: int
    src_w: int
    new_h: int
    new_w: int
    top: int
    left: int


def _nearest_idx(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def letterbox_geometry(h: int, w: int, size: int = INPUT_SIZE) -> LetterboxBox:
    scale = size / max(h, w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    return LetterboxBox(h, w, new_h, new_w, (size - new_h) // 2, (size - new_w) // 2)


def letterbox_values(values: np.ndarray, box: LetterboxBox, size: int = INPUT_SIZE) -> np.ndarray:
    """Nearest-resize a (h, w) array into a zero-padded (size, size) canvas."""
    resized = values[_nearest_idx(box.src_h, box.new_h)][:, _nearest_idx(box.src_w, box.new_w)]
    canvas = np.zeros((size, size), dtype=np.float64)
    canvas[box.top:box.top + box.new_h, box.left:box.left + box.new_w] = resized
    return canvas


def unletterbox_values(canvas: np.ndarray, box: LetterboxBox) -> np.ndarray:
    crop = canvas[box.top:box.top + box.new_h, box.left:box.left + box.new_w]
    return crop[_nearest_idx(box.new_h, box.src_h)][:, _nearest_idx(box.new_w, box.src_w)]


def preprocess(image: GrayImage, size: int = INPUT_SIZE):
    """GrayImage -> ((size, size, 3) float in [0, 1], LetterboxBox)."""
    box = letterbox_geometry(image.height, image.width, size)
    plane = letterbox_values(image.pixels.astype(np.float64) / 255.0, box, size)
    return np.repeat(plane[:, :, None], 3, axis=2), box


def forward(params: SegNetParams, image: GrayImage, size: int = INPUT_SIZE) -> np.ndarray:
    """Foreground probability map at the original image size."""
    x, box = preprocess(image, size)
    probs = forward_batch(params, x[None])[0, :, :, 0]
    return unletterbox_values(probs, box)


def segment(params: SegNetParams, image: GrayImage, threshold: float = 0.5,
            size: int = INPUT_SIZE) -> BitMask:
    return binarize(forward(params, image, size), threshold)


def train_from_pairs(pairs, cfg: SegTrainConfig) -> SegTrainResult:
    """pairs: iterable of (GrayImage, BitMask); letterboxes both sides."""
    xs, ts = [], []
    for image, mask in pairs:
        if mask.bits.shape != image.pixels.shape:
            raise ValueError("image and mask shapes differ")
        x, box = preprocess(image, cfg.image_size)
        xs.append(x)
        ts.append(letterbox_values(mask.bits.astype(np.float64), box, cfg.image_size))
    if not xs:
        raise ValueError("empty training set")
    return train(np.stack(xs), np.stack(ts), cfg)


# ---------------------------------------------------------------------------
# Persistence: versioned binary container, float32 payloads
# ---------------------------------------------------------------------------

def _write_record(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<4i", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise SegNetFormatError("truncated record header")
    (nlen,) = struct.unpack("<I", head)
    nb = fh.read(nlen)
    if len(nb) != nlen:
        raise SegNetFormatError("truncated record name")
    raw_shape = fh.read(16)
    if len(raw_shape) != 16:
        raise SegNetFormatError("truncated record shape")
    shape = struct.unpack("<4i", raw_shape)
    if any(s <= 0 for s in shape):
        raise SegNetFormatError(f"invalid record shape {shape}")
    count = int(np.prod(shape))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise SegNetFormatError("truncated record payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return nb.decode("utf-8"), arr


def save_params(params: SegNetParams, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in LAYER_NAMES:
            _write_record(fh, f"{name}:kernel", params.kernels[name])
            _write_record(fh, f"{name}:bias", params.biases[name].reshape(1, 1, 1, -1))


def load_params(path) -> SegNetParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise SegNetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        records = {}
        order = []
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            records[rec[0]] = rec[1]
            order.append(rec[0])
    expected = []
    for name in LAYER_NAMES:
        expected += [f"{name}:kernel", f"{name}:bias"]
    if order != expected:
        raise SegNetFormatError("unexpected record layout")
    kernels, biases = {}, {}
    for name, cin, cout in CONV_LAYERS:
        kern = records[f"{name}:kernel"]
        if kern.shape != (3, 3, cin, cout):
            raise SegNetFormatError(
                f"{name}: kernel shape {kern.shape}, expected {(3, 3, cin, cout)}"
            )
        kernels[name] = kern
        biases[name] = records[f"{name}:bias"].reshape(-1)
        if biases[name].shape != (cout,):
            raise SegNetFormatError(f"{name}: bias length {biases[name].size}")
    return SegNetParams(kernels, biases)
