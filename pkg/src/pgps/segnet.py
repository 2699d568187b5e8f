"""A tiny fully-convolutional 3D encoder-decoder with manual backprop.

The network accepts any patch whose axes are divisible by 2**pools on that
axis: one stride-2 conv per pooling level on the way down, nearest
upsampling plus conv with an additive skip on the way up, and a 1x1x1 head.
Channel count is constant, so a single parameter set serves every patch
size in a ladder.

All math is float64 with a fixed accumulation order; two forward passes on
the same inputs are bitwise identical.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .rng import RngStream

LEAKY_SLOPE = 0.01
DICE_EPS = 1e-5
INIT_STREAM_TAG = 0xC0DE

CHECKPOINT_MAGIC = b"SEGN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    pools_per_axis: tuple[int, int, int]
    num_classes: int
    base_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "pools_per_axis", tuple(int(p) for p in self.pools_per_axis)
        )
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes (background + 1)")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @property
    def levels(self) -> int:
        return max(self.pools_per_axis)

    def level_stride(self, level: int) -> tuple[int, int, int]:
        """Per-axis stride at a pooling level; axes finish pooling early."""
        return tuple(2 if level < p else 1 for p in self.pools_per_axis)

    @property
    def divisors(self) -> tuple[int, int, int]:
        return tuple(2**p for p in self.pools_per_axis)


def layer_specs(config: SegNetConfig):
    """Ordered (name, in_ch, out_ch, kernel, stride) for every conv layer."""
    c = config.base_channels
    specs = [("stem", 1, c, 3, (1, 1, 1))]
    for level in range(config.levels):
        specs.append((f"down{level}", c, c, 3, config.level_stride(level)))
    for level in reversed(range(config.levels)):
        specs.append((f"up{level}", c, c, 3, (1, 1, 1)))
    specs.append(("head", c, config.num_classes, 1, (1, 1, 1)))
    return specs


class SegNetParams:
    """He-initialized conv kernels and biases, keyed by layer name."""

    def __init__(self, config: SegNetConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def initialize(cls, config: SegNetConfig, seed: int | None = None) -> "SegNetParams":
        seed = config.seed if seed is None else seed
        gen = RngStream(seed, (INIT_STREAM_TAG,)).generator()
        tensors = {}
        for name, ci, co, k, _stride in layer_specs(config):
            fan_in = ci * k**3
            std = np.sqrt(2.0 / fan_in)
            tensors[f"{name}.w"] = gen.normal(0.0, std, size=(co, ci, k, k, k))
            tensors[f"{name}.b"] = np.zeros(co, dtype=np.float64)
        return cls(config, tensors)

    def zero_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def copy(self) -> "SegNetParams":
        return SegNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _leaky_grad(grad, out):
    # out has the same sign as the pre-activation, so its sign suffices.
    return np.where(out > 0, grad, LEAKY_SLOPE * grad)


def _check_divisible(shape, divisors):
    for axis, (d, q) in enumerate(zip(shape, divisors)):
        if d % q != 0:
            raise ValueError(
                f"input axis {axis} ({d}) not divisible by network divisor {q}"
            )


def forward(params: SegNetParams, images: np.ndarray, want_cache: bool = False):
    """Per-voxel class logits for a (B, D0, D1, D2) image batch.

    Returns logits of shape (B, num_classes, D0, D1, D2); with
    want_cache=True also returns the activations backward() needs.
    """
    config = params.config
    images = np.ascontiguousarray(images, dtype=np.float64)
    _check_divisible(images.shape[1:], config.divisors)
    t = params.tensors
    x = images[:, None]
    h = _leaky(kernels.conv3d_forward(x, t["stem.w"], t["stem.b"], (1, 1, 1)))
    enc = [h]
    for level in range(config.levels):
        stride = config.level_stride(level)
        h = _leaky(
            kernels.conv3d_forward(h, t[f"down{level}.w"], t[f"down{level}.b"], stride)
        )
        enc.append(h)
    dec_inputs = []
    dec_outputs = []
    for level in reversed(range(config.levels)):
        stride = config.level_stride(level)
        u = kernels.upsample_nearest(h, stride)
        z = (
            kernels.conv3d_forward(u, t[f"up{level}.w"], t[f"up{level}.b"], (1, 1, 1))
            + enc[level]
        )
        h = _leaky(z)
        dec_inputs.append(u)
        dec_outputs.append(h)
    logits = kernels.conv3d_forward(h, t["head.w"], t["head.b"], (1, 1, 1))
    if not want_cache:
        return logits
    cache = {
        "input": x,
        "enc": enc,
        "dec_inputs": dec_inputs,
        "dec_outputs": dec_outputs,
    }
    return logits, cache


def backward(params: SegNetParams, cache, grad_logits: np.ndarray):
    """Gradients for every parameter given d(loss)/d(logits)."""
    config = params.config
    t = params.tensors
    grads = {}
    head_in = cache["dec_outputs"][-1] if config.levels else cache["enc"][0]
    gw, gb = kernels.conv3d_grad_weights(
        grad_logits, head_in, t["head.w"].shape, (1, 1, 1)
    )
    grads["head.w"], grads["head.b"] = gw, gb
    gh = kernels.conv3d_grad_input(
        grad_logits, t["head.w"], (1, 1, 1), head_in.shape[2:]
    )

    # Skip-connection gradients flowing into each encoder activation.
    # The decoder ran levels L-1..0 in the forward pass, so unwind 0..L-1.
    enc_grads = [None] * config.levels
    for level in range(config.levels):
        pos = config.levels - 1 - level
        h_out = cache["dec_outputs"][pos]
        u = cache["dec_inputs"][pos]
        gz = _leaky_grad(gh, h_out)
        enc_grads[level] = gz
        gw, gb = kernels.conv3d_grad_weights(
            gz, u, t[f"up{level}.w"].shape, (1, 1, 1)
        )
        grads[f"up{level}.w"], grads[f"up{level}.b"] = gw, gb
        gu = kernels.conv3d_grad_input(gz, t[f"up{level}.w"], (1, 1, 1), u.shape[2:])
        gh = kernels.downsample_sum(gu, config.level_stride(level))

    g = gh
    for level in range(config.levels - 1, -1, -1):
        stride = config.level_stride(level)
        h_out = cache["enc"][level + 1]
        h_in = cache["enc"][level]
        gz = _leaky_grad(g, h_out)
        gw, gb = kernels.conv3d_grad_weights(
            gz, h_in, t[f"down{level}.w"].shape, stride
        )
        grads[f"down{level}.w"], grads[f"down{level}.b"] = gw, gb
        g = kernels.conv3d_grad_input(gz, t[f"down{level}.w"], stride, h_in.shape[2:])
        if enc_grads[level] is not None:
            g = g + enc_grads[level]
    gz = _leaky_grad(g, cache["enc"][0])
    gw, gb = kernels.conv3d_grad_weights(gz, cache["input"], t["stem.w"].shape, (1, 1, 1))
    grads["stem.w"], grads["stem.b"] = gw, gb
    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_dice_ce(logits: np.ndarray, labels: np.ndarray):
    """Cross-entropy plus (1 - mean soft Dice over foreground classes).

    Soft Dice uses batch-aggregated per-class statistics with smoothing
    DICE_EPS; foreground classes with zero mass in both the labels and the
    predicted probabilities are left out of the mean. Returns
    (loss, d loss / d logits).
    """
    labels = np.ascontiguousarray(labels).astype(np.int64)
    k = logits.shape[1]
    n_vox = labels.size
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    norm = exp.sum(axis=1, keepdims=True)
    probs = exp / norm
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)

    log_probs = np.take_along_axis(shifted, labels[:, None], axis=1) - np.log(norm)
    ce = -log_probs.sum() / n_vox
    grad = (probs - onehot) / n_vox

    axes = (0, 2, 3, 4)
    inter = (probs * onehot).sum(axis=axes)
    mass_p = probs.sum(axis=axes)
    mass_t = onehot.sum(axis=axes)
    active = [c for c in range(1, k) if mass_p[c] > 0.0 or mass_t[c] > 0.0]
    dice_term = 0.0
    if active:
        g_probs = np.zeros_like(probs)
        dice_sum = 0.0
        for c in active:
            denom = mass_p[c] + mass_t[c] + DICE_EPS
            dice_c = (2.0 * inter[c] + DICE_EPS) / denom
            dice_sum += dice_c
            # d(-dice_c)/dp_c(v) = -(2*t_c(v)*denom - (2*I_c + eps)) / denom^2
            g_probs[:, c] = -(2.0 * onehot[:, c] * denom - (2.0 * inter[c] + DICE_EPS)) / (
                denom * denom
            )
        dice_term = 1.0 - dice_sum / len(active)
        g_probs /= len(active)
        inner = (g_probs * probs).sum(axis=1, keepdims=True)
        grad = grad + probs * (g_probs - inner)
    loss = ce + dice_term
    return float(loss), grad


def poly_lr(base_lr: float, iteration: int, total_iterations: int, power: float = 0.9):
    frac = min(iteration / max(total_iterations, 1), 1.0)
    return base_lr * (1.0 - frac) ** power


def sgd_step(params: SegNetParams, grads, velocity, lr: float, momentum: float,
             nesterov: bool = True) -> None:
    """Nesterov momentum SGD update in place.

    v <- mu*v + g;  p <- p - lr*(g + mu*v)   (nesterov)
    v <- mu*v + g;  p <- p - lr*v            (plain momentum)
    """
    for name, tensor in params.tensors.items():
        g = grads[name]
        v = velocity[name]
        v *= momentum
        v += g
        if nesterov:
            tensor -= lr * (g + momentum * v)
        else:
            tensor -= lr * v


def _window_positions(dim: int, window: int) -> list[int]:
    if dim <= window:
        return [0]
    step = max(1, window // 2)
    positions = list(range(0, dim - window + 1, step))
    if positions[-1] != dim - window:
        positions.append(dim - window)
    return positions


def sliding_window_predict(params: SegNetParams, volume_image: np.ndarray, window):
    """Tile with 50% overlap, average class probabilities, argmax per voxel.

    Volumes smaller than the window are zero-padded for inference and the
    prediction is cropped back.
    """
    window = tuple(int(w) for w in window)
    dims = volume_image.shape
    padded = tuple(max(d, w) for d, w in zip(dims, window))
    img = volume_image
    if padded != dims:
        img = np.zeros(padded, dtype=np.float64)
        img[: dims[0], : dims[1], : dims[2]] = volume_image
    k = params.config.num_classes
    prob_sum = np.zeros((k, *padded), dtype=np.float64)
    counts = np.zeros(padded, dtype=np.float64)
    for z in _window_positions(padded[0], window[0]):
        for y in _window_positions(padded[1], window[1]):
            for x in _window_positions(padded[2], window[2]):
                tile = img[z : z + window[0], y : y + window[1], x : x + window[2]]
                logits = forward(params, tile[None])
                probs = softmax(logits)[0]
                prob_sum[
                    :, z : z + window[0], y : y + window[1], x : x + window[2]
                ] += probs
                counts[z : z + window[0], y : y + window[1], x : x + window[2]] += 1.0
    prob_sum /= counts[None]
    pred = prob_sum.argmax(axis=0).astype(np.uint16)
    return pred[: dims[0], : dims[1], : dims[2]]


def save_params(params: SegNetParams, path) -> None:
    config = params.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<H3HHHq",
                CHECKPOINT_VERSION,
                *config.pools_per_axis,
                config.num_classes,
                config.base_channels,
                config.seed,
            )
        )
        fh.write(struct.pack("<H", len(params.tensors)))
        for name, tensor in params.tensors.items():
            blob = name.encode()
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_params(path) -> SegNetParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, p0, p1, p2, num_classes, base_channels, seed = struct.unpack(
            "<H3HHHq", fh.read(struct.calcsize("<H3HHHq"))
        )
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = SegNetConfig(
            pools_per_axis=(p0, p1, p2),
            num_classes=num_classes,
            base_channels=base_channels,
            seed=seed,
        )
        (count,) = struct.unpack("<H", fh.read(2))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape))
            tensors[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    return SegNetParams(config, tensors)
