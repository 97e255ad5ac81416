"""Forward kernels for the hourglass network: float and binarized convolution,
max pooling, fully-connected layers, batch normalization, BN->threshold
folding, and the composite encoder/decoder forwards.

Feature maps are channels-last: (H, W, C) or batched (N, H, W, C). Flattening
between the last conv stage and the first FC stage is the row-major ravel of
(H, W, C), and the packed path uses the same bit order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import BitTensor, pack, sign_values, unpack

PAPER_INPUT_SIZE = 142
PAPER_CHANNELS = (32, 64, 128, 256)
PAPER_FC1_OUT = 1024
DESK_INPUT_SIZE = 64
DESK_CHANNELS = (8, 16, 32, 64)
DESK_FC1_OUT = 256
FEATURE_DIM = 64

FOLD_VMAX = 1 << 24  # integer pre-activations are exact in float32 below this


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    weights: np.ndarray  # (O, C, 3, 3) float32
    bias: np.ndarray     # (O,) float32

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ValueError(f"conv weights must be (O, C, 3, 3), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must match out channels")


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.ascontiguousarray(self.gamma, dtype=np.float32)
        self.beta = np.ascontiguousarray(self.beta, dtype=np.float32)
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float32)
        self.sigma2 = np.ascontiguousarray(self.sigma2, dtype=np.float32)
        if np.any(self.sigma2 < 0):
            raise ValueError("sigma2 must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")

    @property
    def channels(self):
        return self.gamma.shape[0]


@dataclass
class ThresholdParams:
    tau: np.ndarray   # (C,) int32
    flip: np.ndarray  # (C,) bool

    def __post_init__(self):
        self.tau = np.ascontiguousarray(self.tau, dtype=np.int32)
        self.flip = np.ascontiguousarray(self.flip, dtype=np.bool_)


@dataclass
class BinConvParams:
    weights: BitTensor  # (O, C, 3, 3)
    thresholds: ThresholdParams

    def __post_init__(self):
        if len(self.weights.shape) != 4 or self.weights.shape[2:] != (3, 3):
            raise ValueError(f"binary conv weights must be (O, C, 3, 3), got {self.weights.shape}")
        self._kernel = None

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    def kernel(self):
        if self._kernel is None:
            wsigns = unpack(self.weights)
            self._kernel = kernels.BinConvKernel(
                wsigns, self.thresholds.tau, self.thresholds.flip
            )
        return self._kernel


@dataclass
class BinFcParams:
    weights: BitTensor  # (O, I)
    thresholds: ThresholdParams

    def __post_init__(self):
        if len(self.weights.shape) != 2:
            raise ValueError(f"binary fc weights must be (O, I), got {self.weights.shape}")
        self._kernel = None

    def kernel(self):
        if self._kernel is None:
            self._kernel = kernels.BinFcKernel(
                unpack(self.weights), self.thresholds.tau, self.thresholds.flip
            )
        return self._kernel


# ---------------------------------------------------------------------------
# float kernels
# ---------------------------------------------------------------------------

def conv2d_float(x, p: ConvParams, pad=1, pad_value=0.0):
    """3x3 cross-correlation, channels-last, size-preserving for pad=1.

    Accepts (H, W, C) or (N, H, W, C). pad_value=-1.0 reproduces the binary
    padding convention on +-1 feature maps.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c = x.shape
    if c != p.weights.shape[1]:
        raise ValueError(f"input has {c} channels, weights expect {p.weights.shape[1]}")
    xp = np.full((n, h + 2 * pad, w + 2 * pad, c), np.float32(pad_value), np.float32)
    xp[:, pad : pad + h, pad : pad + w] = x
    ho, wo = h + 2 * pad - 2, w + 2 * pad - 2
    cols = np.empty((n, ho, wo, 3, 3, c), np.float32)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = xp[:, dy : dy + ho, dx : dx + wo, :]
    w2 = p.weights.transpose(2, 3, 1, 0).reshape(9 * c, -1)
    out = cols.reshape(n * ho * wo, 9 * c) @ w2
    out = out.reshape(n, ho, wo, -1) + p.bias
    return out[0] if single else out


def fc_float(x, weights, bias=None):
    """Affine map: x (..., I) @ weights (O, I)^T + bias."""
    x = np.asarray(x, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != weight in-dim {weights.shape[1]}")
    out = x @ weights.T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float32)
    return out


def maxpool(x, kernel=3, stride=2):
    """Max pool, kernel 3 stride 2 (the only Table-consistent geometry).

    Float arrays (channels-last, optionally batched) take the max; BitTensor
    maps take the OR of the window, which is max over +-1.
    """
    if kernel != 3 or stride != 2:
        raise ValueError("pool geometry is fixed at kernel=3, stride=2")
    if isinstance(x, BitTensor):
        xw = kernels.pixelwords_from_bittensor(x)
        out = kernels.pool_or(xw)
        return kernels.bittensor_from_pixelwords(out, x.shape[2])
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c = x.shape
    if h < kernel or w < kernel:
        raise ValueError(f"pool input {h}x{w} smaller than kernel {kernel}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    out = np.full((n, ho, wo, c), -np.inf, np.float32)
    for dy in range(3):
        for dx in range(3):
            np.maximum(
                out,
                x[:, dy : dy + 2 * ho - 1 : 2, dx : dx + 2 * wo - 1 : 2, :],
                out=out,
            )
    return out[0] if single else out


def pool_out_size(n, kernel=3, stride=2):
    if n < kernel:
        raise ValueError(f"pool input {n} smaller than kernel {kernel}")
    return (n - kernel) // stride + 1


def bn_scale(p: BNParams):
    """Per-channel multiplier gamma / sqrt(sigma2 + eps), in float32.

    Factored out so threshold folding calibrates against the exact float32
    expression bn_forward evaluates.
    """
    return (p.gamma / np.sqrt(p.sigma2 + np.float32(p.eps))).astype(np.float32)


def bn_forward(x, p: BNParams):
    """Inference-form batch norm: y = (x - mu) * k + beta, channels-last."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != p.channels:
        raise ValueError(f"input has {x.shape[-1]} channels, BN expects {p.channels}")
    return (x - p.mu) * bn_scale(p) + p.beta


def fold_bn_sign(p: BNParams, vmax=FOLD_VMAX):
    """Fold sign(bn_forward(v)) over integer v into (tau, flip) thresholds.

    flip=False: output +1 iff v >= tau; flip=True: output +1 iff v < tau.
    The flip-over point is located by bisection on the monotone float32 BN
    expression itself, so the thresholded output equals sign(bn_forward(v))
    for every integer v in [-vmax, vmax], including rounding edge cases.
    """
    if np.any(p.gamma == 0):
        raise ValueError("gamma must be nonzero to fold BN into a sign threshold")
    k = bn_scale(p)
    flip = k < 0

    def pred(v):
        # smallest-v-true predicate: sign flip-over along increasing v
        y = (v.astype(np.float32) - p.mu) * k + p.beta
        return np.where(flip, y < 0, y >= 0)

    lo = np.full(p.channels, -vmax - 1, dtype=np.int64)  # virtual: pred False
    hi = np.full(p.channels, vmax + 1, dtype=np.int64)   # virtual: pred True
    while np.any(hi - lo > 1):
        mid = (lo + hi) >> 1
        t = pred(mid)
        hi = np.where(t, mid, hi)
        lo = np.where(t, lo, mid)
    return ThresholdParams(hi.astype(np.int32), flip)


def threshold_apply(v, t: ThresholdParams):
    """Apply folded thresholds to integer pre-activations (channels-last)."""
    v = np.asarray(v)
    fire = (v >= t.tau) != t.flip
    return np.where(fire, np.float32(1.0), np.float32(-1.0))


# ---------------------------------------------------------------------------
# public binary ops
# ---------------------------------------------------------------------------

def conv2d_binary(x: BitTensor, p: BinConvParams, backend=None):
    """Binarized conv: XNOR-popcount over the 3x3 window, threshold to +-1.

    x is an (H, W, C) BitTensor; padding is -1 (zero bits); spatial size is
    preserved. Returns the (H, W, O) BitTensor of thresholded outputs.
    """
    if len(x.shape) != 3:
        raise ValueError(f"expected (H, W, C) input, got {x.shape}")
    if x.shape[2] != p.in_channels:
        raise ValueError(f"input has {x.shape[2]} channels, weights expect {p.in_channels}")
    xw = kernels.pixelwords_from_bittensor(x)
    out = p.kernel()(xw, backend=backend)
    return kernels.bittensor_from_pixelwords(out, p.out_channels)


def fc_binary(x: BitTensor, p: BinFcParams, backend=None):
    """Binarized fully-connected layer: per-neuron XNOR-popcount + threshold."""
    n_in = p.weights.shape[1]
    if x.nbits != n_in:
        raise ValueError(f"input length {x.nbits} != weight in-dim {n_in}")
    out = p.kernel()(x.words, backend=backend)
    o = p.weights.shape[0]
    return kernels.bittensor_from_pixelwords(out[None, None, :], o).reshape((o,))


# ---------------------------------------------------------------------------
# encoder / decoder composites
# ---------------------------------------------------------------------------

@dataclass
class EncoderLayer:
    name: str
    kind: str              # "conv" | "fc"
    weights: BitTensor     # (O, C, 3, 3) or (O, I)
    bn: BNParams
    pool: bool = False


@dataclass
class EncoderParams:
    input_size: int
    layers: list
    in_channels: int = 3
    _packed: object = field(default=None, repr=False, compare=False)

    def feature_dim(self):
        return self.layers[-1].weights.shape[0]


@dataclass
class DecoderLayer:
    name: str
    kind: str               # "fc" | "conv"
    weights: np.ndarray     # float32; +-1-valued when binarized
    bn: BNParams | None
    binarized: bool = False
    resize_to: int | None = None  # nearest-neighbor upsample before a conv


@dataclass
class DecoderParams:
    layers: list
    out_weights: np.ndarray  # (3, C, 3, 3) final conv
    out_bias: np.ndarray     # (3,)
    out_resize_to: int
    out_binarized: bool = False
    bottleneck_hw: int = 7   # spatial size when leaving the FC stages

    def output_size(self):
        return self.out_resize_to


def encoder_geometry(input_size, channels, fc1_out, feature_dim=FEATURE_DIM):
    """Stage list [(name, kind, spatial, in, out, pool)] for a conv stack."""
    stages = []
    s = input_size
    c_in = 3
    for i, c_out in enumerate(channels):
        stages.append((f"conv{i + 1}", "conv", s, c_in, c_out, True))
        s = pool_out_size(s)
        c_in = c_out
    flat = s * s * c_in
    stages.append(("fc1", "fc", 1, flat, fc1_out, False))
    stages.append(("fc2", "fc", 1, fc1_out, feature_dim, False))
    return stages


class PackedEncoder:
    """Inference pipeline over bit-packed weights and folded thresholds."""

    def __init__(self, enc: EncoderParams, backend=None):
        self.backend = backend
        self.input_size = enc.input_size
        self.in_channels = enc.in_channels
        first = enc.layers[0]
        self.conv1_signs = unpack(first.weights)
        t1 = fold_bn_sign(first.bn)
        self.conv1_tau, self.conv1_flip = t1.tau, t1.flip
        self.conv1_pool = first.pool
        self.stages = []
        for lay in enc.layers[1:]:
            t = fold_bn_sign(lay.bn)
            wsigns = unpack(lay.weights)
            if lay.kind == "conv":
                k = kernels.BinConvKernel(wsigns, t.tau, t.flip)
            else:
                k = kernels.BinFcKernel(wsigns, t.tau, t.flip)
            self.stages.append((lay.kind, k, lay.pool))
        self.feature_dim = enc.layers[-1].weights.shape[0]

    def feature_words(self, pixels):
        pixels = _check_pixels(pixels, self.input_size, self.in_channels)
        xw = kernels.conv1_forward(
            pixels, self.conv1_signs, self.conv1_tau, self.conv1_flip, backend=self.backend
        )
        c = self.conv1_signs.shape[0]
        if self.conv1_pool:
            xw = kernels.pool_or(xw, backend=self.backend)
        spatial = True
        for kind, k, pool in self.stages:
            if kind == "conv":
                xw = k(xw, backend=self.backend)
                c = k.out_channels
                if pool:
                    xw = kernels.pool_or(xw, backend=self.backend)
            else:
                if spatial:
                    xw = kernels.flat_words(xw, c)
                    spatial = False
                xw = k(xw, backend=self.backend)
                c = k.out_features
        return xw

    def features(self, pixels):
        words = self.feature_words(pixels)
        bits = kernels.unpack_channel_words(words[None, :], self.feature_dim)[0]
        return (bits.astype(np.float32) * 2.0 - 1.0).astype(np.float32)


def _check_pixels(pixels, size, channels):
    pixels = np.asarray(pixels)
    if pixels.shape != (size, size, channels):
        raise ValueError(f"expected {size}x{size}x{channels} image, got {pixels.shape}")
    if pixels.dtype != np.uint8:
        if np.any(pixels < 0) or np.any(pixels > 255) or np.any(pixels != np.rint(pixels)):
            raise ValueError("pixel input must be 8-bit integers in [0, 255]")
        pixels = pixels.astype(np.uint8)
    return pixels


def encoder_forward(img, enc: EncoderParams, path="packed", backend=None):
    """Run the binarized encoder on an 8-bit image; returns +-1.0 features.

    path="packed" uses the bit-packed XNOR-popcount kernels; path="reference"
    runs the float-emulation pipeline sign(BN(conv)) on the same quantized
    input. The two are exactly equal by construction (folding is exact).
    """
    if path == "packed":
        if enc._packed is None:
            enc._packed = PackedEncoder(enc)
        return enc._packed.features(_check_pixels(img, enc.input_size, enc.in_channels))
    if path != "reference":
        raise ValueError(f"unknown path {path!r}")
    img = _check_pixels(img, enc.input_size, enc.in_channels)
    x = img.astype(np.float32)
    spatial = True
    for i, lay in enumerate(enc.layers):
        wsigns = unpack(lay.weights)
        if lay.kind == "conv":
            p = ConvParams(wsigns, np.zeros(wsigns.shape[0], np.float32))
            pad_value = 0.0 if i == 0 else -1.0
            x = conv2d_float(x, p, pad=1, pad_value=pad_value)
        else:
            if spatial:
                x = x.reshape(-1)
                spatial = False
            x = fc_float(x, wsigns)
        x = sign_values(bn_forward(x, lay.bn))
        if lay.pool:
            x = maxpool(x)
    return x.astype(np.float32)


def nn_resize(x, size):
    """Nearest-neighbor resize of an (H, W, C) map to (size, size, C)."""
    h, w, _ = x.shape
    iy = (np.arange(size) * h) // size
    ix = (np.arange(size) * w) // size
    return x[iy][:, ix]


def logistic(x):
    x = np.asarray(x, dtype=np.float32)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decoder_forward(feat, dec: DecoderParams):
    """Expand a 64-wide feature vector back to an image in [0, 1].

    Mirror of the encoder: two FC stages, reshape to the bottleneck map,
    then nearest-neighbor upsample + 3x3 conv per stage, with a final
    logistic squashing. Hidden activations are tanh, or sign for layers
    trained in fully-binarized mode.
    """
    x = np.asarray(feat, dtype=np.float32)
    if x.shape != (dec.layers[0].weights.shape[1],):
        raise ValueError(
            f"expected feature of length {dec.layers[0].weights.shape[1]}, got {x.shape}"
        )
    spatial = False
    for lay in dec.layers:
        w = lay.weights
        if lay.kind == "fc":
            x = fc_float(x, w)
        else:
            if not spatial:
                c = w.shape[1]
                x = x.reshape(dec.bottleneck_hw, dec.bottleneck_hw, c)
                spatial = True
            x = nn_resize(x, lay.resize_to)
            x = conv2d_float(x, ConvParams(w, np.zeros(w.shape[0], np.float32)), pad=1)
        x = bn_forward(x, lay.bn)
        x = sign_values(x) if lay.binarized else np.tanh(x)
    if not spatial:
        c = dec.out_weights.shape[1]
        x = x.reshape(dec.bottleneck_hw, dec.bottleneck_hw, c)
    x = nn_resize(x, dec.out_resize_to)
    x = conv2d_float(x, ConvParams(dec.out_weights, dec.out_bias), pad=1)
    return logistic(x)


def random_encoder_params(rng, input_size=PAPER_INPUT_SIZE, channels=PAPER_CHANNELS,
                          fc1_out=PAPER_FC1_OUT, feature_dim=FEATURE_DIM):
    """Random but well-formed EncoderParams (for kernel tests and benchmarks)."""
    layers = []
    for name, kind, _s, c_in, c_out, pool in encoder_geometry(
        input_size, channels, fc1_out, feature_dim
    ):
        shape = (c_out, c_in, 3, 3) if kind == "conv" else (c_out, c_in)
        w = pack(rng.choice([-1.0, 1.0], size=shape).astype(np.float32))
        window = c_in * 9 if kind == "conv" else c_in
        scale = 255.0 * window if name == "conv1" else float(window)
        bn = BNParams(
            gamma=rng.uniform(0.2, 2.0, c_out) * rng.choice([-1.0, 1.0], c_out),
            beta=rng.normal(0.0, 1.0, c_out),
            mu=rng.normal(0.0, 0.05 * scale, c_out),
            sigma2=rng.uniform(0.01, 0.09, c_out) * scale**2,
        )
        layers.append(EncoderLayer(name, kind, w, bn, pool))
    return EncoderParams(input_size=input_size, layers=layers)
