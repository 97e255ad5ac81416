"""Training engine for the hourglass autoencoder.

The forward pass is a float emulation of the network: binarized layers use
sign(shadow weights) and sign activations, full-precision layers use the raw
weights and tanh. Gradients are hand-written reverse mode: exact through the
float decoder, straight-through (|x| < 1 mask) through every activation
binarization, and pass-through on weight binarization with shadow weights
clipped to [-1, 1] after each optimizer step.

Three modes share one graph and differ only in which layers binarize:
"full" (none), "partial" (encoder only), "binary" (everything).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import pack, sign_values
from .layers import (
    DESK_CHANNELS,
    DESK_FC1_OUT,
    DESK_INPUT_SIZE,
    FEATURE_DIM,
    PAPER_CHANNELS,
    PAPER_FC1_OUT,
    PAPER_INPUT_SIZE,
    BNParams,
    DecoderLayer,
    DecoderParams,
    EncoderLayer,
    EncoderParams,
    logistic,
    pool_out_size,
)

MODES = ("full", "binary", "partial")

SIZE_PRESETS = {
    "paper": (PAPER_INPUT_SIZE, PAPER_CHANNELS, PAPER_FC1_OUT),
    "desk": (DESK_INPUT_SIZE, DESK_CHANNELS, DESK_FC1_OUT),
}


class DivergenceError(RuntimeError):
    """Training loss went non-finite; carries the epoch (or step) index."""

    def __init__(self, epoch, message=None):
        super().__init__(message or f"loss diverged (NaN/Inf) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    mode: str = "partial"
    size: str = "desk"
    input_size: int = DESK_INPUT_SIZE
    channels: tuple = DESK_CHANNELS
    fc1_out: int = DESK_FC1_OUT
    feature_dim: int = FEATURE_DIM
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.channels = tuple(int(c) for c in self.channels)

    @staticmethod
    def for_size(size, **overrides):
        if size not in SIZE_PRESETS:
            raise ValueError(f"unknown size preset {size!r}")
        input_size, channels, fc1_out = SIZE_PRESETS[size]
        cfg = TrainConfig(size=size, input_size=input_size, channels=channels, fc1_out=fc1_out)
        return replace(cfg, **overrides)


_CONFIG_KEYS = {
    "mode": str,
    "size": str,
    "input_size": int,
    "fc1_out": int,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "seed": int,
    "feature_dim": int,
}


def parse_train_config(text):
    """Parse the key-value training config format (``key = value`` lines)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "channels":
            values[key] = tuple(int(v) for v in val.split(","))
        elif key in _CONFIG_KEYS:
            values[key] = _CONFIG_KEYS[key](val)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    size = values.pop("size", None)
    if size is not None and not {"input_size", "channels", "fc1_out"} & values.keys():
        return TrainConfig.for_size(size, **values)
    cfg = TrainConfig(**values) if size is None else TrainConfig(size=size, **values)
    return cfg


def format_train_config(cfg: TrainConfig):
    lines = [
        f"mode = {cfg.mode}",
        f"size = {cfg.size}",
        f"input_size = {cfg.input_size}",
        "channels = " + ",".join(str(c) for c in cfg.channels),
        f"fc1_out = {cfg.fc1_out}",
        f"epochs = {cfg.epochs}",
        f"batch_size = {cfg.batch_size}",
        f"learning_rate = {cfg.learning_rate}",
        f"seed = {cfg.seed}",
    ]
    return "\n".join(lines) + "\n"


def write_loss_curve(path, rows):
    """Loss curve CSV: epoch, train_mse, val_mse."""
    with open(path, "w") as f:
        f.write("epoch,train_mse,val_mse\n")
        for epoch, train_mse, val_mse in rows:
            f.write(f"{epoch},{train_mse:.8g},{val_mse:.8g}\n")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def dcae_loss(img, recon):
    """Mean squared error over all pixels and channels."""
    img = np.asarray(img, np.float32)
    recon = np.asarray(recon, np.float32)
    if img.shape != recon.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {recon.shape}")
    d = recon - img
    return float(np.mean(d.astype(np.float64) ** 2))


# ---------------------------------------------------------------------------
# stage primitives (forward + backward pairs)
# ---------------------------------------------------------------------------

def _conv_fwd(x, w, bias=None, pad_value=0.0):
    n, h, wd, c = x.shape
    dt = x.dtype
    xp = np.full((n, h + 2, wd + 2, c), pad_value, dt)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, wd, 3, 3, c), dt)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = xp[:, dy : dy + h, dx : dx + wd, :]
    w2 = w.transpose(2, 3, 1, 0).reshape(9 * c, -1)
    out = (cols.reshape(-1, 9 * c) @ w2).reshape(n, h, wd, -1)
    if bias is not None:
        out = out + bias
    return out, cols


def _conv_bwd(dout, cols, w, with_bias=False):
    n, h, wd, o = dout.shape
    c = cols.shape[-1]
    dflat = dout.reshape(-1, o)
    cflat = cols.reshape(-1, 9 * c)
    dw2 = cflat.T @ dflat  # (9C, O)
    dw = dw2.reshape(3, 3, c, o).transpose(3, 2, 0, 1)
    w2 = w.transpose(2, 3, 1, 0).reshape(9 * c, o)
    dcols = (dflat @ w2.T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + wd, :] += dcols[:, :, :, dy, dx, :]
    dx = dxp[:, 1:-1, 1:-1]
    db = dout.sum(axis=(0, 1, 2)) if with_bias else None
    return dx, np.ascontiguousarray(dw), db


def _fc_fwd(x, w):
    return x @ w.T, x


def _fc_bwd(dout, x, w):
    return dout @ w, dout.T @ x


def _bn_fwd(x, gamma, beta, eps):
    axes = tuple(range(x.ndim - 1))
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma), (mu, var)


def _bn_bwd(dy, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
    return dx.astype(dy.dtype), dgamma, dbeta


def _pool_fwd(x):
    n, h, wd, c = x.shape
    ho = (h - 3) // 2 + 1
    wo = (wd - 3) // 2 + 1
    windows = np.stack(
        [x[:, dy : dy + 2 * ho - 1 : 2, dx : dx + 2 * wo - 1 : 2, :] for dy in range(3) for dx in range(3)]
    )
    idx = windows.argmax(axis=0)
    out = np.take_along_axis(windows, idx[None], axis=0)[0]
    return out, (idx, h, wd)


def _pool_bwd(dout, cache):
    idx, h, wd = cache
    n, ho, wo, c = dout.shape
    dx = np.zeros((n, h, wd, c), dout.dtype)
    for t in range(9):
        dy, dx_ = divmod(t, 3)
        sel = np.where(idx == t, dout, dout.dtype.type(0.0))
        dx[:, dy : dy + 2 * ho - 1 : 2, dx_ : dx_ + 2 * wo - 1 : 2, :] += sel
    return dx


def _resize_fwd(x, size):
    n, h, wd, c = x.shape
    iy = (np.arange(size) * h) // size
    ix = (np.arange(size) * wd) // size
    return np.ascontiguousarray(x[:, iy][:, :, ix]), (h, wd, iy, ix)


def _resize_bwd(dout, cache):
    h, wd, iy, ix = cache
    row_starts = np.searchsorted(iy, np.arange(h))
    col_starts = np.searchsorted(ix, np.arange(wd))
    dx = np.add.reduceat(dout, row_starts, axis=1)
    dx = np.add.reduceat(dx, col_starts, axis=2)
    return np.ascontiguousarray(dx, dtype=dout.dtype)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

@dataclass
class StageSpec:
    name: str
    kind: str          # conv | fc
    in_dim: int        # channels (conv) or features (fc)
    out_dim: int
    pool: bool = False
    resize_to: int | None = None  # decoder upsample target


def _build_stage_specs(cfg: TrainConfig):
    enc = []
    s = cfg.input_size
    c_in = 3
    spatial = [s]
    for i, c in enumerate(cfg.channels):
        enc.append(StageSpec(f"enc_conv{i + 1}", "conv", c_in, c, pool=True))
        s = pool_out_size(s)
        spatial.append(s)
        c_in = c
    flat = s * s * c_in
    enc.append(StageSpec("enc_fc1", "fc", flat, cfg.fc1_out))
    enc.append(StageSpec("enc_fc2", "fc", cfg.fc1_out, cfg.feature_dim))
    dec = [
        StageSpec("dec_fc1", "fc", cfg.feature_dim, cfg.fc1_out),
        StageSpec("dec_fc2", "fc", cfg.fc1_out, flat),
    ]
    rev_ch = list(cfg.channels[::-1]) + [3]
    rev_sz = spatial[:-1][::-1]  # resize targets back up the pyramid
    for i in range(len(cfg.channels) - 1):
        dec.append(
            StageSpec(f"dec_conv{i + 1}", "conv", rev_ch[i], rev_ch[i + 1], resize_to=rev_sz[i])
        )
    out = StageSpec("dec_out", "conv", rev_ch[-2], 3, resize_to=rev_sz[-1])
    return enc, dec, out, s


class DcaeNet:
    """Parameter store + forward/backward for one configured autoencoder."""

    def __init__(self, cfg: TrainConfig, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.enc_specs, self.dec_specs, self.out_spec, self.bottleneck_hw = _build_stage_specs(cfg)
        if cfg.mode == "full":
            self.binarized = frozenset()
        elif cfg.mode == "partial":
            self.binarized = frozenset(s.name for s in self.enc_specs)
        else:
            self.binarized = frozenset(
                [s.name for s in self.enc_specs + self.dec_specs] + [self.out_spec.name]
            )
        self.params = {}
        self.running = {}
        for spec in self.enc_specs + self.dec_specs:
            if spec.kind == "conv":
                fan_in = 9 * spec.in_dim
                shape = (spec.out_dim, spec.in_dim, 3, 3)
            else:
                fan_in = spec.in_dim
                shape = (spec.out_dim, spec.in_dim)
            self.params[spec.name + "_w"] = rng.normal(0, np.sqrt(2.0 / fan_in), shape).astype(self.dtype)
            self.params[spec.name + "_gamma"] = np.ones(spec.out_dim, self.dtype)
            self.params[spec.name + "_beta"] = np.zeros(spec.out_dim, self.dtype)
            self.running[spec.name + "_mu"] = np.zeros(spec.out_dim, np.float32)
            self.running[spec.name + "_var"] = np.ones(spec.out_dim, np.float32)
        o = self.out_spec
        self.params[o.name + "_w"] = rng.normal(0, np.sqrt(2.0 / (9 * o.in_dim)), (3, o.in_dim, 3, 3)).astype(self.dtype)
        self.params[o.name + "_b"] = np.zeros(3, self.dtype)

    # -- helpers ------------------------------------------------------------

    def binarized_layer_names(self):
        return tuple(sorted(self.binarized))

    def _w_eff(self, name):
        w = self.params[name + "_w"]
        return sign_values(w) if name in self.binarized else w

    def _act_fwd(self, name, z):
        if name in self.binarized:
            return sign_values(z).astype(z.dtype), z
        t = np.tanh(z)
        return t, t

    def _act_bwd(self, name, dout, cache):
        if name in self.binarized:
            return np.where(np.abs(cache) < 1.0, dout, np.float32(0.0))
        return dout * (1.0 - cache * cache)

    def _pad_value(self, spec_index_is_first, prev_binarized):
        if spec_index_is_first:
            return 0.0
        return -1.0 if prev_binarized else 0.0

    # -- training-mode forward/backward --------------------------------------

    def forward_train(self, x01, update_running=True):
        """x01: (N, S, S, 3) float32 in [0, 1]. Returns (recon, tape)."""
        cfg = self.cfg
        tape = []
        x = np.ascontiguousarray(x01, self.dtype)
        prev_bin = False
        spatial = True
        for i, spec in enumerate(self.enc_specs + self.dec_specs):
            is_dec = i >= len(self.enc_specs)
            entry = {"spec": spec}
            if spec.kind == "conv":
                if is_dec and not spatial:
                    x = x.reshape(x.shape[0], self.bottleneck_hw, self.bottleneck_hw, spec.in_dim)
                    spatial = True
                    entry["from_flat"] = True
                if is_dec:
                    x, entry["resize"] = _resize_fwd(x, spec.resize_to)
                # -1 padding applies only to binarized encoder maps
                pv = -1.0 if (not is_dec and i > 0 and prev_bin) else 0.0
                w = self._w_eff(spec.name)
                pre, cols = _conv_fwd(x, w, pad_value=pv)
                entry["cols"] = cols
                entry["w_eff"] = w
            else:
                if spatial:
                    entry["unflatten"] = x.shape
                    x = x.reshape(x.shape[0], -1)
                    spatial = False
                w = self._w_eff(spec.name)
                pre, xin = _fc_fwd(x, w)
                entry["x_in"] = xin
                entry["w_eff"] = w
            bn_out, entry["bn"], (mu, var) = _bn_fwd(
                pre, self.params[spec.name + "_gamma"], self.params[spec.name + "_beta"], cfg.bn_eps
            )
            if update_running:
                m = cfg.bn_momentum
                self.running[spec.name + "_mu"] = (
                    m * self.running[spec.name + "_mu"] + (1 - m) * mu
                ).astype(np.float32)
                self.running[spec.name + "_var"] = (
                    m * self.running[spec.name + "_var"] + (1 - m) * var
                ).astype(np.float32)
            x, entry["act"] = self._act_fwd(spec.name, bn_out)
            prev_bin = spec.name in self.binarized
            if spec.pool:
                x, entry["pool"] = _pool_fwd(x)
            tape.append(entry)
        # output stage: resize -> conv + bias -> logistic
        o = self.out_spec
        entry = {"spec": o}
        if not spatial:
            x = x.reshape(x.shape[0], self.bottleneck_hw, self.bottleneck_hw, o.in_dim)
            entry["from_flat"] = True
        x, entry["resize"] = _resize_fwd(x, o.resize_to)
        w = self._w_eff(o.name)
        pre, entry["cols"] = _conv_fwd(x, w, bias=self.params[o.name + "_b"], pad_value=0.0)
        entry["w_eff"] = w
        recon = logistic(pre)
        entry["sig"] = recon
        tape.append(entry)
        return recon, tape

    def backward(self, tape, drecon):
        """Gradients for every trainable parameter given d(loss)/d(recon)."""
        grads = {}
        entry = tape[-1]
        o = entry["spec"]
        s = entry["sig"]
        dpre = (drecon * s * (1.0 - s)).astype(np.float32)
        dx, dw, db = _conv_bwd(dpre, entry["cols"], entry["w_eff"], with_bias=True)
        grads[o.name + "_w"] = dw
        grads[o.name + "_b"] = db
        dx = _resize_bwd(dx, entry["resize"])
        if entry.get("from_flat"):
            dx = dx.reshape(dx.shape[0], -1)
        for entry in reversed(tape[:-1]):
            spec = entry["spec"]
            if spec.pool:
                dx = _pool_bwd(dx, entry["pool"])
            dz = self._act_bwd(spec.name, dx, entry["act"])
            dpre, dgamma, dbeta = _bn_bwd(dz, entry["bn"])
            grads[spec.name + "_gamma"] = dgamma
            grads[spec.name + "_beta"] = dbeta
            if spec.kind == "conv":
                dx, dw, _ = _conv_bwd(dpre, entry["cols"], entry["w_eff"])
                grads[spec.name + "_w"] = dw
                if "resize" in entry:
                    dx = _resize_bwd(dx, entry["resize"])
                if entry.get("from_flat"):
                    dx = dx.reshape(dx.shape[0], -1)
            else:
                dx, dw = _fc_bwd(dpre, entry["x_in"], entry["w_eff"])
                grads[spec.name + "_w"] = dw
                if "unflatten" in entry:
                    dx = dx.reshape(entry["unflatten"])
        return grads

    # -- inference-mode forward ----------------------------------------------

    def _eval_bn(self, name):
        return BNParams(
            self.params[name + "_gamma"],
            self.params[name + "_beta"],
            self.running[name + "_mu"],
            self.running[name + "_var"],
            eps=self.cfg.bn_eps,
        )

    def encode(self, x01):
        """Eval-mode features for (N, S, S, 3) [0,1] inputs: (N, feature_dim)."""
        from .layers import bn_forward

        x = np.ascontiguousarray(x01, np.float32)
        prev_bin = False
        spatial = True
        for i, spec in enumerate(self.enc_specs):
            if spec.kind == "conv":
                pv = 0.0 if i == 0 else (-1.0 if prev_bin else 0.0)
                x, _ = _conv_fwd(x, self._w_eff(spec.name), pad_value=pv)
            else:
                if spatial:
                    x = x.reshape(x.shape[0], -1)
                    spatial = False
                x, _ = _fc_fwd(x, self._w_eff(spec.name))
            x = bn_forward(x, self._eval_bn(spec.name))
            x = sign_values(x) if spec.name in self.binarized else np.tanh(x)
            prev_bin = spec.name in self.binarized
            if spec.pool:
                x, _ = _pool_fwd(x)
        return x.astype(np.float32)

    def reconstruct(self, x01):
        """Eval-mode autoencoder output for (N, S, S, 3) [0,1] inputs."""
        from .layers import bn_forward

        x = self.encode(x01)
        spatial = False
        for spec in self.dec_specs:
            if spec.kind == "conv":
                if not spatial:
                    x = x.reshape(x.shape[0], self.bottleneck_hw, self.bottleneck_hw, spec.in_dim)
                    spatial = True
                x, _ = _resize_fwd(x, spec.resize_to)
                x, _ = _conv_fwd(x, self._w_eff(spec.name))
            else:
                x, _ = _fc_fwd(x, self._w_eff(spec.name))
            x = bn_forward(x, self._eval_bn(spec.name))
            x = sign_values(x) if spec.name in self.binarized else np.tanh(x)
        o = self.out_spec
        if not spatial:
            x = x.reshape(x.shape[0], self.bottleneck_hw, self.bottleneck_hw, o.in_dim)
        x, _ = _resize_fwd(x, o.resize_to)
        x, _ = _conv_fwd(x, self._w_eff(o.name), bias=self.params[o.name + "_b"])
        return logistic(x)

    # -- conversion to inference parameter bundles ----------------------------

    def encoder_params(self):
        """EncoderParams for the packed/reference integer-pixel pipeline.

        Requires a fully binarized encoder. Conv1's BN statistics are
        rescaled from the [0,1] training domain into the 8-bit pixel domain
        (mu*255, sigma2*255^2), which preserves sign(BN(v)) exactly.
        """
        layers = []
        for i, spec in enumerate(self.enc_specs):
            if spec.name not in self.binarized:
                raise ValueError(
                    f"layer {spec.name} is not binarized in mode={self.cfg.mode!r}; "
                    "the packed encoder requires a fully binarized encoder"
                )
            w = pack(sign_values(self.params[spec.name + "_w"]))
            mu = self.running[spec.name + "_mu"]
            var = self.running[spec.name + "_var"]
            if i == 0:
                mu = mu * np.float32(255.0)
                var = var * np.float32(255.0**2)
            bn = BNParams(
                self.params[spec.name + "_gamma"],
                self.params[spec.name + "_beta"],
                mu,
                var,
                eps=self.cfg.bn_eps,
            )
            layers.append(EncoderLayer(spec.name, spec.kind, w, bn, spec.pool))
        return EncoderParams(input_size=self.cfg.input_size, layers=layers)

    def decoder_params(self):
        layers = []
        for spec in self.dec_specs:
            binar = spec.name in self.binarized
            w = self.params[spec.name + "_w"]
            layers.append(
                DecoderLayer(
                    spec.name,
                    spec.kind,
                    sign_values(w) if binar else w,
                    self._eval_bn(spec.name),
                    binarized=binar,
                    resize_to=spec.resize_to,
                )
            )
        o = self.out_spec
        ow = self.params[o.name + "_w"]
        out_bin = o.name in self.binarized
        return DecoderParams(
            layers=layers,
            out_weights=sign_values(ow) if out_bin else ow,
            out_bias=self.params[o.name + "_b"],
            out_resize_to=o.resize_to,
            out_binarized=out_bin,
            bottleneck_hw=self.bottleneck_hw,
        )

    def state_dict(self):
        state = {"cfg": self.cfg}
        state.update({"param:" + k: v for k, v in self.params.items()})
        state.update({"running:" + k: v for k, v in self.running.items()})
        return state


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over a parameter dict.

    Binarized layers train through full-precision shadow weights that get
    clipped to [-1, 1] after every step (the sign() of the shadow is what the
    forward pass actually uses).
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_names=()):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.clip_names = frozenset(clip_names)

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            m = self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            step = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            params[k] = (params[k] - step).astype(params[k].dtype)
            if k in self.clip_names:
                np.clip(params[k], -1.0, 1.0, out=params[k])
        return self


def optimizer_step(opt: Adam, params, grads):
    """Single adaptive-moment update; returns the (mutated) optimizer."""
    return opt.step(params, grads)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainedDcae:
    net: DcaeNet
    curve: list  # (epoch, train_mse, val_mse)

    def encoder_params(self):
        return self.net.encoder_params()

    def decoder_params(self):
        return self.net.decoder_params()


def _to_unit(images):
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(images, np.float32)


def train_dcae(train_images, config: TrainConfig, val_images=None, log=None):
    """Train the autoencoder; returns TrainedDcae with the per-epoch curve.

    train_images: (N, S, S, 3) uint8 or [0,1] float. Divergence (non-finite
    loss) raises DivergenceError with the epoch index.
    """
    x = _to_unit(train_images)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ValueError("training set must be a non-empty (N, S, S, 3) array")
    if x.shape[1] != config.input_size:
        raise ValueError(f"images are {x.shape[1]}px, config expects {config.input_size}px")
    xv = _to_unit(val_images) if val_images is not None else None
    rng = np.random.default_rng(config.seed)
    net = DcaeNet(config, rng)
    clip = tuple(n + "_w" for n in net.binarized)
    opt = Adam(net.params, lr=config.learning_rate, clip_names=clip)
    curve = []
    n = x.shape[0]
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            batch = x[idx]
            recon, tape = net.forward_train(batch)
            diff = recon - batch
            loss = float(np.mean(diff.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            total += loss * len(idx)
            seen += len(idx)
            drecon = (2.0 / diff.size) * diff
            grads = net.backward(tape, drecon.astype(np.float32))
            opt.step(net.params, grads)
        train_mse = total / seen
        if xv is not None and len(xv):
            val_mse = _eval_mse(net, xv, bs)
        else:
            val_mse = train_mse
        curve.append((epoch, train_mse, val_mse))
        if log:
            log(f"epoch {epoch}: train_mse={train_mse:.5f} val_mse={val_mse:.5f}")
    return TrainedDcae(net, curve)


def _eval_mse(net, images, bs):
    total, seen = 0.0, 0
    for start in range(0, len(images), bs):
        batch = images[start : start + bs]
        recon = net.reconstruct(batch)
        total += float(np.mean((recon - batch).astype(np.float64) ** 2)) * len(batch)
        seen += len(batch)
    return total / seen


def extract_features(net: DcaeNet, images, batch_size=32):
    """Eval-mode bottleneck features for uint8 or [0,1] images: (N, 64)."""
    x = _to_unit(images)
    out = []
    for start in range(0, len(x), batch_size):
        out.append(net.encode(x[start : start + batch_size]))
    return np.concatenate(out, axis=0)
