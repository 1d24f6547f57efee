"""Convolutional autoencoder over binary myocardium masks.

Plain numpy with a hand-written backward pass. The encoder is a stack of
stride-2 3x3 convolutions with leaky ReLU followed by a dense projection to
the latent vector; the decoder mirrors it with a dense layer and stride-2
transposed convolutions, ending in a sigmoid.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, TrainingError

DEFAULT_WIDTHS = (8, 16, 32, 32, 32, 32)
LOSS_EPS = 1e-7
MAGIC = b"AEV1"


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise InputError("epochs, batch_size, learning_rate and adam_epsilon must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InputError("adam betas must lie in (0, 1)")


@dataclass
class AeModel:
    input_size: int
    d: int
    widths: tuple
    params: dict = field(repr=False)
    slope: float = 0.01

    @property
    def bottleneck(self) -> int:
        return self.input_size >> len(self.widths)

    def param_names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# -- convolution primitives ---------------------------------------------------

def _im2col(x, out_h, out_w):
    """(N, C, H, W) -> (N, C*9, out_h*out_w) for a stride-2, pad-1, 3x3 conv."""
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, out_h, out_w), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + 2 * out_h:2, kj:kj + 2 * out_w:2]
    return cols.reshape(n, c * 9, out_h * out_w)


def _col2im(cols, c, in_h, in_w, out_h, out_w):
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the input grid."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, 3, 3, out_h, out_w)
    xp = np.zeros((n, c, in_h + 2, in_w + 2), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            xp[:, :, ki:ki + 2 * out_h:2, kj:kj + 2 * out_w:2] += cols[:, :, ki, kj]
    return xp[:, :, 1:in_h + 1, 1:in_w + 1]


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    oh, ow = (h + 1) // 2, (wd + 1) // 2
    cols = _im2col(x, oh, ow)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]
    return out.reshape(n, w.shape[0], oh, ow), cols


def _conv_backward(dout, cols, w, in_shape):
    n, f, oh, ow = dout.shape
    d2 = dout.reshape(n, f, oh * ow)
    dw = np.einsum("nfp,nkp->fk", d2, cols).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(f, -1).T, d2)
    dx = _col2im(dcols, in_shape[1], in_shape[2], in_shape[3], oh, ow)
    return dx, dw, db


def _tconv_forward(y, w, b):
    # w: (Cin, Cout, 3, 3); the adjoint of a conv taking Cout channels at 2h to Cin at h.
    n, cin, h, wd = y.shape
    cout = w.shape[1]
    cols = np.matmul(w.reshape(cin, -1).T, y.reshape(n, cin, h * wd))
    out = _col2im(cols, cout, 2 * h, 2 * wd, h, wd)
    return out + b[None, :, None, None]


def _tconv_backward(dout, y, w):
    n, cout, oh, ow = dout.shape
    cin, h, wd = y.shape[1], oh // 2, ow // 2
    dcols = _im2col(dout, h, wd)
    y2 = y.reshape(n, cin, h * wd)
    dy = np.matmul(w.reshape(cin, -1), dcols).reshape(y.shape)
    dw = np.einsum("ncp,nkp->ck", y2, dcols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    return dy, dw, db


def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- model construction ---------------------------------------------------------

def init_model(input_size: int = 64, d: int = 16, widths=DEFAULT_WIDTHS, seed: int = 0,
               slope: float = 0.01) -> AeModel:
    """He-scaled random initialization, deterministic per seed."""
    widths = tuple(int(w) for w in widths)
    if not widths or d < 1:
        raise InputError("need at least one conv layer and d >= 1")
    if input_size % (1 << len(widths)):
        raise InputError(f"input_size {input_size} must be divisible by {1 << len(widths)}")
    rng = np.random.default_rng(seed)
    params = {}
    cin = 1
    for i, cout in enumerate(widths):
        params[f"enc{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
        params[f"enc{i}.b"] = np.zeros(cout)
        cin = cout
    s = input_size >> len(widths)
    flat = widths[-1] * s * s
    params["enc_dense.w"] = rng.normal(0.0, np.sqrt(1.0 / flat), (d, flat))
    params["enc_dense.b"] = np.zeros(d)
    params["dec_dense.w"] = rng.normal(0.0, np.sqrt(2.0 / d), (flat, d))
    params["dec_dense.b"] = np.zeros(flat)
    outs = list(reversed(widths[:-1])) + [1]
    cin = widths[-1]
    for i, cout in enumerate(outs):
        # each output pixel of a stride-2 transposed conv sees ~9/4 taps per input channel
        params[f"dec{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * 9 / 4)), (cin, cout, 3, 3))
        params[f"dec{i}.b"] = np.zeros(cout)
        cin = cout
    return AeModel(input_size=input_size, d=d, widths=widths, params=params, slope=slope)


def _as_batch(model, masks):
    x = np.asarray(masks, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (model.input_size, model.input_size):
        raise InputError(f"expected masks of size {model.input_size}x{model.input_size}, got {x.shape}")
    return x[:, None]


# -- forward / backward -------------------------------------------------------

def _encode_forward(model, x, cache=None):
    p, a = model.params, x
    for i in range(len(model.widths)):
        pre, cols = _conv_forward(a, p[f"enc{i}.w"], p[f"enc{i}.b"])
        if cache is not None:
            cache.append((a.shape, cols, pre))
        a = _lrelu(pre, model.slope)
    flat = a.reshape(a.shape[0], -1)
    if cache is not None:
        cache.append(flat)
    return flat @ p["enc_dense.w"].T + p["enc_dense.b"]


def _decode_forward(model, z, cache=None):
    p = model.params
    s, c = model.bottleneck, model.widths[-1]
    pre = z @ p["dec_dense.w"].T + p["dec_dense.b"]
    if cache is not None:
        cache.append(pre)
    a = _lrelu(pre, model.slope).reshape(z.shape[0], c, s, s)
    n_dec = len(model.widths)
    for i in range(n_dec):
        out = _tconv_forward(a, p[f"dec{i}.w"], p[f"dec{i}.b"])
        if cache is not None:
            cache.append((a, out))
        a = out if i == n_dec - 1 else _lrelu(out, model.slope)
    return a[:, 0]


def encode(model: AeModel, mask) -> np.ndarray:
    """Latent vector(s) for one mask (H, W) or a batch (N, H, W)."""
    x = _as_batch(model, mask)
    z = _encode_forward(model, x)
    return z[0] if np.ndim(mask) == 2 else z


def decode_proba(model: AeModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.ndim != 2 or z2.shape[1] != model.d:
        raise InputError(f"latent dimension {z2.shape[-1]} does not match model d={model.d}")
    prob = _sigmoid(_decode_forward(model, z2))
    return prob[0] if single else prob


def decode(model: AeModel, z):
    """Return ``(probabilities, binary mask)``; the mask thresholds at 0.5."""
    prob = decode_proba(model, z)
    return prob, (prob > 0.5).astype(np.uint8)


def reconstruct(model: AeModel, mask) -> np.ndarray:
    return decode(model, encode(model, mask))[1]


def _bce(prob, target):
    pc = np.clip(prob, LOSS_EPS, 1.0 - LOSS_EPS)
    return float(-np.mean(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc)))


def reconstruction_loss(model: AeModel, masks) -> float:
    """Mean per-pixel binary cross-entropy between the masks and their reconstructions."""
    x = _as_batch(model, masks)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    logits = _decode_forward(model, _encode_forward(model, x))
    return _bce(_sigmoid(logits), x[:, 0])


def loss_and_grad(model: AeModel, masks):
    x = _as_batch(model, masks)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    p, slope = model.params, model.slope
    enc_cache, dec_cache = [], []
    z = _encode_forward(model, x, enc_cache)
    logits = _decode_forward(model, z, dec_cache)
    prob = _sigmoid(logits)
    target = x[:, 0]
    loss = _bce(prob, target)

    # d(loss)/d(logit) is prob - target wherever the clamp is inactive, zero otherwise.
    active = (prob > LOSS_EPS) & (prob < 1.0 - LOSS_EPS)
    g = np.where(active, prob - target, 0.0) / prob.size
    g = g[:, None]

    grads = {}
    n_dec = len(model.widths)
    for i in reversed(range(n_dec)):
        a_in, out = dec_cache[1 + i]
        if i != n_dec - 1:
            g = g * np.where(out > 0, 1.0, slope)
        g, grads[f"dec{i}.w"], grads[f"dec{i}.b"] = _tconv_backward(g, a_in, p[f"dec{i}.w"])
    pre = dec_cache[0]
    g = g.reshape(g.shape[0], -1) * np.where(pre > 0, 1.0, slope)
    grads["dec_dense.w"] = g.T @ z
    grads["dec_dense.b"] = g.sum(axis=0)
    gz = g @ p["dec_dense.w"]

    flat = enc_cache[-1]
    grads["enc_dense.w"] = gz.T @ flat
    grads["enc_dense.b"] = gz.sum(axis=0)
    g = gz @ p["enc_dense.w"]
    for i in reversed(range(len(model.widths))):
        in_shape, cols, pre = enc_cache[i]
        g = g.reshape(pre.shape) * np.where(pre > 0, 1.0, slope)
        g, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = _conv_backward(g, cols, p[f"enc{i}.w"], in_shape)
    return loss, {k: grads[k] for k in p}


def grad(model: AeModel, masks) -> dict:
    """Exact gradients of :func:`reconstruction_loss` for every parameter."""
    return loss_and_grad(model, masks)[1]


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns new parameter and state objects."""
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def train_autoencoder(masks, cfg: TrainConfig, d: int = 16, widths=DEFAULT_WIDTHS,
                      slope: float = 0.01, log=None):
    """Fit an autoencoder on ``masks`` (N, S, S). Returns ``(model, loss_history)``.

    ``loss_history[e]`` is the sample-weighted mean training loss seen during epoch ``e``.
    """
    data = np.asarray(masks, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] != data.shape[2]:
        raise InputError("need a non-empty stack of square masks (N, S, S)")
    model = init_model(data.shape[1], d, widths, seed=cfg.rng_seed, slope=slope)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    state = AdamState()
    history = []
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_and_grad(model, data[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            model.params, state = adam_step(model.params, g, state, cfg)
            total += loss * len(idx)
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    return model, history


# -- model file ---------------------------------------------------------------

def save_model(model: AeModel, path) -> None:
    """Write the AEV1 container: magic, little-endian header, float64 tensors in declaration order."""
    names = model.param_names()
    buf = [MAGIC, struct.pack("<IIId", model.input_size, model.d, len(model.widths), model.slope)]
    buf.append(struct.pack(f"<{len(model.widths)}I", *model.widths))
    buf.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.append(struct.pack("<H", len(raw)) + raw)
        buf.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.append(arr.tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_model(path) -> AeModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not an AEV1 model file")
    try:
        off = 4
        input_size, d, n_layers, slope = struct.unpack_from("<IIId", data, off)
        off += struct.calcsize("<IIId")
        widths = struct.unpack_from(f"<{n_layers}I", data, off)
        off += 4 * n_layers
        (n_tensors,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(n_tensors):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt model file") from exc
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes in model file")
    return AeModel(input_size=input_size, d=d, widths=tuple(widths), params=params, slope=slope)
