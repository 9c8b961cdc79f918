"""Numpy forward and backward passes for :class:`~cnnmap.archs.ArchSpec` networks.

Activations are ``N x H x W x C``; weights are ``kh x kw x C_in x C_out``
so a fully-connected layer is just a convolution spanning its input.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .archs import ArchSpec, LayerSpec

INIT_STD = 0.01


class ShapeError(ValueError):
    pass


@dataclass
class Model:
    """An architecture with concrete weights.

    ``params`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to arrays.
    ``input_config`` records how inputs were built for this model (modality,
    side, channel means), so evaluation can rebuild them the same way.
    """

    arch: ArchSpec
    params: dict
    provenance: dict = field(default_factory=dict)
    input_config: object = None

    def __post_init__(self):
        for l in self.arch.param_layers:
            w = self.params.get(f"{l.name}.weight")
            if w is None or w.shape != l.weight_shape:
                raise ShapeError(f"{l.name}.weight: expected {l.weight_shape}, "
                                 f"got {None if w is None else w.shape}")
            if l.bias and self.params.get(f"{l.name}.bias", np.empty(0)).shape != (l.out_depth,):
                raise ShapeError(f"{l.name}.bias: expected ({l.out_depth},)")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()},
                     copy.deepcopy(self.provenance), self.input_config)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def param_names(arch: ArchSpec) -> list:
    names = []
    for l in arch.param_layers:
        names.append(f"{l.name}.weight")
        if l.bias:
            names.append(f"{l.name}.bias")
    return names


def _random_layer(l: LayerSpec, rng, std, dtype) -> dict:
    if std == "he":
        kh, kw = l.kernel
        s = np.sqrt(2.0 / (kh * kw * l.in_depth))
    else:
        s = float(std)
    out = {f"{l.name}.weight": (rng.standard_normal(l.weight_shape) * s).astype(dtype)}
    if l.bias:
        out[f"{l.name}.bias"] = np.zeros(l.out_depth, dtype=dtype)
    return out


def build_model(arch: ArchSpec, seed: int = 0, std=INIT_STD, pretrained=None, dtype=np.float64) -> Model:
    """Create weights for ``arch``.

    Random layers draw zero-mean Gaussian weights (``std``, or ``"he"`` for
    sqrt(2 / fan_in)) and zero biases from a generator seeded with
    ``seed``. With a ``pretrained`` :class:`~cnnmap.weights.WeightContainer`,
    arrays of matching shape are copied; the first convolution and the
    last fully-connected layer are re-drawn when their shapes changed.
    Any other shape difference is an error.
    """
    rng = np.random.default_rng(seed)
    params = {}
    layers = arch.param_layers
    reshapeable = {layers[0].name, layers[-1].name}
    copied, redrawn = [], []
    for l in layers:
        fresh = _random_layer(l, rng, std, dtype)
        if pretrained is None:
            params.update(fresh)
            continue
        names = list(fresh)
        missing = [n for n in names if n not in pretrained.arrays]
        if missing:
            raise ShapeError(f"pretrained container lacks {missing}")
        if all(pretrained.arrays[n].shape == fresh[n].shape for n in names):
            params.update({n: pretrained.arrays[n].astype(dtype, copy=True) for n in names})
            copied.append(l.name)
        elif l.name in reshapeable:
            params.update(fresh)
            redrawn.append(l.name)
        else:
            shapes = {n: pretrained.arrays[n].shape for n in names}
            raise ShapeError(f"layer {l.name}: container shapes {shapes} do not fit {l.weight_shape}")
    if pretrained is None:
        prov = {"init": "random", "seed": seed, "std": std}
    else:
        prov = {"init": "pretrained", "container": pretrained.container_id, "seed": seed,
                "copied": copied, "reinitialized": redrawn}
    return Model(arch, params, prov)


# --- layer primitives -------------------------------------------------------------------

def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :ho, :wo]  # N, ho, wo, C, kh, kw


def conv_forward(x, w, b, stride, pad):
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if c != cin:
        raise ShapeError(f"convolution expects depth {cin}, got {c}")
    pt, pb, pl, pr = pad
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if any(pad) else x
    ho = (h + pt + pb - kh) // stride + 1
    wo = (wd + pl + pr - kw) // stride + 1
    if (kh, kw) == (xp.shape[1], xp.shape[2]):
        cols = xp.reshape(n, -1)
    else:
        cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    out = cols @ w.reshape(-1, cout)
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, cout), (cols, xp.shape)


def conv_backward(dout, cache, w, stride, pad, need_dx=True):
    cols, xp_shape = cache
    kh, kw, cin, cout = w.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = d2 @ w.reshape(-1, cout).T
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    if (kh, kw) == (xp_shape[1], xp_shape[2]):
        dxp = dcols.reshape(xp_shape)
    else:
        dcols = dcols.reshape(n, ho, wo, kh, kw, cin)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i, j, :]
    pt, pb, pl, pr = pad
    return dxp[:, pt:xp_shape[1] - pb, pl:xp_shape[2] - pr, :], dw, db


def maxpool_forward(x, kernel, stride, pad):
    n, h, w, c = x.shape
    kh, kw = kernel
    pt, pb, pl, pr = pad
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf) if any(pad) else x
    ho = (h + pt + pb - kh) // stride + 1
    wo = (w + pl + pr - kw) // stride + 1
    win = _windows(xp, kh, kw, stride, ho, wo).reshape(n, ho, wo, c, kh * kw)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, xp.shape)


def maxpool_backward(dout, cache, kernel, stride, pad):
    idx, xp_shape = cache
    kh, kw = kernel
    n, ho, wo, c = dout.shape
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dout * (idx == i * kw + j)
    pt, pb, pl, pr = pad
    return dxp[:, pt:xp_shape[1] - pb, pl:xp_shape[2] - pr, :]


def _channel_window_sum(a, size):
    half = (size - 1) // 2
    c = a.shape[-1]
    cs = np.cumsum(np.pad(a, [(0, 0)] * (a.ndim - 1) + [(half + 1, half)]), axis=-1)
    return cs[..., size:size + c] - cs[..., :c]


def lrn_forward(x, params):
    size, kappa, alpha, beta = params
    d = kappa + alpha * _channel_window_sum(x * x, size)
    return x * d ** -beta, (x, d)


def lrn_backward(dout, cache, params):
    size, kappa, alpha, beta = params
    x, d = cache
    inner = _channel_window_sum(dout * x * d ** (-beta - 1), size)
    return dout * d ** -beta - 2 * alpha * beta * x * inner


# --- whole network ---------------------------------------------------------------------

def _as_batch(model: Model, x) -> np.ndarray:
    x = np.asarray(getattr(x, "array", x))
    if x.ndim == 3:
        x = x[None]
    side = model.arch.input_side
    c = model.arch.in_channels
    if x.ndim != 4 or x.shape[1:] != (side, side, c):
        raise ShapeError(f"{model.arch.name} expects inputs of shape {(side, side, c)}, got {x.shape[1:]}")
    return x.astype(model.dtype, copy=False)


def run(model: Model, x, train: bool = False, rng=None, keep_cache: bool = False):
    """Propagate a batch; returns ``(outputs N x head_dim, caches)``.

    Dropout is only active with ``train=True``, which needs ``rng``.
    """
    a = _as_batch(model, x)
    caches = []
    p = model.params
    for l in model.arch.layers:
        cache = None
        if l.kind in ("conv", "fc"):
            a, cache = conv_forward(a, p[f"{l.name}.weight"], p.get(f"{l.name}.bias"), l.stride, l.pad)
        elif l.kind == "relu":
            cache = a > 0
            a = a * cache
        elif l.kind == "maxpool":
            a, cache = maxpool_forward(a, l.kernel, l.stride, l.pad)
        elif l.kind == "lrn":
            a, cache = lrn_forward(a, l.lrn)
        elif l.kind == "dropout" and train and l.rate > 0:
            cache = (rng.random(a.shape) >= l.rate) / (1.0 - l.rate)
            a = a * cache
        if keep_cache:
            caches.append(cache)
    return a.reshape(a.shape[0], -1), caches


def backward(model: Model, caches, dout) -> dict:
    """Gradients of a scalar with respect to every parameter, given its gradient ``dout`` at the output."""
    grads = {}
    p = model.params
    layers = model.arch.layers
    first = next(i for i, l in enumerate(layers) if l.has_params)
    d = dout.reshape(dout.shape[0], 1, 1, -1)
    for i in range(len(layers) - 1, first - 1, -1):
        l, cache = layers[i], caches[i]
        if l.kind in ("conv", "fc"):
            d, gw, gb = conv_backward(d, cache, p[f"{l.name}.weight"], l.stride, l.pad, need_dx=i > first)
            grads[f"{l.name}.weight"] = gw
            if l.bias:
                grads[f"{l.name}.bias"] = gb
        elif l.kind == "relu":
            d = d * cache
        elif l.kind == "maxpool":
            d = maxpool_backward(d, cache, l.kernel, l.stride, l.pad)
        elif l.kind == "lrn":
            d = lrn_backward(d, cache, l.lrn)
        elif l.kind == "dropout" and cache is not None:
            d = d * cache
    return grads


def predict(model: Model, x, batch_size: int = 64) -> np.ndarray:
    """Raw network outputs (``N x 7``) in evaluation mode; quaternions are not normalized."""
    x = np.asarray(getattr(x, "array", x))
    if x.ndim == 3:
        x = x[None]
    outs = [run(model, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, model.arch.head_dim))


def forward(model: Model, net_input) -> np.ndarray:
    """Pose vector for a single ``side x side x n`` input."""
    x = np.asarray(getattr(net_input, "array", net_input))
    if x.ndim != 3:
        raise ShapeError(f"forward takes one H x W x C input, got shape {x.shape}")
    return run(model, x)[0][0]
