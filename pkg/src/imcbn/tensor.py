"""Dense numpy layer kernels and a small sequential network.

Tensors are plain ``numpy.ndarray`` objects. Parameters and activations are
kept as float32; reductions and matrix products accumulate in float64 and
round back to the input dtype.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

ACC = np.float64


class ShapeError(ValueError):
    """Raised when tensor extents do not compose."""


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlate an NCHW input with an OIKK weight.

    Returns ``(out, cache)``; pass ``cache`` to :func:`conv2d_backward`.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"input has {c} channels but weight expects {i} (weight shape {w.shape})")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, K, K) -> (N*Ho*Wo, C*K*K), column order matches w.reshape(O, -1)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw).astype(ACC)
    wmat = w.reshape(o, -1).astype(ACC)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    cache = {"x_shape": x.shape, "w": w, "cols": cols, "stride": stride, "pad": pad,
             "out_shape": (n, o, ho, wo)}
    return np.ascontiguousarray(out.astype(x.dtype)), cache


def conv2d_backward(dout: np.ndarray, cache: Optional[dict], need_dweight: bool = True):
    """Gradients of a convolution: ``(dinput, dweight)``.

    ``dweight`` is ``None`` when ``need_dweight`` is false (frozen weights).
    """
    if cache is None:
        raise RuntimeError("conv2d_backward called without a forward cache")
    if tuple(dout.shape) != tuple(cache["out_shape"]):
        raise ShapeError(f"dout shape {dout.shape} != forward output {cache['out_shape']}")
    n, c, h, wd = cache["x_shape"]
    w = cache["w"]
    o, _, kh, kw = w.shape
    stride, pad = cache["stride"], cache["pad"]
    _, _, ho, wo = dout.shape

    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o).astype(ACC)
    dweight = None
    if need_dweight:
        dweight = (d2.T @ cache["cols"]).reshape(w.shape).astype(w.dtype)
    dcols = (d2 @ w.reshape(o, -1).astype(ACC)).reshape(n, ho, wo, c, kh, kw)

    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=ACC)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + hs : stride, b : b + ws : stride] += dcols[..., a, b].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx.astype(dout.dtype)), dweight


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == n):
            raise ShapeError("BN state vectors must share one channel count")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")

    @classmethod
    def fresh(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BNState":
        f = np.float32
        return cls(np.ones(channels, f), np.zeros(channels, f), np.zeros(channels, f),
                   np.ones(channels, f), eps, momentum)

    @property
    def channels(self) -> int:
        return len(self.gamma)


def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects NCHW or NC input, got shape {x.shape}")


def batchnorm_forward(x: np.ndarray, state: BNState, mode: str = "train",
                      update_running: bool = True, cumulative: Optional[dict] = None):
    """Normalize per channel; returns ``(y, cache)``.

    ``train`` and ``adapt`` use population batch statistics and, unless
    ``update_running`` is false, fold them into the running estimates with
    ``state.momentum``. When ``cumulative`` is a dict the running estimates
    are instead the exact average over every batch seen so far (the dict
    carries the accumulators). ``eval`` uses the running estimates and
    returns a cache that cannot be differentiated.
    """
    axes, bshape = _bn_axes(x)
    c = x.shape[1]
    if c != state.channels:
        raise ShapeError(f"input has {c} channels, BN state has {state.channels}")
    xa = x.astype(ACC)
    if mode in ("train", "adapt"):
        count = int(np.prod([x.shape[a] for a in axes]))
        if count == 0:
            raise ValueError("batch statistics need a nonempty batch")
        mean = xa.mean(axis=axes)
        var = ((xa - mean.reshape(bshape)) ** 2).mean(axis=axes)
        if update_running:
            if cumulative is not None:
                k = cumulative.get("batches", 0)
                cumulative["mean"] = cumulative.get("mean", 0.0) + mean
                cumulative["var"] = cumulative.get("var", 0.0) + var
                cumulative["batches"] = k + 1
                state.running_mean = (cumulative["mean"] / (k + 1)).astype(state.running_mean.dtype)
                state.running_var = (cumulative["var"] / (k + 1)).astype(state.running_var.dtype)
            else:
                m = state.momentum
                state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
                state.running_var = ((1 - m) * state.running_var + m * var).astype(state.running_var.dtype)
    elif mode == "eval":
        mean = state.running_mean.astype(ACC)
        var = state.running_var.astype(ACC)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xa - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = state.gamma.astype(ACC).reshape(bshape) * xhat + state.beta.astype(ACC).reshape(bshape)
    cache = {"mode": mode, "xhat": xhat, "inv_std": inv_std, "gamma": state.gamma, "axes": axes,
             "bshape": bshape}
    return y.astype(x.dtype), cache


def batchnorm_backward(dy: np.ndarray, cache: Optional[dict]):
    """Returns ``(dgamma, dbeta, dx)``; requires a batch-statistics cache."""
    if cache is None:
        raise RuntimeError("batchnorm_backward called without a forward cache")
    if cache["mode"] == "eval":
        raise RuntimeError("batchnorm_backward needs a train/adapt-mode forward (batch statistics)")
    axes, bshape = cache["axes"], cache["bshape"]
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    d = dy.astype(ACC)
    m = int(np.prod([dy.shape[a] for a in axes]))
    dbeta = d.sum(axis=axes)
    dgamma = (d * xhat).sum(axis=axes)
    g = cache["gamma"].astype(ACC)
    dx = (g * inv_std).reshape(bshape) / m * (
        m * d - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape))
    return dgamma.astype(np.float32), dbeta.astype(np.float32), dx.astype(dy.dtype)


# ---------------------------------------------------------------------------
# auxiliary layers
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dout, 0).astype(dout.dtype)


def _pool_windows(x: np.ndarray, k: int, stride: int):
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, k, stride, 0), _out_extent(w, k, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride], ho, wo


def maxpool_forward(x: np.ndarray, k: int = 2, stride: Optional[int] = None):
    stride = stride or k
    win, ho, wo = _pool_windows(x, k, stride)
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), {"x_shape": x.shape, "arg": arg, "k": k, "stride": stride}


def maxpool_backward(dout: np.ndarray, cache: dict) -> np.ndarray:
    n, c, h, w = cache["x_shape"]
    k, s, arg = cache["k"], cache["stride"], cache["arg"]
    ho, wo = arg.shape[2:]
    dx = np.zeros((n, c, h, w), dtype=ACC)
    oy, ox = np.meshgrid(np.arange(ho) * s, np.arange(wo) * s, indexing="ij")
    rows = oy[None, None] + arg // k
    cols = ox[None, None] + arg % k
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (nn_[..., None, None], cc[..., None, None], rows, cols), dout)
    return dx.astype(dout.dtype)


def avgpool_forward(x: np.ndarray, k: int = 2, stride: Optional[int] = None):
    stride = stride or k
    win, ho, wo = _pool_windows(x, k, stride)
    out = win.astype(ACC).mean(axis=(-2, -1)).astype(x.dtype)
    return out, {"x_shape": x.shape, "k": k, "stride": stride}


def avgpool_backward(dout: np.ndarray, cache: dict) -> np.ndarray:
    n, c, h, w = cache["x_shape"]
    k, s = cache["k"], cache["stride"]
    ho, wo = dout.shape[2:]
    dx = np.zeros((n, c, h, w), dtype=ACC)
    share = dout.astype(ACC) / (k * k)
    for a in range(k):
        for b in range(k):
            dx[:, :, a : a + (ho - 1) * s + 1 : s, b : b + (wo - 1) * s + 1 : s] += share
    return dx.astype(dout.dtype)


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fc input {x.shape} incompatible with weight {w.shape}")
    out = x.astype(ACC) @ w.astype(ACC).T + b.astype(ACC)
    return out.astype(x.dtype), {"x": x, "w": w}


def fc_backward(dout: np.ndarray, cache: dict, need_dweight: bool = True):
    d = dout.astype(ACC)
    dx = (d @ cache["w"].astype(ACC)).astype(dout.dtype)
    if not need_dweight:
        return dx, None, None
    dw = (d.T @ cache["x"].astype(ACC)).astype(np.float32)
    db = d.sum(axis=0).astype(np.float32)
    return dx, dw, db


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    n, c = logits.shape
    t = np.asarray(targets)
    if t.shape != (n,) or np.any(t < 0) or np.any(t >= c):
        raise ValueError(f"targets must be {n} class indices in [0, {c})")
    z = logits.astype(ACC)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), t].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), t] -= 1.0
    return float(loss), (dlogits / n).astype(logits.dtype)


def fake_quantize(x: np.ndarray, bits: int = 8) -> np.ndarray:
    """Uniform symmetric per-tensor quantize-dequantize (round half away from zero)."""
    m = float(np.max(np.abs(x))) if x.size else 0.0
    if m == 0.0 or not np.isfinite(m):
        return x
    qmax = 2 ** (bits - 1) - 1
    scaled = x.astype(ACC) * (qmax / m)
    q = np.clip(np.sign(scaled) * np.floor(np.abs(scaled) + 0.5), -qmax, qmax)
    return (q * (m / qmax)).astype(x.dtype)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv", "bn", "relu", "maxpool", "avgpool", "fc")


@dataclass
class NetworkSpec:
    """Sequential layer list ending in one fc classifier.

    Each layer is a dict: ``{"type": "conv", "out": 16, "k": 3, "stride": 1, "pad": 1}``,
    ``{"type": "bn"}``, ``{"type": "relu"}``, ``{"type": "maxpool", "k": 2}``,
    ``{"type": "avgpool", "k": 2}``, ``{"type": "fc", "out": 10}``.
    """

    layers: list
    input_shape: tuple
    classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        self.validate()

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (C, H, W), got {self.input_shape}")
        kinds = [layer.get("type") for layer in self.layers]
        bad = [k for k in kinds if k not in LAYER_KINDS]
        if bad:
            raise ValueError(f"unsupported layer types {bad}")
        if kinds.count("fc") != 1 or kinds[-1] != "fc":
            raise ValueError("network must end in exactly one fc classifier")
        if self.layers[-1]["out"] != self.classes:
            raise ShapeError(f"classifier has {self.layers[-1]['out']} outputs, expected {self.classes}")
        self.shapes()

    def shapes(self) -> list:
        """Per-layer output shape (without batch), validating composition."""
        c, h, w = self.input_shape
        out = []
        flat = None
        for i, layer in enumerate(self.layers):
            t = layer["type"]
            if t == "conv":
                k, s, p = layer.get("k", 3), layer.get("stride", 1), layer.get("pad", 0)
                h, w = _out_extent(h, k, s, p), _out_extent(w, k, s, p)
                c = layer["out"]
            elif t in ("maxpool", "avgpool"):
                k = layer.get("k", 2)
                s = layer.get("stride", k)
                h, w = _out_extent(h, k, s, 0), _out_extent(w, k, s, 0)
            elif t == "fc":
                flat = c * h * w
                c, h, w = layer["out"], 1, 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i} ({t}) collapses spatial extent")
            out.append((c, h, w) if t != "fc" else (c,))
        self._fc_in = flat
        return out

    def to_dict(self) -> dict:
        return {"layers": self.layers, "input_shape": list(self.input_shape), "classes": self.classes}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["layers"], tuple(d["input_shape"]), int(d["classes"]))


def smallconv_spec(input_shape=(1, 16, 16), classes: int = 4) -> NetworkSpec:
    """Desk-scale conv-BN-ReLU-pool x2 + fc network."""
    return NetworkSpec(
        [
            {"type": "conv", "out": 16, "k": 3, "stride": 1, "pad": 1},
            {"type": "bn"}, {"type": "relu"}, {"type": "maxpool", "k": 2},
            {"type": "conv", "out": 32, "k": 3, "stride": 1, "pad": 1},
            {"type": "bn"}, {"type": "relu"}, {"type": "maxpool", "k": 2},
            {"type": "fc", "out": classes},
        ],
        input_shape, classes)


@dataclass
class GradientSet:
    dgamma: dict = field(default_factory=dict)
    dbeta: dict = field(default_factory=dict)
    dweights: Optional[dict] = None


class Network:
    """Parameters plus forward/backward over a :class:`NetworkSpec`.

    Conv weights are named ``conv1, conv2, ...``; BN layers ``bn1, ...``;
    the classifier contributes ``fc.weight`` and ``fc.bias``.
    """

    def __init__(self, spec: NetworkSpec, weights: dict, bn: dict):
        self.spec = spec
        self.weights = weights
        self.bn = bn
        self.names = _layer_names(spec)
        self.act_quant_bits: Optional[int] = None
        self._caches: Optional[list] = None
        self._fc_in_shape = None
        self.history: list = []

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int = 0, eps: float = 1e-5, momentum: float = 0.1) -> "Network":
        rng = np.random.default_rng(seed)
        weights, bn = {}, {}
        c = spec.input_shape[0]
        shapes = spec.shapes()
        for name, layer, shp in zip(_layer_names(spec), spec.layers, shapes):
            t = layer["type"]
            if t == "conv":
                k = layer.get("k", 3)
                fan_in = c * k * k
                weights[name] = (rng.standard_normal((layer["out"], c, k, k)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            elif t == "bn":
                bn[name] = BNState.fresh(c, eps, momentum)
            elif t == "fc":
                fan_in = spec._fc_in
                weights["fc.weight"] = (rng.standard_normal((layer["out"], fan_in)) * np.sqrt(1.0 / fan_in)).astype(np.float32)
                weights["fc.bias"] = np.zeros(layer["out"], np.float32)
            if t != "fc":
                c = shp[0]
        return cls(spec, weights, bn)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    @property
    def conv_names(self) -> list:
        return [n for n, layer in zip(self.names, self.spec.layers) if layer["type"] == "conv"]

    def forward(self, x: np.ndarray, mode: str = "eval", update_running: bool = True,
                cumulative: Optional[dict] = None, keep_cache: bool = False) -> np.ndarray:
        """Logits for an NCHW batch.

        ``mode`` applies to every BN layer. ``cumulative`` maps BN names to
        accumulator dicts for exact running-stat averaging.
        """
        caches = [] if keep_cache else None
        h = x if x.dtype == np.float64 else x.astype(np.float32)
        for name, layer in zip(self.names, self.spec.layers):
            t = layer["type"]
            if t == "conv":
                if self.act_quant_bits:
                    h = fake_quantize(h, self.act_quant_bits)
                h, cache = conv2d_forward(h, self.weights[name], layer.get("stride", 1), layer.get("pad", 0))
            elif t == "bn":
                acc = cumulative.setdefault(name, {}) if cumulative is not None else None
                h, cache = batchnorm_forward(h, self.bn[name], mode, update_running, acc)
            elif t == "relu":
                h, cache = relu_forward(h)
            elif t == "maxpool":
                h, cache = maxpool_forward(h, layer.get("k", 2), layer.get("stride"))
            elif t == "avgpool":
                h, cache = avgpool_forward(h, layer.get("k", 2), layer.get("stride"))
            else:
                self._fc_in_shape = h.shape
                h, cache = fc_forward(h.reshape(h.shape[0], -1), self.weights["fc.weight"], self.weights["fc.bias"])
            if keep_cache:
                caches.append(cache)
        self._caches = caches
        return h

    def backward(self, dlogits: np.ndarray, weight_grads: bool = False) -> GradientSet:
        """Backpropagate from the last ``forward(..., keep_cache=True)``."""
        if not self._caches:
            raise RuntimeError("backward needs a preceding forward with keep_cache=True")
        grads = GradientSet(dweights={} if weight_grads else None)
        d = dlogits
        for name, layer, cache in reversed(list(zip(self.names, self.spec.layers, self._caches))):
            t = layer["type"]
            if t == "fc":
                d, dw, db = fc_backward(d, cache, weight_grads)
                if weight_grads:
                    grads.dweights["fc.weight"], grads.dweights["fc.bias"] = dw, db
                d = d.reshape(self._fc_in_shape)
            elif t == "conv":
                d, dw = conv2d_backward(d, cache, weight_grads)
                if weight_grads:
                    grads.dweights[name] = dw
            elif t == "bn":
                dg, db, d = batchnorm_backward(d, cache)
                grads.dgamma[name], grads.dbeta[name] = dg, db
            elif t == "relu":
                d = relu_backward(d, cache)
            elif t == "maxpool":
                d = maxpool_backward(d, cache)
            elif t == "avgpool":
                d = avgpool_backward(d, cache)
        self._caches = None
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size], "eval").argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _layer_names(spec: NetworkSpec) -> list:
    counts: dict[str, int] = {}
    names = []
    for layer in spec.layers:
        t = layer["type"]
        if t == "fc":
            names.append("fc")
            continue
        counts[t] = counts.get(t, 0) + 1
        names.append(f"{t}{counts[t]}")
    return names


def param_checksum(arrays: dict[str, Any]) -> str:
    """SHA-256 over the raw bytes of named arrays, in sorted name order."""
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()
