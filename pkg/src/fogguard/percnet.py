"""Small convolutional detector with hand-written reverse mode, and the
(teacher-student) perceptual losses over its layer activations.

Layers are indexed 1..L in stack order. Each layer's activation is its
output; the detection head's activation is the post-sigmoid/softmax
prediction tensor of shape ``(S*S*B, 5 + C)`` per sample.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .detcore import Prediction, PredictionGrad
from .errors import ArchitectureMismatch, CheckpointError, MissingTrace, ShapeMismatch
from .fogsynth import FogParams, render_fog
from .imagecore import DepthMap, Image
from .rng import SplitMix64

CONV3 = "conv3x3"
RELU = "relu"
POOL = "maxpool2"
HEAD = "detection_head"
KINDS = (CONV3, RELU, POOL, HEAD)

CKPT_MAGIC = b"FGCKPT1\n"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def kernel(self) -> int:
        return 3 if self.kind == CONV3 else self.stride

    @property
    def param_count(self) -> int:
        if self.kind in (CONV3, HEAD):
            return self.out_channels * self.in_channels * self.kernel**2 + self.out_channels
        return 0


@dataclass(frozen=True)
class PercConfig:
    l_s: int = 1
    l_e: int = 9

    def validate(self, num_layers: int) -> None:
        if not 1 <= self.l_s <= self.l_e <= num_layers:
            raise ValueError(f"need 1 <= l_s <= l_e <= {num_layers}, got ({self.l_s}, {self.l_e})")

    @property
    def divisor(self) -> int:
        # the single-layer range would otherwise divide by zero
        return max(1, self.l_e - self.l_s)


@dataclass(eq=False)
class ToyNet:
    layers: tuple[LayerSpec, ...]
    S: int
    B: int
    C: int
    params: np.ndarray | None = None

    def __post_init__(self):
        self.layers = tuple(self.layers)
        _check_stack(self)
        if self.params is not None:
            self.params = np.asarray(self.params, dtype=np.float64)
            if self.params.shape != (self.param_count,):
                raise ShapeMismatch(f"expected {self.param_count} parameters, got {self.params.shape}")
            if not np.all(np.isfinite(self.params)):
                raise ValueError("parameters must be finite")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers)

    @property
    def input_size(self) -> int:
        pools = sum(1 for l in self.layers if l.kind == POOL)
        return self.S * self.layers[-1].stride * 2**pools

    @property
    def head_channels(self) -> int:
        return self.B * (5 + self.C)

    def with_params(self, params: np.ndarray) -> "ToyNet":
        return ToyNet(self.layers, self.S, self.B, self.C, np.array(params, dtype=np.float64))

    def same_architecture(self, other: "ToyNet") -> bool:
        return (self.layers, self.S, self.B, self.C) == (other.layers, other.S, other.B, other.C)

    def slices(self) -> list[tuple[slice, slice] | None]:
        """Per layer, the (weights, bias) slices into the flat parameter vector."""
        out, pos = [], 0
        for l in self.layers:
            if l.param_count == 0:
                out.append(None)
                continue
            nw = l.param_count - l.out_channels
            out.append((slice(pos, pos + nw), slice(pos + nw, pos + l.param_count)))
            pos += l.param_count
        return out


def _check_stack(net: ToyNet) -> None:
    if not net.layers or net.layers[-1].kind != HEAD:
        raise ValueError("the detection head must be the last layer")
    ch = 3
    for i, l in enumerate(net.layers):
        if l.kind == HEAD and i != len(net.layers) - 1:
            raise ValueError("detection head must be last")
        if l.in_channels != ch:
            raise ValueError(f"layer {i + 1} expects {l.in_channels} channels but receives {ch}")
        if l.kind in (RELU, POOL) and l.out_channels != l.in_channels:
            raise ValueError(f"layer {i + 1} ({l.kind}) must preserve channel count")
        ch = l.out_channels
    if net.layers[-1].out_channels != net.B * (5 + net.C):
        raise ValueError("detection head must emit B*(5+C) channels per cell")


def toy_net(S: int = 4, B: int = 1, C: int = 3, input_size: int = 64,
            widths: Sequence[int] = (8, 16, 16)) -> ToyNet:
    """The pinned architecture: conv-relu-pool, conv-relu-pool, conv-relu, head.

    The head is a per-cell linear map over each cell's ``k x k`` feature
    patch (kernel = stride = feature size / S).
    """
    c1, c2, c3 = widths
    feat = input_size // 4
    if input_size % 4 or feat % S:
        raise ShapeMismatch(f"input size {input_size} incompatible with two pools and S={S}")
    layers = (
        LayerSpec(CONV3, 3, c1), LayerSpec(RELU, c1, c1), LayerSpec(POOL, c1, c1, 2),
        LayerSpec(CONV3, c1, c2), LayerSpec(RELU, c2, c2), LayerSpec(POOL, c2, c2, 2),
        LayerSpec(CONV3, c2, c3), LayerSpec(RELU, c3, c3),
        LayerSpec(HEAD, c3, B * (5 + C), feat // S),
    )
    return ToyNet(layers, S, B, C)


def init_params(net: ToyNet, rng: SplitMix64) -> np.ndarray:
    """Weights ~ U[-sqrt(6/fan_in), +sqrt(6/fan_in)], biases zero."""
    theta = np.zeros(net.param_count)
    for l, sl in zip(net.layers, net.slices()):
        if sl is None:
            continue
        w_sl, _ = sl
        fan_in = l.in_channels * l.kernel**2
        bound = math.sqrt(6.0 / fan_in)
        n = w_sl.stop - w_sl.start
        theta[w_sl] = (2.0 * rng.uniform_array(n) - 1.0) * bound
    return theta


# ---------------------------------------------------------------- forward


@dataclass
class ActivationTrace:
    """Per-layer activations for a batch plus what backward needs."""

    activations: list[np.ndarray]
    caches: list = field(repr=False, default_factory=list)
    params: np.ndarray | None = field(repr=False, default=None)

    @property
    def batch(self) -> int:
        return self.activations[0].shape[0]

    def size(self, l: int) -> int:
        """Number of activations ``a_l`` of layer ``l`` (1-based) per sample."""
        return int(np.prod(self.activations[l - 1].shape[1:]))

    def layer(self, l: int) -> np.ndarray:
        return self.activations[l - 1]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _conv_fwd(x, w, b):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def _conv_bwd(g, cols, w, x_shape):
    n, c, h, wd = x_shape
    o = w.shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = g2.T @ cols
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw.ravel(), db


def _pool_fwd(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax takes the first maximum, fixing tie-breaking
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_bwd(g, idx, x_shape):
    n, c, h, w = x_shape
    win = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _head_patches(x, S):
    n, c, h, w = x.shape
    k = h // S
    return x.reshape(n, c, S, k, S, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * S * S, c * k * k)


def _as_batch(x) -> np.ndarray:
    if isinstance(x, Image):
        return x.data[None]
    a = np.asarray(x, dtype=np.float64)
    return a[None] if a.ndim == 3 else a


def forward_batch(net: ToyNet, x, params: np.ndarray | None = None) -> tuple[list[Prediction], ActivationTrace]:
    """Run ``(N, H, W, 3)`` images through the net; returns predictions and trace."""
    theta = net.params if params is None else np.asarray(params, dtype=np.float64)
    if theta is None:
        raise ValueError("network has no parameters")
    x = _as_batch(x)
    size = net.input_size
    if x.ndim != 4 or x.shape[1:] != (size, size, 3):
        raise ShapeMismatch(f"expected (N, {size}, {size}, 3) input, got {x.shape}")
    a = x.transpose(0, 3, 1, 2)
    acts, caches = [], []
    for l, sl in zip(net.layers, net.slices()):
        if l.kind == CONV3:
            w = theta[sl[0]].reshape(l.out_channels, l.in_channels, 3, 3)
            out, cols = _conv_fwd(a, w, theta[sl[1]])
            caches.append((cols, a.shape))
        elif l.kind == RELU:
            out = np.maximum(a, 0.0)
            caches.append(a > 0)
        elif l.kind == POOL:
            out, idx = _pool_fwd(a)
            caches.append((idx, a.shape))
        else:
            n = a.shape[0]
            if a.shape[2] != net.S * l.stride or a.shape[3] != net.S * l.stride:
                raise ShapeMismatch(f"head expects {net.S * l.stride}px features, got {a.shape[2:]}")
            patches = _head_patches(a, net.S)
            w = theta[sl[0]].reshape(l.out_channels, -1)
            logits = (patches @ w.T + theta[sl[1]]).reshape(n, net.S * net.S * net.B, 5 + net.C)
            out = np.concatenate(
                [logits[..., :4], _sigmoid(logits[..., 4:5]), _softmax(logits[..., 5:])], axis=-1)
            caches.append((patches, a.shape))
        acts.append(out)
        a = out
    head = acts[-1]
    preds = [
        Prediction(net.S, net.B, net.C, head[i, :, :4].copy(), head[i, :, 4].copy(), head[i, :, 5:].copy(),
                   float(size), float(size))
        for i in range(head.shape[0])
    ]
    return preds, ActivationTrace(acts, caches, theta)


def forward(net: ToyNet, img: Image, params: np.ndarray | None = None) -> tuple[Prediction, ActivationTrace]:
    preds, trace = forward_batch(net, img, params)
    return preds[0], trace


# ---------------------------------------------------------------- backward


def head_grad(preds_grads: Sequence[PredictionGrad]) -> np.ndarray:
    """Stack per-sample prediction gradients into the head activation layout."""
    return np.stack([np.concatenate([g.box, g.obj[:, None], g.cls], axis=1) for g in preds_grads])


def backward(net: ToyNet, trace: ActivationTrace | None, act_grads: dict[int, np.ndarray]) -> np.ndarray:
    """Gradient over the flat parameters of ``sum_l <act_grads[l], a_l>``.

    ``act_grads`` maps 1-based layer indices to arrays shaped like the
    traced activations of that layer (batch included).
    """
    if trace is None or not trace.caches:
        raise MissingTrace("backward needs the trace of a prior forward pass")
    theta = trace.params
    grad = np.zeros(net.param_count)
    g = None
    for li in range(net.L, 0, -1):
        if li in act_grads:
            extra = np.asarray(act_grads[li], dtype=np.float64)
            if extra.shape != trace.activations[li - 1].shape:
                raise ShapeMismatch(f"layer {li} gradient shape {extra.shape} != {trace.activations[li - 1].shape}")
            g = extra if g is None else g + extra
        if g is None:
            continue
        l, sl, cache = net.layers[li - 1], net.slices()[li - 1], trace.caches[li - 1]
        if l.kind == HEAD:
            patches, in_shape = cache
            out = trace.activations[li - 1]
            obj = out[..., 4:5]
            cls = out[..., 5:]
            gcls = g[..., 5:]
            dlog = np.concatenate(
                [g[..., :4], g[..., 4:5] * obj * (1.0 - obj),
                 cls * (gcls - (gcls * cls).sum(axis=-1, keepdims=True))], axis=-1)
            g2 = dlog.reshape(-1, l.out_channels)
            w = theta[sl[0]].reshape(l.out_channels, -1)
            grad[sl[0]] += (g2.T @ patches).ravel()
            grad[sl[1]] += g2.sum(axis=0)
            n, c, h, wd = in_shape
            k = h // net.S
            dp = (g2 @ w).reshape(n, net.S, net.S, c, k, k)
            g = dp.transpose(0, 3, 1, 4, 2, 5).reshape(in_shape)
        elif l.kind == RELU:
            g = g * cache
        elif l.kind == POOL:
            idx, in_shape = cache
            g = _pool_bwd(g, idx, in_shape)
        else:
            cols, in_shape = cache
            w = theta[sl[0]].reshape(l.out_channels, l.in_channels, 3, 3)
            g, dw, db = _conv_bwd(g, cols, w, in_shape)
            grad[sl[0]] += dw
            grad[sl[1]] += db
    return grad


# ---------------------------------------------------------------- losses


def perc_terms(trace_a: ActivationTrace, trace_b: ActivationTrace, cfg: PercConfig,
               num_layers: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Per-sample perceptual loss between two traces, and its gradient w.r.t. ``trace_a``.

    The gradient w.r.t. ``trace_b`` is the negation.
    """
    cfg.validate(num_layers)
    n = trace_a.batch
    loss = np.zeros(n)
    grads = {}
    for l in range(cfg.l_s, cfg.l_e + 1):
        diff = trace_a.layer(l) - trace_b.layer(l)
        if diff.shape != trace_b.layer(l).shape:
            raise ShapeMismatch("traces have different shapes")
        denom = cfg.divisor * trace_a.size(l)
        loss += (diff.reshape(n, -1) ** 2).sum(axis=1) / denom
        grads[l] = 2.0 * diff / denom
    return loss, grads


def perceptual_loss(net: ToyNet, params: np.ndarray | None, xa: Image, xb: Image, cfg: PercConfig) -> float:
    _, ta = forward_batch(net, xa, params)
    _, tb = forward_batch(net, xb, params)
    return float(perc_terms(ta, tb, cfg, net.L)[0][0])


def perceptual_loss_and_grad(net: ToyNet, params: np.ndarray | None, xa: Image, xb: Image,
                             cfg: PercConfig) -> tuple[float, np.ndarray]:
    _, ta = forward_batch(net, xa, params)
    _, tb = forward_batch(net, xb, params)
    loss, grads = perc_terms(ta, tb, cfg, net.L)
    g = backward(net, ta, grads) - backward(net, tb, grads)
    return float(loss[0]), g


def _ts_inputs(student: ToyNet, teacher: ToyNet, x_clear: Image, fog: tuple[DepthMap, FogParams]):
    if not student.same_architecture(teacher):
        raise ArchitectureMismatch("student and teacher layer stacks differ")
    depth, params = fog
    return render_fog(x_clear, depth, params)


def ts_perceptual_loss(student: ToyNet, teacher: ToyNet, x_clear: Image,
                       fog: tuple[DepthMap, FogParams], cfg: PercConfig) -> float:
    """Perceptual distance between the student on fogged ``x_clear`` and the teacher on ``x_clear``."""
    foggy = _ts_inputs(student, teacher, x_clear, fog)
    _, ts = forward_batch(student, foggy)
    _, tt = forward_batch(teacher, x_clear)
    return float(perc_terms(ts, tt, cfg, student.L)[0][0])


def ts_perceptual_loss_and_grad(student: ToyNet, teacher: ToyNet, x_clear: Image,
                                fog: tuple[DepthMap, FogParams], cfg: PercConfig) -> tuple[float, np.ndarray]:
    """Loss and gradient over the student parameters (teacher frozen)."""
    foggy = _ts_inputs(student, teacher, x_clear, fog)
    _, ts = forward_batch(student, foggy)
    _, tt = forward_batch(teacher, x_clear)
    loss, grads = perc_terms(ts, tt, cfg, student.L)
    return float(loss[0]), backward(student, ts, grads)


# ---------------------------------------------------------------- checkpoints


def _header(net: ToyNet) -> dict:
    return {
        "layers": [[l.kind, l.in_channels, l.out_channels, l.stride] for l in net.layers],
        "S": net.S, "B": net.B, "C": net.C,
        "param_count": net.param_count,
    }


def save_checkpoint(net: ToyNet, path: str | os.PathLike) -> None:
    """``FGCKPT1\\n`` + one-line JSON header + little-endian f64 parameters."""
    if net.params is None:
        raise ValueError("network has no parameters")
    header = json.dumps(_header(net), sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(net.params, dtype="<f8").tobytes())


def load_checkpoint(path: str | os.PathLike) -> ToyNet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    end = buf.find(b"\n", len(CKPT_MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        hdr = json.loads(buf[len(CKPT_MAGIC):end])
        layers = tuple(LayerSpec(k, i, o, s) for k, i, o, s in hdr["layers"])
        net = ToyNet(layers, int(hdr["S"]), int(hdr["B"]), int(hdr["C"]))
        count = int(hdr["param_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    if count != net.param_count:
        raise CheckpointError(f"{path}: header says {count} parameters, architecture has {net.param_count}")
    payload = buf[end + 1:]
    if len(payload) != 8 * count:
        raise CheckpointError(f"{path}: expected {8 * count} payload bytes, got {len(payload)}")
    return net.with_params(np.frombuffer(payload, dtype="<f8").astype(np.float64))
