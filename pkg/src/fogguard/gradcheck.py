"""Central finite-difference checks of the hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import GroundTruthBox
from .detcore import encode_grid, objdet_loss, objdet_loss_and_grad
from .fogsynth import FogParams, pseudo_depth, render_fog
from .imagecore import Image
from .percnet import (POOL, RELU, PercConfig, ToyNet, backward, forward, head_grad, init_params, perceptual_loss,
                      perceptual_loss_and_grad, toy_net, ts_perceptual_loss, ts_perceptual_loss_and_grad)
from .rng import SplitMix64

STEP = 1e-4
TOLERANCE = 1e-4
# differences below this are finite-difference noise, not gradient error
ABS_FLOOR = 1e-7
# smallest step tried when a probe straddles a ReLU or max-pool switch
MIN_STEP = 1e-8


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    kinks: int = 0


def rel_err(a: np.ndarray, n: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.empty_like(theta)
    t = theta.copy()
    for i in range(theta.size):
        v = t[i]
        t[i] = v + h
        fp = f(t)
        t[i] = v - h
        fm = f(t)
        t[i] = v
        g[i] = (fp - fm) / (2 * h)
    return g


def activation_pattern(net: ToyNet, inputs: list[Image], theta: np.ndarray) -> bytes:
    """ReLU signs and max-pool winners; the loss is smooth in theta while this stays fixed."""
    parts = []
    for x in inputs:
        _, trace = forward(net, x, theta)
        for l, cache in zip(net.layers, trace.caches):
            if l.kind == RELU:
                parts.append(np.packbits(cache).tobytes())
            elif l.kind == POOL:
                parts.append(cache[0].tobytes())
    return b"".join(parts)


def _smooth_step(pattern: Callable[[np.ndarray], bytes], theta: np.ndarray, i: int, h: float) -> float | None:
    """Largest h / 10^k whose probes theta_i +- h keep the activation pattern, or None if h already does."""
    base = pattern(theta)
    t = theta.copy()
    first = True
    while h >= MIN_STEP:
        t[i] = theta[i] + h
        same = pattern(t) == base
        t[i] = theta[i] - h
        same = same and pattern(t) == base
        if same:
            return None if first else h
        first = False
        h /= 10
    return h * 10


def compare(name: str, f: Callable[[np.ndarray], float], analytic: np.ndarray, theta: np.ndarray,
            h: float = STEP, pattern: Callable[[np.ndarray], bytes] | None = None) -> CheckResult:
    """Max relative error of ``analytic`` against central differences of ``f``.

    Central differences are only valid where ``f`` is differentiable on
    [theta_i - h, theta_i + h]. With ``pattern`` given, a coordinate that
    misses the tolerance and whose probes cross a ReLU or max-pool switch is
    re-differenced at the largest smaller step that stays on one side; the
    count of such coordinates is reported as ``kinks``.
    """
    num = numeric_grad(f, theta, h)
    err = rel_err(analytic, num)
    kinks = 0
    if pattern is not None:
        for i in np.flatnonzero(err >= TOLERANCE):
            step = _smooth_step(pattern, theta, int(i), h)
            if step is None:
                continue
            kinks += 1
            t = theta.copy()
            t[i] = theta[i] + step
            fp = f(t)
            t[i] = theta[i] - step
            num[i] = (fp - f(t)) / (2 * step)
            err[i] = rel_err(analytic[i], num[i])
    k = int(np.argmax(err))
    return CheckResult(name, float(err[k]), k, float(analytic[k]), float(num[k]), kinks)


def pinned_net(size: int = 8) -> ToyNet:
    """The toy channel stack at a small input; S=2 keeps one feature pixel per head cell."""
    return toy_net(S=2, B=1, C=3, input_size=size)


def run(l_s: int, l_e: int, size: int = 8, seed: int = 0) -> list[CheckResult]:
    """Check objdet, perceptual and teacher-student perceptual gradients over all parameters."""
    net = pinned_net(size)
    cfg = PercConfig(l_s, l_e)
    cfg.validate(net.L)
    rng = SplitMix64(seed)
    theta = init_params(net, rng)
    # nonzero biases so every bias gradient is exercised
    theta = theta + 0.05 * (rng.uniform_array(theta.size) - 0.5)
    x = Image(rng.uniform_array(size * size * 3).reshape(size, size, 3))
    x2 = Image(np.clip(x.data + 0.2 * (rng.uniform_array(x.data.size).reshape(x.data.shape) - 0.5), 0, 1))
    boxes = [GroundTruthBox(0, 0.5, 1.0, 3.5, 3.0), GroundTruthBox(2, 4.5, 4.0, 7.5, 7.5)]
    scale = size / 8.0
    boxes = [GroundTruthBox(b.class_id, b.x_min * scale, b.y_min * scale, b.x_max * scale, b.y_max * scale)
             for b in boxes]
    label = encode_grid(boxes, size, size, net.S, net.B, net.C)

    out = []
    pred, trace = forward(net, x, theta)
    _, pg = objdet_loss_and_grad(pred, label)
    g = backward(net, trace, {net.L: head_grad([pg])})
    out.append(compare("objdet", lambda t: objdet_loss(forward(net, x, t)[0], label), g, theta,
                       pattern=lambda t: activation_pattern(net, [x], t)))

    _, g = perceptual_loss_and_grad(net, theta, x, x2, cfg)
    out.append(compare("perceptual", lambda t: perceptual_loss(net, t, x, x2, cfg), g, theta,
                       pattern=lambda t: activation_pattern(net, [x, x2], t)))

    teacher = net.with_params(theta + 0.1 * (rng.uniform_array(theta.size) - 0.5))
    fog = (pseudo_depth(size, size), FogParams(0.15))
    foggy = render_fog(x, *fog)
    _, g = ts_perceptual_loss_and_grad(net.with_params(theta), teacher, x, fog, cfg)
    out.append(compare("ts_perceptual",
                       lambda t: ts_perceptual_loss(net.with_params(t.copy()), teacher, x, fog, cfg), g, theta,
                       pattern=lambda t: activation_pattern(net, [foggy], t)))
    return out
