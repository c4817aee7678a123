"""Teacher training and the fog-aware teacher-student loop, both plain SGD."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dataset import REAL_FOG, DatasetSpec, Sample, sample_depth
from .detcore import DetectionRecord, GridLabel, decode_boxes, encode_grid, objdet_loss_and_grad
from .errors import ArchitectureMismatch, TrainingDiverged
from .evalmap import mean_ap, truths_from_dataset
from .fogsynth import DEFAULT_AIRLIGHT, DEFAULT_DEPTH_MAX, FogDistribution, render_fog_array, sample_beta, transmission
from .imagecore import DepthMap, Image, load_ppm
from .percnet import PercConfig, ToyNet, backward, forward_batch, head_grad, init_params
from .rng import SplitMix64

log = logging.getLogger(__name__)

# full-scale reference settings: lr 0.001, batch 16, 600 epochs


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 4
    lambda1: float = 1.0
    lambda2: float = 1.0
    perc: PercConfig = PercConfig(1, 9)
    fog_dist: FogDistribution = FogDistribution(0.0, 0.15)
    seed: int = 0
    depth_mode: str = "pfm"
    objdet_input: str = "foggy"
    signed_conf: bool = False
    airlight: float = DEFAULT_AIRLIGHT
    depth_max: float = DEFAULT_DEPTH_MAX

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.depth_mode not in ("pfm", "pseudo"):
            raise ValueError(f"unknown depth mode {self.depth_mode!r}")
        if self.objdet_input not in ("clear", "foggy"):
            raise ValueError(f"objdet_input must be clear or foggy, got {self.objdet_input!r}")


@dataclass
class EpochStats:
    epoch: int
    objdet: float
    ts_perc: float
    clear: int
    real_fog: int


@dataclass
class TrainReport:
    phase: str
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def clear_seen(self) -> int:
        return sum(e.clear for e in self.epochs)

    @property
    def real_fog_seen(self) -> int:
        return sum(e.real_fog for e in self.epochs)

    def json_records(self) -> list[dict]:
        """Per-epoch records; wall time is left out so reruns compare byte-identically."""
        return [{"phase": self.phase, **asdict(e)} for e in self.epochs]


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if params.shape != grad.shape:
        raise ValueError("parameter and gradient shapes differ")
    return params - lr * grad


@dataclass
class _Item:
    sample: Sample
    image: np.ndarray
    label: GridLabel
    real_fog: bool


def _load(net: ToyNet, ds: DatasetSpec, real_fog: bool | None = None) -> list[_Item]:
    """Images and grid labels; ``real_fog=None`` takes the flag from each sample's domain tag."""
    items = []
    for s in ds.samples:
        img = load_ppm(s.image_path)
        label = encode_grid(list(s.boxes), img.width, img.height, net.S, net.B, net.C)
        fog = s.domain_tag == REAL_FOG if real_fog is None else real_fog
        items.append(_Item(s, img.data, label, fog))
    return items


def _check_finite(value: float, grad: np.ndarray, where: str) -> None:
    if not math.isfinite(value) or not np.all(np.isfinite(grad)):
        raise TrainingDiverged(f"non-finite loss or gradient during {where}")


def _batches(order: list[int], size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def train_teacher(net: ToyNet, ds_cf: DatasetSpec, cfg: TrainConfig,
                  on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[np.ndarray, TrainReport]:
    """Minimize the mean detection loss over clear and real-fog samples.

    Starts from ``net.params`` when set, otherwise from :func:`init_params`
    seeded with ``cfg.seed``.
    """
    if len(ds_cf) == 0:
        raise ValueError("teacher dataset is empty")
    rng = SplitMix64(cfg.seed)
    params = init_params(net, rng) if net.params is None else net.params.copy()
    items = _load(net, ds_cf)
    report = TrainReport("teacher")
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.shuffle(list(range(len(items))))
        total = 0.0
        for batch in _batches(order, cfg.batch_size):
            x = np.stack([items[i].image for i in batch])
            preds, trace = forward_batch(net, x, params)
            pgs = []
            for p, i in zip(preds, batch):
                v, g = objdet_loss_and_grad(p, items[i].label, cfg.lambda1, cfg.signed_conf)
                total += v
                pgs.append(g.scaled(1.0 / len(batch)))
            grad = backward(net, trace, {net.L: head_grad(pgs)})
            _check_finite(total, grad, f"teacher epoch {epoch}")
            params = sgd_step(params, grad, cfg.learning_rate)
        n_fog = sum(it.real_fog for it in items)
        stats = EpochStats(epoch, total / len(items), 0.0, len(items) - n_fog, n_fog)
        report.epochs.append(stats)
        log.debug("teacher epoch %d objdet %.5f", epoch, stats.objdet)
        if on_epoch:
            on_epoch(stats)
    report.wall_time = time.perf_counter() - t0
    return params, report


def train_student(teacher: ToyNet, ds_c: DatasetSpec, ds_f: DatasetSpec, cfg: TrainConfig,
                  on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[np.ndarray, TrainReport]:
    """Fine-tune a copy of the teacher on clear and real-fog data.

    Real-fog samples are trained with the detection loss alone. Clear
    samples get a fresh fog density and are rendered foggy; their loss adds
    ``lambda2`` times the perceptual distance between the student's
    activations on the foggy image and the frozen teacher's on the clear one.
    ``cfg.objdet_input`` chooses whether the detection loss sees the foggy
    rendering (default) or the clear original.
    """
    if teacher.params is None:
        raise ValueError("teacher has no parameters")
    if tuple(ds_c.class_names) != tuple(ds_f.class_names) or len(ds_c.class_names) != teacher.C:
        raise ArchitectureMismatch("class lists do not match the network")
    cfg.perc.validate(teacher.L)
    rng = SplitMix64(cfg.seed)
    params = teacher.params.copy()
    items = _load(teacher, ds_c, False) + _load(teacher, ds_f, True)
    if not items:
        raise ValueError("student datasets are empty")
    layers = range(cfg.perc.l_s, cfg.perc.l_e + 1)
    use_perc = cfg.lambda2 > 0

    # teacher is frozen: its clear-image activations never change
    teacher_acts: dict[int, dict[int, np.ndarray]] = {}
    depths: dict[int, DepthMap] = {}
    for i, it in enumerate(items):
        if it.real_fog:
            continue
        if use_perc:
            _, tr = forward_batch(teacher, it.image[None])
            teacher_acts[i] = {l: tr.layer(l)[0] for l in layers}
        depths[i] = sample_depth(it.sample, Image(it.image), cfg.depth_mode, cfg.depth_max)

    report = TrainReport("student")
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.shuffle(list(range(len(items))))
        tot_det = tot_perc = 0.0
        n_clear = n_fog = 0
        for batch in _batches(order, cfg.batch_size):
            nb = len(batch)
            foggy = []
            for i in batch:
                it = items[i]
                if it.real_fog:
                    n_fog += 1
                    foggy.append(it.image)
                    continue
                n_clear += 1
                beta = sample_beta(cfg.fog_dist, rng)
                t = transmission(depths[i], beta)
                foggy.append(np.clip(render_fog_array(it.image, t, cfg.airlight), 0.0, 1.0))
            foggy = np.stack(foggy)
            preds, trace = forward_batch(teacher, foggy, params)

            det_trace = trace
            if cfg.objdet_input == "clear":
                preds, det_trace = forward_batch(teacher, np.stack([items[i].image for i in batch]), params)
            pgs = []
            for p, i in zip(preds, batch):
                v, g = objdet_loss_and_grad(p, items[i].label, cfg.lambda1, cfg.signed_conf)
                tot_det += v
                pgs.append(g.scaled(1.0 / nb))
            det_grads = {teacher.L: head_grad(pgs)}

            perc_grads: dict[int, np.ndarray] = {}
            if use_perc:
                for l in layers:
                    act = trace.layer(l)
                    g = np.zeros_like(act)
                    denom = cfg.perc.divisor * trace.size(l)
                    for r, i in enumerate(batch):
                        if items[i].real_fog:
                            continue
                        diff = act[r] - teacher_acts[i][l]
                        tot_perc += float(np.sum(diff * diff)) / denom
                        g[r] = cfg.lambda2 * 2.0 * diff / (denom * nb)
                    perc_grads[l] = g

            if det_trace is trace:
                for l, g in perc_grads.items():
                    det_grads[l] = det_grads[l] + g if l in det_grads else g
                grad = backward(teacher, trace, det_grads)
            else:
                grad = backward(teacher, det_trace, det_grads)
                if perc_grads:
                    grad = grad + backward(teacher, trace, perc_grads)
            _check_finite(tot_det + tot_perc, grad, f"student epoch {epoch}")
            params = sgd_step(params, grad, cfg.learning_rate)
        stats = EpochStats(epoch, tot_det / len(items), tot_perc / max(n_clear, 1), n_clear, n_fog)
        report.epochs.append(stats)
        log.debug("student epoch %d objdet %.5f ts_perc %.5f", epoch, stats.objdet, stats.ts_perc)
        if on_epoch:
            on_epoch(stats)
    report.wall_time = time.perf_counter() - t0
    return params, report


def predict_dataset(net: ToyNet, ds: DatasetSpec, conf_threshold: float = 0.01,
                    batch_size: int = 16) -> list[DetectionRecord]:
    """Detections for every sample, in dataset order."""
    out: list[DetectionRecord] = []
    samples = list(ds.samples)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = np.stack([load_ppm(s.image_path).data for s in chunk])
        preds, _ = forward_batch(net, x)
        for s, p in zip(chunk, preds):
            out.extend(decode_boxes(p, conf_threshold, s.image_id))
    return out


def evaluate_map(net: ToyNet, ds: DatasetSpec, conf_threshold: float = 0.01, iou_threshold: float = 0.5,
                 mode: str = "all") -> tuple[float, dict[int, float]]:
    dets = predict_dataset(net, ds, conf_threshold)
    return mean_ap(dets, truths_from_dataset(ds), iou_threshold, len(ds.class_names), mode)
