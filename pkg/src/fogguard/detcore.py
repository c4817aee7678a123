"""Grid labels, IoU, greedy slot matching and the detection losses.

Slots are flattened as ``k = (row * S + col) * B + b``. Box parameters per
slot are ``(ox, oy, w, h)``: the box center's offset inside its grid cell in
cell units, and width/height as fractions of the image size.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
HUBER_DELTA = 1.0

# diagnostics: "no_true_boxes", "log_clamp", "encode_dropped"
counters: Counter = Counter()


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    confidence: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate detection box {self.corners}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_line(self) -> str:
        return (f"{self.image_id} {self.class_id} {self.confidence:.6f} "
                f"{self.x_min:.6f} {self.y_min:.6f} {self.x_max:.6f} {self.y_max:.6f}")


@dataclass(eq=False)
class GridLabel:
    """Target tensor ``y = (y_b, y_o, y_c)`` over ``S*S*B`` slots."""

    S: int
    B: int
    C: int
    box: np.ndarray
    obj: np.ndarray
    cls: np.ndarray
    img_w: float = 1.0
    img_h: float = 1.0
    dropped: int = 0

    def __post_init__(self):
        k = self.S * self.S * self.B
        if self.box.shape != (k, 4) or self.obj.shape != (k,) or self.cls.shape != (k, self.C):
            raise ValueError("label arrays do not match S, B, C")
        if not np.all((self.obj == 0) | (self.obj == 1)):
            raise ValueError("objectness indicators must be binary")
        rows = self.cls.sum(axis=1)
        if not np.allclose(rows, self.obj, atol=0):
            raise ValueError("class rows must be one-hot on object slots and zero elsewhere")

    @property
    def num_slots(self) -> int:
        return self.S * self.S * self.B

    @property
    def num_objects(self) -> int:
        return int(self.obj.sum())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.box, self.obj[:, None], self.cls], axis=1).ravel()

    def class_of(self, slot: int) -> int:
        return int(np.argmax(self.cls[slot]))


@dataclass(eq=False)
class Prediction:
    """Network output ``F(x; theta)``: raw boxes, sigmoid objectness, softmax class rows."""

    S: int
    B: int
    C: int
    box: np.ndarray
    obj: np.ndarray
    cls: np.ndarray
    img_w: float = 1.0
    img_h: float = 1.0

    def __post_init__(self):
        k = self.S * self.S * self.B
        if self.box.shape != (k, 4) or self.obj.shape != (k,) or self.cls.shape != (k, self.C):
            raise ValueError("prediction arrays do not match S, B, C")

    def validate(self) -> None:
        if np.any(self.obj <= 0) or np.any(self.obj >= 1):
            raise ValueError("objectness must lie strictly inside (0, 1)")
        if np.any(np.abs(self.cls.sum(axis=1) - 1.0) > 1e-9) or np.any(self.cls < 0):
            raise ValueError("class rows must lie in the probability simplex")

    @property
    def num_slots(self) -> int:
        return self.S * self.S * self.B

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.box, self.obj[:, None], self.cls], axis=1).ravel()

    @classmethod
    def from_label(cls, y: GridLabel, p_true: float = 1.0, p_false: float = 0.0) -> "Prediction":
        """A prediction that reproduces ``y``; probabilities may be softened."""
        obj = np.where(y.obj == 1, p_true, p_false).astype(np.float64)
        if p_true == 1.0 and p_false == 0.0:
            cls_rows = y.cls.copy()
            empty = y.obj == 0
            cls_rows[empty] = 1.0 / y.C
        else:
            cls_rows = np.where(y.cls == 1, p_true, (1 - p_true) / max(y.C - 1, 1))
            empty = y.obj == 0
            cls_rows[empty] = 1.0 / y.C
        return cls(y.S, y.B, y.C, y.box.copy(), obj, cls_rows, y.img_w, y.img_h)


@dataclass
class Matching:
    """Injective partial map from predicted slot to true (object) slot."""

    assignment: dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.assignment)

    def true_to_pred(self) -> dict[int, int]:
        return {j: p for p, j in self.assignment.items()}


def _slot_cells(S: int, B: int) -> tuple[np.ndarray, np.ndarray]:
    cell = np.arange(S * S * B) // B
    return cell // S, cell % S


def slot_corners(box: np.ndarray, S: int, B: int, slots: np.ndarray | None = None) -> np.ndarray:
    """Normalized ``(x0, y0, x1, y1)`` corners for slot box parameters.

    ``box`` holds every slot unless ``slots`` names the subset it covers.
    """
    rows, cols = _slot_cells(S, B)
    if slots is not None:
        rows, cols = rows[slots], cols[slots]
    cx = (cols + box[:, 0]) / S
    cy = (rows + box[:, 1]) / S
    hw = box[:, 2] / 2.0
    hh = box[:, 3] / 2.0
    return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner boxes; 0 for disjoint or empty boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner arrays of shape ``(n, 4)`` and ``(m, 4)``."""
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where((inter > 0) & (union > 0), inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def encode_grid(boxes, img_w: float, img_h: float, S: int, B: int, C: int) -> GridLabel:
    """Assign each box to the cell holding its center, largest boxes first.

    A cell keeps at most ``B`` boxes; the rest are dropped and counted in
    ``GridLabel.dropped``. Area ties keep input order.
    """
    k = S * S * B
    box = np.zeros((k, 4))
    obj = np.zeros(k)
    cls_rows = np.zeros((k, C))
    used = np.zeros((S, S), dtype=int)
    dropped = 0
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].area)
    for i in order:
        b = boxes[i]
        cx = (b.x_min + b.x_max) / 2.0 / img_w
        cy = (b.y_min + b.y_max) / 2.0 / img_h
        col = min(int(math.floor(cx * S)), S - 1)
        row = min(int(math.floor(cy * S)), S - 1)
        if used[row, col] >= B:
            dropped += 1
            continue
        slot = (row * S + col) * B + used[row, col]
        used[row, col] += 1
        box[slot] = (cx * S - col, cy * S - row, (b.x_max - b.x_min) / img_w, (b.y_max - b.y_min) / img_h)
        obj[slot] = 1.0
        cls_rows[slot, b.class_id] = 1.0
    if dropped:
        counters["encode_dropped"] += dropped
        log.debug("encode_grid dropped %d boxes", dropped)
    return GridLabel(S, B, C, box, obj, cls_rows, float(img_w), float(img_h), dropped)


def greedy_match(pred: Prediction, truth: GridLabel, complete: bool = True) -> Matching:
    """Confidence-descending greedy assignment of predicted slots to true slots.

    Each predicted slot, highest objectness first, takes the unmatched true
    slot whose decoded box overlaps it most (IoU > 0). Ties go to the lowest
    index. With ``complete``, a true slot left unmatched is then paired with
    the predicted slot at the same index when that slot is still free, so a
    truth nobody overlaps is owned by its own grid slot.
    """
    if (pred.S, pred.B, pred.C) != (truth.S, truth.B, truth.C):
        raise ValueError("prediction and label shapes differ")
    true_slots = np.flatnonzero(truth.obj == 1)
    m = Matching()
    if true_slots.size == 0:
        return m
    ious = iou_matrix(slot_corners(pred.box, pred.S, pred.B),
                      slot_corners(truth.box[true_slots], truth.S, truth.B, true_slots))
    free = np.ones(true_slots.size, dtype=bool)
    # stable sort on -obj keeps lowest index first among ties
    for p in np.argsort(-pred.obj, kind="stable"):
        row = np.where(free, ious[p], -1.0)
        j = int(np.argmax(row))
        if row[j] > 0.0:
            m.assignment[int(p)] = int(true_slots[j])
            free[j] = False
            if not free.any():
                break
    if complete:
        for j in true_slots[free]:
            if int(j) not in m.assignment:
                m.assignment[int(j)] = int(j)
    return m


def huber(z, delta: float = HUBER_DELTA):
    a = np.abs(z)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_grad(z, delta: float = HUBER_DELTA):
    return np.clip(z, -delta, delta)


@dataclass
class PredictionGrad:
    """Gradient of a scalar loss with respect to ``Prediction`` arrays."""

    box: np.ndarray
    obj: np.ndarray
    cls: np.ndarray

    @classmethod
    def zeros_like(cls, pred: Prediction) -> "PredictionGrad":
        return cls(np.zeros_like(pred.box), np.zeros_like(pred.obj), np.zeros_like(pred.cls))

    def scaled(self, c: float) -> "PredictionGrad":
        return PredictionGrad(self.box * c, self.obj * c, self.cls * c)


def _loc(pred: Prediction, truth: GridLabel, m: Matching, grad: PredictionGrad | None) -> float:
    b = truth.num_objects
    if b == 0:
        counters["no_true_boxes"] += 1
        return 0.0
    t2p = m.true_to_pred()
    total = 0.0
    for j in np.flatnonzero(truth.obj == 1):
        p = t2p.get(int(j))
        if p is None:
            # unmatched truth: compared against a zero prediction
            total += float(huber(truth.box[j]).sum())
            continue
        diff = truth.box[j] - pred.box[p]
        total += float(huber(diff).sum())
        if grad is not None:
            grad.box[p] -= huber_grad(diff) / b
    return total / b


def _clamped_log(p: float) -> tuple[float, float]:
    """``log(p)`` with clamping; returns (value, d value / d p)."""
    if p < PROB_EPS or p > 1.0 - PROB_EPS:
        counters["log_clamp"] += 1
        return math.log(min(max(p, PROB_EPS), 1.0 - PROB_EPS)), 0.0
    return math.log(p), 1.0 / p


def _full_permutation(m: Matching, n: int) -> np.ndarray:
    """Complete a partial matching to a permutation ``true slot -> pred slot``."""
    perm = np.full(n, -1)
    for p, j in m.assignment.items():
        perm[j] = p
    free_pred = iter(sorted(set(range(n)) - set(m.assignment)))
    for j in range(n):
        if perm[j] < 0:
            perm[j] = next(free_pred)
    return perm


def _conf(pred: Prediction, truth: GridLabel, m: Matching, grad: PredictionGrad | None,
          scale: float, signed: bool) -> float:
    total = 0.0

    def add(kind: str, idx, coef: float):
        nonlocal total
        if kind == "obj":
            v, d = _clamped_log(pred.obj[idx])
            total += coef * v
            if grad is not None:
                grad.obj[idx] += scale * coef * d
        elif kind == "notobj":
            v, d = _clamped_log(1.0 - pred.obj[idx])
            total += coef * v
            if grad is not None:
                grad.obj[idx] -= scale * coef * d
        else:
            p, c = idx
            v, d = _clamped_log(pred.cls[p, c])
            total += coef * v
            if grad is not None:
                grad.cls[p, c] += scale * coef * d

    if signed:
        # -(y_c)^T log(P y^_c) - 2 y_o^T log(P y^_o) + 1^T log(P y^_o)
        perm = _full_permutation(m, truth.num_slots)
        for j in range(truth.num_slots):
            p = int(perm[j])
            if truth.obj[j] == 1:
                add("cls", (p, truth.class_of(j)), -1.0)
                add("obj", p, -2.0)
            add("obj", p, 1.0)
        return total

    matched = set()
    for p, j in m.assignment.items():
        add("cls", (p, truth.class_of(j)), -1.0)
        add("obj", p, -1.0)
        matched.add(p)
    for p in range(pred.num_slots):
        if p not in matched:
            add("notobj", p, -1.0)
    return total


def loc_loss(pred: Prediction, truth: GridLabel, m: Matching) -> float:
    """Huber distance of matched boxes over object slots, divided by the object count."""
    return _loc(pred, truth, m, None)


def conf_loss(pred: Prediction, truth: GridLabel, m: Matching, signed: bool = False) -> float:
    """Class cross-entropy on matched pairs plus binary objectness cross-entropy.

    Matched predicted slots are pushed toward objectness 1, every other
    predicted slot toward 0. With ``signed`` the objectness term is
    ``-2 y_o.log(P o) + 1.log(P o)`` over the matching completed to a full
    permutation.
    """
    return _conf(pred, truth, m, None, 1.0, signed)


def objdet_loss(pred: Prediction, truth: GridLabel, lambda1: float = 1.0, signed: bool = False) -> float:
    m = greedy_match(pred, truth)
    return loc_loss(pred, truth, m) + lambda1 * conf_loss(pred, truth, m, signed)


def objdet_loss_and_grad(pred: Prediction, truth: GridLabel, lambda1: float = 1.0,
                         signed: bool = False) -> tuple[float, PredictionGrad]:
    """Loss and its gradient with respect to the prediction arrays (matching held fixed)."""
    m = greedy_match(pred, truth)
    grad = PredictionGrad.zeros_like(pred)
    loc = _loc(pred, truth, m, grad)
    conf = _conf(pred, truth, m, grad, lambda1, signed)
    return loc + lambda1 * conf, grad


def _nms(records: list[DetectionRecord], iou_threshold: float) -> list[DetectionRecord]:
    keep: list[DetectionRecord] = []
    for r in sorted(records, key=lambda r: -r.confidence):
        if all(k.class_id != r.class_id or iou(k.corners, r.corners) <= iou_threshold for k in keep):
            keep.append(r)
    kept = {id(r) for r in keep}
    return [r for r in records if id(r) in kept]


def decode_boxes(pred: Prediction, conf_threshold: float, image_id: str = "",
                 nms_iou: float | None = None) -> list[DetectionRecord]:
    """Pixel-space detections for slots with objectness >= ``conf_threshold``.

    Boxes are clipped to the image; slots whose clipped box is empty are
    skipped. Output keeps slot order.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    corners = slot_corners(pred.box, pred.S, pred.B)
    scale = np.array([pred.img_w, pred.img_h, pred.img_w, pred.img_h])
    px = np.clip(corners * scale, 0.0, scale)
    out = []
    for k in range(pred.num_slots):
        if pred.obj[k] < conf_threshold:
            continue
        x0, y0, x1, y1 = (float(v) for v in px[k])
        if not (x0 < x1 and y0 < y1):
            continue
        c = int(np.argmax(pred.cls[k]))
        conf = float(min(max(pred.obj[k] * pred.cls[k, c], 0.0), 1.0))
        out.append(DetectionRecord(image_id, c, conf, x0, y0, x1, y1))
    if nms_iou is not None:
        out = _nms(out, nms_iou)
    return out
