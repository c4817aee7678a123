"""Greedy IoU matching, precision-recall envelopes, and mean average precision."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import DatasetSpec, GroundTruthBox
from .detcore import DetectionRecord, iou
from .errors import DetectionFormatError, UnknownImageId

log = logging.getLogger(__name__)

AP_MODES = ("all", "voc11")


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    no_truths: bool = False


def processing_order(dets: Sequence[DetectionRecord]) -> list[int]:
    """Indices sorted by confidence descending, then image id, then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].image_id, i))


def match_detections(dets: Sequence[DetectionRecord], truths: Mapping[str, Sequence[GroundTruthBox]],
                     iou_threshold: float = 0.5) -> list[bool]:
    """TP/FP flag per detection, in input order.

    Detections are visited in :func:`processing_order`; each claims the
    unmatched same-class truth in its image with the highest IoU, provided
    that IoU strictly exceeds the threshold.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    used = {img: [False] * len(boxes) for img, boxes in truths.items()}
    flags = [False] * len(dets)
    for i in processing_order(dets):
        d = dets[i]
        if d.image_id not in truths:
            raise UnknownImageId(f"detection refers to unknown image {d.image_id!r}")
        best, best_j = iou_threshold, -1
        for j, t in enumerate(truths[d.image_id]):
            if used[d.image_id][j] or t.class_id != d.class_id:
                continue
            v = iou(d.corners, t.corners)
            if v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[d.image_id][best_j] = True
            flags[i] = True
    return flags


def average_precision(confidences: Sequence[float], flags: Sequence[bool], num_truths: int,
                      mode: str = "all") -> PrCurve:
    """AP of ranked detections (rank order given by the caller).

    Precision/recall points are taken after each group of equal confidence,
    so the curve is the one traced by sweeping a score threshold. ``all``
    integrates the monotone precision envelope over recall; ``voc11``
    averages the envelope at recall 0, 0.1, ..., 1.
    """
    if mode not in AP_MODES:
        raise ValueError(f"unknown AP mode {mode!r}")
    if num_truths <= 0:
        return PrCurve(np.zeros(0), np.zeros(0), 0.0, no_truths=True)
    conf = np.asarray(confidences, dtype=np.float64)
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    n = conf.size
    if n == 0:
        return PrCurve(np.zeros(0), np.zeros(0), 0.0)
    # last index of every run of equal confidence
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    recall = tp[ends] / num_truths
    precision = tp[ends] / (ends + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    if mode == "voc11":
        pts = [env[recall >= r].max() if np.any(recall >= r) else 0.0 for r in np.linspace(0, 1, 11)]
        ap = float(np.mean(pts))
    else:
        steps = np.diff(np.concatenate([[0.0], recall]))
        ap = float(np.sum(steps * env))
    return PrCurve(recall, precision, ap)


def mean_ap(dets: Sequence[DetectionRecord], truths: Mapping[str, Sequence[GroundTruthBox]],
            iou_threshold: float = 0.5, num_classes: int | None = None,
            mode: str = "all") -> tuple[float, dict[int, float]]:
    """Unweighted mean of per-class AP over classes that have ground truth."""
    flags = match_detections(dets, truths, iou_threshold)
    order = processing_order(dets)
    counts: dict[int, int] = {}
    for boxes in truths.values():
        for b in boxes:
            counts[b.class_id] = counts.get(b.class_id, 0) + 1
    classes = range(num_classes) if num_classes is not None else sorted(counts)
    per_class = {}
    for c in classes:
        if counts.get(c, 0) == 0:
            log.info("class %d has no ground truth; excluded from the mean", c)
            continue
        ranked = [i for i in order if dets[i].class_id == c]
        curve = average_precision([dets[i].confidence for i in ranked], [flags[i] for i in ranked],
                                  counts[c], mode)
        per_class[c] = curve.ap
    if not per_class:
        return 0.0, per_class
    return float(np.mean(list(per_class.values()))), per_class


def truths_from_dataset(ds: DatasetSpec) -> dict[str, list[GroundTruthBox]]:
    out: dict[str, list[GroundTruthBox]] = {}
    for s in ds.samples:
        if s.image_id in out:
            raise DetectionFormatError(f"duplicate image id {s.image_id!r} in ground truth")
        out[s.image_id] = list(s.boxes)
    return out


def parse_detections(text: str) -> list[DetectionRecord]:
    """Lines of ``image_id class_id confidence x_min y_min x_max y_max``; blank lines skipped."""
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 7:
            raise DetectionFormatError(f"line {n}: expected 7 fields, got {len(parts)}")
        try:
            rec = DetectionRecord(parts[0], int(parts[1]), *(float(p) for p in parts[2:]))
        except ValueError as exc:
            raise DetectionFormatError(f"line {n}: {exc}") from None
        out.append(rec)
    return out


def load_detections(path: str | os.PathLike) -> list[DetectionRecord]:
    with open(path) as fh:
        return parse_detections(fh.read())


def format_detections(dets: Iterable[DetectionRecord]) -> str:
    return "".join(d.to_line() + "\n" for d in dets)
