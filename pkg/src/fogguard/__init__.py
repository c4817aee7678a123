"""Fog-robust object detection at desk scale.

Depth-aware fog synthesis, YOLO-style grid losses, a small numpy detector
with teacher-student perceptual loss, and a greedy-matching mAP evaluator.
"""

__version__ = "0.1.0"
