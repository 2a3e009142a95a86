"""Region-feature baseline: dense anchors, objectness scoring, greedy NMS, RoIPool.

Boxes are (x1, y1, x2, y2) in grid-cell units; cell (r, c) spans
[c, c+1] x [r, r+1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module

ANCHOR_SCALES = (1.0, 2.0, 4.0)
ANCHOR_RATIOS = (0.5, 1.0, 2.0)


@dataclass
class RegionSet:
    boxes: np.ndarray
    scores: np.ndarray
    features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.boxes)


def make_anchors(h: int, w: int, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS) -> np.ndarray:
    """(h*w*A, 4) anchors centred on every cell, clipped to the map; cell-major order."""
    shapes = np.array([(s * np.sqrt(r), s / np.sqrt(r)) for s in scales for r in ratios])
    cy, cx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    ctr = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]
    half = shapes[None, :, :] / 2
    boxes = np.concatenate([ctr - half, ctr + half], axis=2).reshape(-1, 4)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    return boxes


def box_iou(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    xx1 = np.maximum(box[0], others[:, 0])
    yy1 = np.maximum(box[1], others[:, 1])
    xx2 = np.minimum(box[2], others[:, 2])
    yy2 = np.minimum(box[3], others[:, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    A box is suppressed when its IoU with an already-kept box is >= threshold,
    so survivors are pairwise strictly below it. Ties keep the lower index.
    """
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if max_keep is not None and len(keep) == max_keep:
            break
        ious = box_iou(boxes[i], boxes[order[1:]])
        order = order[1:][ious < iou_threshold]
    return np.asarray(keep, dtype=np.int64)


class ObjectnessHead(Module):
    """1x1 conv producing one objectness logit per anchor per cell."""

    def __init__(self, c: int, rng: np.random.Generator, num_anchors: int = 9):
        self.conv = Conv2d(c, num_anchors, 1, rng)
        self.num_anchors = num_anchors

    def __call__(self, fmap: np.ndarray) -> np.ndarray:
        logits = self.conv(fmap).data
        # (A, H, W) -> cell-major (H*W*A,) matching make_anchors
        return logits.transpose(1, 2, 0).reshape(-1)


def propose_regions(fmap: np.ndarray, scorer: ObjectnessHead, num_keep: int = 100,
                    nms_iou: float = 0.7) -> RegionSet:
    c, h, w = fmap.shape
    if h == 0 or w == 0:
        raise ValueError("empty feature map")
    anchors = make_anchors(h, w)
    scores = scorer(fmap)
    keep = nms(anchors, scores, nms_iou, max_keep=num_keep)
    return RegionSet(anchors[keep], scores[keep])


def roi_pool(fmap: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """1x1 max-pool over cells whose centres fall inside each box.

    A box containing no cell centre falls back to the cell nearest its centre.
    """
    c, h, w = fmap.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("malformed box: need x2 > x1 and y2 > y1")
    out = np.empty((len(boxes), c), dtype=fmap.dtype)
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        c0 = max(int(np.ceil(x1 - 0.5)), 0)
        c1 = min(int(np.floor(x2 - 0.5)), w - 1)
        r0 = max(int(np.ceil(y1 - 0.5)), 0)
        r1 = min(int(np.floor(y2 - 0.5)), h - 1)
        if c0 > c1 or r0 > r1:
            r = min(max(int((y1 + y2) / 2), 0), h - 1)
            col = min(max(int((x1 + x2) / 2), 0), w - 1)
            out[i] = fmap[:, r, col]
        else:
            out[i] = fmap[:, r0:r1 + 1, c0:c1 + 1].max(axis=(1, 2))
    return out
