"""Shared YOLO-style head: naive anchors, assignment, loss, decoding and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, _sigmoid_np, conv2d, custom_op, no_grad
from .pyramid import FeatureLevel, ScaleSchedule, SfpnModel

ANCHOR_RATIOS = (1, 2, 4)
CENTER_EPS = 1e-4
OBJECTNESS_MODES = ("mean", "balanced")
LOSS_WEIGHTS = {"obj": 1.0, "cls": 1.0, "box": 2.0}


@dataclass(frozen=True)
class Anchor:
    cx: float
    cy: float
    side: float
    level_index: int
    cell_row: int
    cell_col: int
    anchor_slot: int

    @property
    def box(self) -> tuple[float, float, float, float]:
        h = self.side / 2
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)


class AnchorSet:
    """Column-wise storage of anchors in (level, row, col, slot) order."""

    def __init__(self, strides: Sequence[int], input_size: int, ratios=ANCHOR_RATIOS):
        self.strides = tuple(int(s) for s in strides)
        self.input_size = int(input_size)
        self.ratios = tuple(ratios)
        cols = {k: [] for k in ("cx", "cy", "side", "level", "row", "col", "slot", "stride")}
        self.level_sizes = []
        for li, s in enumerate(self.strides):
            g = self.input_size // s
            self.level_sizes.append(g)
            row, col, slot = np.meshgrid(np.arange(g), np.arange(g), np.arange(len(self.ratios)), indexing="ij")
            row, col, slot = row.ravel(), col.ravel(), slot.ravel()
            cols["row"].append(row)
            cols["col"].append(col)
            cols["slot"].append(slot)
            cols["level"].append(np.full(row.size, li))
            cols["stride"].append(np.full(row.size, float(s)))
            cols["cx"].append((col + 0.5) * s)
            cols["cy"].append((row + 0.5) * s)
            cols["side"].append(np.asarray(self.ratios, dtype=float)[slot] * s)
        for k, v in cols.items():
            setattr(self, k, np.concatenate(v) if v else np.zeros(0))
        half = self.side / 2
        self.boxes = np.stack([self.cx - half, self.cy - half, self.cx + half, self.cy + half], axis=1)

    def __len__(self) -> int:
        return len(self.cx)

    def __getitem__(self, i: int) -> Anchor:
        return Anchor(float(self.cx[i]), float(self.cy[i]), float(self.side[i]), int(self.level[i]),
                      int(self.row[i]), int(self.col[i]), int(self.slot[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def gen_anchors(schedule: ScaleSchedule | Sequence[int], input_size: int) -> AnchorSet:
    strides = schedule.strides if isinstance(schedule, ScaleSchedule) else schedule
    return AnchorSet(strides, input_size)


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int
    image_id: int | None = None

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "class_id": int(self.class_id),
                "score": float(self.score), "bbox": [float(v) for v in self.box]}


@dataclass
class GroundTruthBox:
    box: tuple[float, float, float, float]
    class_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"ground-truth box needs positive area: {self.box}")


# ---------------------------------------------------------------- geometry


def iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, same float operations as :func:`iou`."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)[:, None, :]
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)[None, :, :]
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def _logit(p):
    return np.log(p) - np.log1p(-p)


# -------------------------------------------------------------- assignment

NEGATIVE = -1
IGNORED = -2


@dataclass
class TargetAssignment:
    state: np.ndarray    # per anchor: gt index, NEGATIVE or IGNORED
    targets: np.ndarray  # (num_anchors, 4) tx, ty, tw, th; valid where state >= 0
    classes: np.ndarray  # per anchor class id, -1 when not positive

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.state >= 0)


def encode(gt_box, anchors: AnchorSet, idx: int) -> np.ndarray:
    x1, y1, x2, y2 = gt_box
    s = anchors.stride[idx]
    ox = np.clip((x1 + x2) / 2 / s - anchors.col[idx], CENTER_EPS, 1 - CENTER_EPS)
    oy = np.clip((y1 + y2) / 2 / s - anchors.row[idx], CENTER_EPS, 1 - CENTER_EPS)
    side = anchors.side[idx]
    return np.array([_logit(ox), _logit(oy), np.log((x2 - x1) / side), np.log((y2 - y1) / side)])


def assign_targets(gt_boxes, gt_classes, anchors: AnchorSet, ignore_thr: float = 0.5) -> TargetAssignment:
    """Best-IoU anchor per ground truth; overlapping leftovers are ignored.

    GTs are processed in order. Equal IoUs go to the finer stride, then to
    the anchor whose centre is nearest the GT centre, then to the lower
    index. The distance key matters because IoU is flat while an anchor sits
    inside the GT along one axis; without it the winner could be a cell that
    does not contain the centre, whose offset target is unreachable. A GT
    whose preferred anchor is already taken gets its next best one, and a GT
    with zero overlap everywhere falls back to the nearest anchor centre.
    """
    n = len(anchors)
    if n == 0:
        raise ValueError("no anchors")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    state = np.full(n, NEGATIVE, dtype=np.int64)
    targets = np.zeros((n, 4))
    classes = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return TargetAssignment(state, targets, classes)
    ious = iou_matrix(gt_boxes, anchors.boxes)
    taken = np.zeros(n, dtype=bool)
    for g, box in enumerate(gt_boxes):
        cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
        dist = (anchors.cx - cx) ** 2 + (anchors.cy - cy) ** 2
        row = np.where(taken, -1.0, ious[g])
        top = row.max()
        if top <= 0.0:
            best = int(np.argmin(np.where(taken, np.inf, dist)))
        else:
            cand = np.flatnonzero(row == top)
            best = int(cand[np.lexsort((cand, dist[cand], anchors.stride[cand]))[0]])
        taken[best] = True
        state[best] = g
        classes[best] = int(gt_classes[g])
        targets[best] = encode(box, anchors, best)
    ignore = (~taken) & (ious.max(axis=0) > ignore_thr)
    state[ignore] = IGNORED
    return TargetAssignment(state, targets, classes)


# -------------------------------------------------------------------- head


def head_apply(level: FeatureLevel | Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    m = level.map if isinstance(level, FeatureLevel) else level
    if m.shape[1] != weight.shape[1]:
        raise ValueError(f"head expects {weight.shape[1]} channels, level has {m.shape[1]}")
    return conv2d(m, weight, bias, stride=1, padding=0)


def flatten_raw(raw_maps: Sequence[np.ndarray], per_anchor: int) -> np.ndarray:
    """Head maps -> (n, num_anchors, 5 + C) in anchor order."""
    parts = []
    for r in raw_maps:
        n, ch, h, w = r.shape
        a = ch // per_anchor
        parts.append(r.reshape(n, a, per_anchor, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, per_anchor))
    return np.concatenate(parts, axis=1)


def _unflatten(g: np.ndarray, shapes, per_anchor: int) -> list[np.ndarray]:
    out, start = [], 0
    for (n, ch, h, w) in shapes:
        a = ch // per_anchor
        k = h * w * a
        part = g[:, start:start + k].reshape(n, h, w, a, per_anchor).transpose(0, 3, 4, 1, 2).reshape(n, ch, h, w)
        out.append(np.ascontiguousarray(part))
        start += k
    return out


def _bce_logits(x, t):
    return np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))


def detection_loss(raw_maps: Sequence[Tensor], assignments: Sequence[TargetAssignment],
                   num_classes: int, objectness: str = "balanced") -> Tensor:
    """Objectness BCE + class BCE + 2 * smooth-L1 box.

    ``objectness="mean"`` averages the objectness BCE over all non-ignored
    anchors. ``"balanced"`` averages positives and negatives separately and
    adds the two means, so the handful of positives is not drowned by a few
    hundred negatives per image. Both give ln 2 for zero logits and no GTs.
    """
    if objectness not in OBJECTNESS_MODES:
        raise ValueError(f"objectness must be one of {OBJECTNESS_MODES}")
    per_anchor = 5 + num_classes
    shapes = [r.shape for r in raw_maps]
    pred = flatten_raw([r.data.astype(np.float64) for r in raw_maps], per_anchor)
    n, num_anchors, _ = pred.shape
    if num_anchors == 0:
        raise ValueError("no anchors")
    if len(assignments) != n:
        raise ValueError("one assignment per image is required")
    state = np.stack([a.state for a in assignments])
    if state.shape[1] != num_anchors:
        raise ValueError(f"assignment covers {state.shape[1]} anchors, head produced {num_anchors}")
    tbox = np.stack([a.targets for a in assignments])
    tcls = np.stack([a.classes for a in assignments])

    grad = np.zeros_like(pred)
    pos = state >= 0
    valid = state != IGNORED
    n_valid = max(int(valid.sum()), 1)
    n_pos = int(pos.sum())

    obj = pred[..., 4]
    obj_t = pos.astype(np.float64)
    if objectness == "mean":
        weight = valid / n_valid
    else:
        neg = valid & ~pos
        weight = neg / max(int(neg.sum()), 1) + pos / max(n_pos, 1)
    obj_loss = float((_bce_logits(obj, obj_t) * weight).sum())
    grad[..., 4] = (_sigmoid_np(obj) - obj_t) * weight * LOSS_WEIGHTS["obj"]

    cls_loss = box_loss = 0.0
    if n_pos:
        pi, ai = np.nonzero(pos)
        logits = pred[pi, ai, 5:]
        onehot = np.zeros_like(logits)
        onehot[np.arange(n_pos), tcls[pi, ai]] = 1.0
        cls_loss = float(_bce_logits(logits, onehot).sum()) / (n_pos * num_classes)
        grad[pi, ai, 5:] = (_sigmoid_np(logits) - onehot) / (n_pos * num_classes) * LOSS_WEIGHTS["cls"]

        d = pred[pi, ai, :4] - tbox[pi, ai]
        ad = np.abs(d)
        box_loss = float(np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum()) / (n_pos * 4)
        grad[pi, ai, :4] = np.clip(d, -1.0, 1.0) / (n_pos * 4) * LOSS_WEIGHTS["box"]

    total = LOSS_WEIGHTS["obj"] * obj_loss + LOSS_WEIGHTS["cls"] * cls_loss + LOSS_WEIGHTS["box"] * box_loss
    out_dtype = raw_maps[0].dtype

    def _backward(g: np.ndarray):
        scale = float(g.reshape(-1)[0])
        return [p.astype(out_dtype) * scale for p in _unflatten(grad, shapes, per_anchor)]

    loss = custom_op(raw_maps, np.full((1, 1, 1, 1), total, dtype=out_dtype), _backward, "detection_loss")
    loss.components = {"obj": obj_loss, "cls": cls_loss, "box": box_loss}  # type: ignore[attr-defined]
    return loss


# ---------------------------------------------------------------- decoding


def decode(raw: np.ndarray, anchors: AnchorSet, conf_threshold: float, num_classes: int,
           input_size: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode one image's flattened predictions (num_anchors, 5 + C).

    Returns (boxes, scores, class_ids) for anchors whose score clears the threshold.
    """
    raw = np.asarray(raw, dtype=np.float64)
    size = anchors.input_size if input_size is None else input_size
    s = anchors.stride
    bx = (anchors.col + _sigmoid_np(raw[:, 0])) * s
    by = (anchors.row + _sigmoid_np(raw[:, 1])) * s
    bw = anchors.side * np.exp(np.minimum(raw[:, 2], 30.0))
    bh = anchors.side * np.exp(np.minimum(raw[:, 3], 30.0))
    cls_logits = raw[:, 5:5 + num_classes]
    cls_id = np.argmax(cls_logits, axis=1)
    score = _sigmoid_np(raw[:, 4]) * _sigmoid_np(cls_logits[np.arange(len(raw)), cls_id])
    boxes = np.stack([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2], axis=1)
    boxes = np.clip(boxes, 0.0, float(size))
    keep = (score >= conf_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return boxes[keep], score[keep], cls_id[keep]


def decode_detections(raw, anchors, conf_threshold, num_classes, image_id=None) -> list[Detection]:
    boxes, scores, classes = decode(raw, anchors, conf_threshold, num_classes)
    return [Detection(tuple(map(float, b)), float(sc), int(c), image_id) for b, sc, c in zip(boxes, scores, classes)]


# --------------------------------------------------------------------- NMS


def nms_indices(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
                iou_threshold: float = 0.5, max_out: int = 100) -> np.ndarray:
    """Greedy per-class NMS; returns kept indices sorted by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    kept = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        alive = np.ones(len(idx), dtype=bool)
        cb = boxes[idx]
        for i in range(len(idx)):
            if not alive[i]:
                continue
            kept.append(idx[i])
            if i + 1 < len(idx):
                ov = iou_matrix(cb[i], cb[i + 1:])[0]
                alive[i + 1:] &= ov <= iou_threshold
    kept = np.asarray(kept, dtype=np.int64)
    # same key as the per-class pass, so the output order is well defined
    final = kept[np.lexsort((classes[kept], boxes[kept, 1], boxes[kept, 0], -scores[kept]))]
    return final[:max_out]


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5, max_out: int = 100) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets])
    classes = np.array([d.class_id for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, classes, iou_threshold, max_out)]


# ------------------------------------------------------------------ predict


def head_raw(model: SfpnModel, levels: list[FeatureLevel], sol: bool | None = None) -> list[Tensor]:
    w, b = model.params["head.weight"], model.params["head.bias"]
    return [head_apply(levels[i], w, b) for i in model.head_level_indices(sol)]


def head_anchors(model: SfpnModel, sol: bool | None = None) -> AnchorSet:
    return gen_anchors(model.head_strides(sol), model.config.input_size)


def predict(model: SfpnModel, image: Tensor | np.ndarray, sol: bool | None = None,
            conf_threshold: float = 0.3, iou_threshold: float = 0.5, max_out: int = 100,
            image_ids: Sequence | None = None) -> list[list[Detection]]:
    """Detections per image in the batch."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    anchors = head_anchors(model, sol)
    nc = model.config.num_classes
    with no_grad():
        raws = [r.data for r in head_raw(model, model.forward(image), sol)]
    flat = flatten_raw(raws, 5 + nc)
    out = []
    for k in range(flat.shape[0]):
        boxes, scores, classes = decode(flat[k], anchors, conf_threshold, nc)
        keep = nms_indices(boxes, scores, classes, iou_threshold, max_out)
        img_id = image_ids[k] if image_ids is not None else k
        out.append([Detection(tuple(map(float, boxes[i])), float(scores[i]), int(classes[i]), img_id) for i in keep])
    return out


def head_evaluations(model: SfpnModel, sol: bool | None = None) -> int:
    """Number of anchor predictions the head produces for one image."""
    return len(head_anchors(model, sol))
