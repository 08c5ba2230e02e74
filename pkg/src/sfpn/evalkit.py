"""COCO-style AP, latency benchmarking and confidence-map export."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autograd import Tensor, _sigmoid_np, bilinear_resize, no_grad
from .head import Detection, GroundTruthBox, head_apply, head_evaluations, iou_matrix, predict
from .pyramid import SfpnModel

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def _match(scores, det_images, det_boxes, gt_by_image: Mapping[object, np.ndarray], thr: float) -> np.ndarray:
    """Greedy score-ordered matching; returns TP flags in score order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, d in enumerate(order):
        img = det_images[d]
        g = gt_by_image.get(img)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(det_boxes[d], g)[0]
        ov = np.where(used[img], -1.0, ov)
        best = int(np.argmax(ov))
        if ov[best] >= thr:
            used[img][best] = True
            tp[rank] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags sorted by score."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(idx < len(recall), precision[np.minimum(idx, len(recall) - 1)], 0.0)
    return _mean(vals)


def average_precision(dets: Sequence[Detection], gts: Mapping[object, Sequence[GroundTruthBox]] | Sequence,
                      iou_thr: float) -> float:
    """AP for a single class. ``gts`` maps image id to boxes (or is one image's list)."""
    gt_map = _gt_boxes_by_image(gts)
    num_gt = sum(len(v) for v in gt_map.values())
    if not dets or num_gt == 0:
        return 0.0
    scores = [d.score for d in dets]
    images = [d.image_id for d in dets]
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    return interpolated_ap(_match(scores, images, boxes, gt_map, iou_thr), num_gt)


def _gt_boxes_by_image(gts) -> dict:
    if isinstance(gts, Mapping):
        return {k: np.array([g.box if isinstance(g, GroundTruthBox) else g for g in v], dtype=np.float64).reshape(-1, 4)
                for k, v in gts.items()}
    return {None: np.array([g.box if isinstance(g, GroundTruthBox) else g for g in gts], dtype=np.float64).reshape(-1, 4)}


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[int, float] = field(default_factory=dict)
    per_threshold: list[float] = field(default_factory=list)
    num_images: int = 0
    num_gts: int = 0
    num_dets: int = 0
    head_evaluations: int | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, indent=2, sort_keys=True)


def coco_map(dets: Sequence[Detection], gts: Mapping[object, Sequence[GroundTruthBox]]) -> EvalResult:
    """Mean AP over classes present in the ground truth and IoU 0.50:0.05:0.95."""
    classes = sorted({g.class_id for v in gts.values() for g in v})
    table = np.zeros((len(classes), len(IOU_THRESHOLDS)))
    for ci, c in enumerate(classes):
        cd = [d for d in dets if d.class_id == c]
        cg = {k: [g for g in v if g.class_id == c] for k, v in gts.items()}
        gt_map = _gt_boxes_by_image(cg)
        num_gt = sum(len(v) for v in gt_map.values())
        if not cd:
            continue
        scores = [d.score for d in cd]
        images = [d.image_id for d in cd]
        boxes = np.array([d.box for d in cd], dtype=np.float64)
        for ti, thr in enumerate(IOU_THRESHOLDS):
            table[ci, ti] = interpolated_ap(_match(scores, images, boxes, gt_map, thr), num_gt)
    if not classes:
        return EvalResult(0.0, 0.0, 0.0, {}, [0.0] * len(IOU_THRESHOLDS), len(gts), 0, len(dets))
    # correctly rounded sums, so the result does not depend on reduction order
    per_thr = [_mean(table[:, t]) for t in range(table.shape[1])]
    return EvalResult(
        ap=_mean(per_thr),
        ap50=per_thr[0],
        ap75=per_thr[5],
        per_class={c: _mean(table[i]) for i, c in enumerate(classes)},
        per_threshold=[float(v) for v in per_thr],
        num_images=len(gts),
        num_gts=sum(len(v) for v in gts.values()),
        num_dets=len(dets),
    )


def evaluate_model(model: SfpnModel, records, sol: bool | None = None, conf_threshold: float = 0.01,
                   iou_threshold: float = 0.5, batch_size: int = 16) -> tuple[EvalResult, list[Detection]]:
    dets: list[Detection] = []
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        images = np.concatenate([r.image for r in chunk]).astype(model.dtype)
        out = predict(model, Tensor(images), sol, conf_threshold, iou_threshold,
                      image_ids=[r.image_id for r in chunk])
        for per_image in out:
            dets.extend(per_image)
    result = coco_map(dets, {r.image_id: r.gts for r in records})
    result.head_evaluations = head_evaluations(model, sol) * len(records)
    return result, dets


# ------------------------------------------------------------------ latency


@dataclass
class LatencyReport:
    tag: str
    input_size: int
    iterations: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    samples_ms: list[float] = field(default_factory=list, repr=False)

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("samples_ms")
        d["fps"] = self.fps
        return json.dumps(d, indent=2)

    def csv_row(self) -> str:
        return f"{self.tag},{self.input_size},{self.mean_ms:.4f},{self.fps:.4f}"


CSV_HEADER = "tag,size,mean_ms,fps"


def bench_latency(model: SfpnModel, input_size: int | None = None, iters: int = 50, warmup: int = 5,
                  sol: bool | None = None, tag: str | None = None, conf_threshold: float = 0.3,
                  seed: int = 0) -> LatencyReport:
    """Wall-clock per-image inference (forward + head + decode + NMS), single-threaded."""
    rep = bench_many([(model, sol)], input_size, iters, warmup, conf_threshold, seed)[0]
    if tag is not None:
        rep.tag = tag
    return rep


def bench_many(jobs: Sequence[tuple[SfpnModel, bool | None]], input_size: int | None = None, iters: int = 50,
               warmup: int = 5, conf_threshold: float = 0.3, seed: int = 0) -> list[LatencyReport]:
    """Time several (model, sol) configurations round-robin.

    Each round runs every configuration once, so slow drift of the machine
    (frequency scaling, other processes) is shared by all of them instead of
    favouring whichever ran first. The order within a round is shuffled
    (seeded), so no configuration always follows the same neighbour: a twin
    run just before leaves caches warm, a heavy one leaves them cold. Warmup
    rounds are discarded.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    prepared = []
    for model, sol in jobs:
        if input_size is not None and input_size != model.config.input_size:
            model = model.resized(input_size)
        size = model.config.input_size
        image = Tensor(np.random.default_rng(seed).uniform(0, 1, (1, 3, size, size)).astype(model.dtype))
        sol_on = model.config.sol_enabled if sol is None else sol
        prepared.append((model, sol, image, model.config.variant + ("-SOL" if sol_on else "")))

    samples: list[list[float]] = [[] for _ in prepared]
    order_rng = np.random.default_rng(seed)
    with threadpool_limits(limits=1):
        for k in range(warmup + iters):
            for j in order_rng.permutation(len(prepared)):
                model, sol, image, _ = prepared[j]
                t0 = time.perf_counter()
                predict(model, image, sol, conf_threshold)
                dt = (time.perf_counter() - t0) * 1000.0
                if k >= warmup:
                    samples[j].append(dt)
    reports = []
    for (model, _, _, tag), ms in zip(prepared, samples):
        arr = np.asarray(ms)
        reports.append(LatencyReport(tag, model.config.input_size, iters, float(arr.mean()),
                                     float(np.median(arr)), float(np.percentile(arr, 95)), ms))
    return reports


# -------------------------------------------------------- confidence maps


def confidence_map(model: SfpnModel, image, level_index: int, sol: bool | None = None) -> np.ndarray:
    """Per-cell max objectness over anchor slots for one head level (h x w)."""
    indices = model.head_level_indices(sol)
    if not 0 <= level_index < len(indices):
        raise IndexError(f"level {level_index} out of range for {len(indices)} head levels")
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    with no_grad():
        levels = model.forward(image)
        w, b = model.params["head.weight"], model.params["head.bias"]
        raw = head_apply(levels[indices[level_index]], w, b).data.astype(np.float64)
    n, ch, h, wd = raw.shape
    per_anchor = 5 + model.config.num_classes
    a = ch // per_anchor
    obj = raw.reshape(n, a, per_anchor, h, wd)[:, :, 4]
    return _sigmoid_np(obj).max(axis=1)


def export_confidence(model: SfpnModel, image, level_index: int, sol: bool | None = None) -> Tensor:
    """Confidence map resized to the input resolution, as a 1 x 1 x S x S tensor."""
    cmap = confidence_map(model, image, level_index, sol)
    s = model.config.input_size
    return bilinear_resize(Tensor(cmap[:1, None]), s, s)
