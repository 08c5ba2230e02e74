"""Slow, direct reference implementations used only by the tests.

None of these share code with the package paths they check.
"""

from __future__ import annotations

import math


def conv2d_loops(x, w, b, stride=1, padding=0):
    """Six nested loops over (n, oc, oh, ow, ic, kh, kw) on plain lists."""
    import numpy as np

    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for bi in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[o]) if b is not None else 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                yy = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += float(x[bi, ci, yy, xx]) * float(w[o, ci, di, dj])
                    out[bi, o, i, j] = acc
    return out


def resize_pixel(img2d, out_h, out_w):
    """Per-output-pixel evaluation of the half-pixel bilinear formula."""
    h, w = len(img2d), len(img2d[0])

    def src(d, s_in, s_out):
        v = (d + 0.5) * (s_in / s_out) - 0.5
        return min(max(v, 0.0), s_in - 1.0)

    out = []
    for i in range(out_h):
        sy = src(i, h, out_h)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        row = []
        for j in range(out_w):
            sx = src(j, w, out_w)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img2d[y0][x0] * (1 - fx) + img2d[y0][x1] * fx
            bot = img2d[y1][x0] * (1 - fx) + img2d[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def box_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy_nms(boxes, scores, classes, thr=0.5, max_out=100):
    """O(n^2) greedy NMS on Python lists; returns kept indices."""
    idx = list(range(len(scores)))
    idx.sort(key=lambda i: (-scores[i], boxes[i][0], boxes[i][1]))
    kept = []
    for i in idx:
        if all(classes[k] != classes[i] or box_iou(boxes[k], boxes[i]) <= thr for k in kept):
            kept.append(i)
    kept.sort(key=lambda i: (-scores[i], boxes[i][0], boxes[i][1], classes[i]))
    return kept[:max_out]


def best_anchor_search(gts, anchor_boxes, anchor_cx, anchor_cy, anchor_stride):
    """Exhaustive best-IoU anchor per GT, with the same conflict/fallback rule.

    Preference key: higher IoU, finer stride, nearer centre, lower index.
    """
    taken = set()
    result = []
    for g in gts:
        cx, cy = (g[0] + g[2]) / 2, (g[1] + g[3]) / 2
        best, best_key = None, None
        for a, ab in enumerate(anchor_boxes):
            if a in taken:
                continue
            d = (anchor_cx[a] - cx) ** 2 + (anchor_cy[a] - cy) ** 2
            key = (-box_iou(g, ab), anchor_stride[a], d, a)
            if best_key is None or key < best_key:
                best, best_key = a, key
        if best_key[0] == 0.0:
            best_d = math.inf
            for a in range(len(anchor_boxes)):
                if a in taken:
                    continue
                d = (anchor_cx[a] - cx) ** 2 + (anchor_cy[a] - cy) ** 2
                if d < best_d:
                    best, best_d = a, d
        taken.add(best)
        result.append(best)
    return result


RECALL_POINTS = [i / 100 for i in range(101)]


def reference_ap(dets, gts, thr):
    """dets: [(image, score, box)], gts: {image: [box]}.

    Matching: visit detections by descending score (stable), give each the
    unmatched GT of highest IoU if it reaches ``thr``. Then, for every recall
    grid point, take the best precision among all cut-offs reaching it.
    """
    num_gt = sum(len(v) for v in gts.values())
    if num_gt == 0 or not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {k: [False] * len(v) for k, v in gts.items()}
    flags = []
    for i in order:
        img, _, box = dets[i]
        best, best_iou = -1, -1.0
        for gi, g in enumerate(gts.get(img, [])):
            if used[img][gi]:
                continue
            v = box_iou(box, g)
            if v > best_iou:
                best, best_iou = gi, v
        if best >= 0 and best_iou >= thr:
            used[img][best] = True
            flags.append(True)
        else:
            flags.append(False)
    points = []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        points.append((tp / num_gt, tp / (tp + fp)))
    vals = [max((p for rec, p in points if rec >= r), default=0.0) for r in RECALL_POINTS]
    return math.fsum(vals) / len(RECALL_POINTS)


def reference_coco_map(dets, gts, thresholds=None):
    """dets: [(image, cls, score, box)], gts: {image: [(cls, box)]}; returns (AP, AP50, AP75)."""
    thresholds = thresholds or [0.5 + 0.05 * k for k in range(10)]
    thresholds = [round(t, 2) for t in thresholds]
    classes = sorted({c for v in gts.values() for c, _ in v})
    if not classes:
        return 0.0, 0.0, 0.0
    table = []
    for c in classes:
        cd = [(img, s, b) for img, cc, s, b in dets if cc == c]
        cg = {k: [b for cc, b in v if cc == c] for k, v in gts.items()}
        table.append([reference_ap(cd, cg, t) for t in thresholds])
    per_t = [math.fsum(row[k] for row in table) / len(table) for k in range(len(thresholds))]
    return math.fsum(per_t) / len(per_t), per_t[0], per_t[5]


def central_difference(f, arr, h=1e-4):
    """Numerical gradient of scalar f() w.r.t. every entry of ``arr`` (mutated in place)."""
    import numpy as np

    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = arr[k]
        arr[k] = old + h
        fp = f()
        arr[k] = old - h
        fm = f()
        arr[k] = old
        g[k] = (fp - fm) / (2 * h)
    return g
