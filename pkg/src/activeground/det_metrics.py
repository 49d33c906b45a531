"""COCO-style average precision over candidate detections.

Matching is greedy per image (highest-IoU unmatched ground truth at or above
the threshold), precision is interpolated from the right and sampled at the
101 recall points 0.00, 0.01, ..., 1.00, and AP averages the ten IoU
thresholds 0.50:0.05:0.95.  Detections with equal scores keep stable input
order, which matters because AP can depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# exact k/100 floats: recall values equal to a sample point must compare equal
RECALL_POINTS = np.arange(101) / 100.0


def match_detections(det_boxes: list[BBox], gt_boxes: list[BBox],
                     iou_thr: float) -> list[bool]:
    """Greedy TP/FP labels for detections already sorted by descending score.

    Each detection matches the unmatched ground truth with the highest IoU at
    or above the threshold; every ground truth is consumed at most once.
    """
    matched = [False] * len(gt_boxes)
    labels = []
    for det in det_boxes:
        best_iou = 0.0
        best_g = -1
        for g, gt in enumerate(gt_boxes):
            if matched[g]:
                continue
            overlap = iou(det, gt)
            if overlap >= iou_thr and overlap > best_iou:
                best_iou = overlap
                best_g = g
        if best_g >= 0:
            matched[best_g] = True
            labels.append(True)
        else:
            labels.append(False)
    return labels


def average_precision(labels: list[bool], n_gt: int) -> float:
    """101-point interpolated AP from TP/FP labels in score order."""
    if n_gt < 1:
        raise ValueError("average precision is undefined without ground truth")
    if not labels:
        return 0.0
    tp = np.cumsum([1 if lab else 0 for lab in labels])
    fp = np.cumsum([0 if lab else 1 for lab in labels])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope: non-increasing from the right
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    # first prefix index reaching each sampled recall
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class _ImageDets:
    boxes: list[BBox]
    scores: list[float]


def coco_ap(dets_by_image: dict[str, list[tuple[BBox, float]]],
            gts_by_image: dict[str, list[BBox]],
            max_dets: int = 100) -> dict:
    """AP / AP50 / AP75 pooled over images, with per-image maxDets truncation.

    Raises ValueError when there is no ground truth at all (undefined rates).
    """
    if max_dets < 1:
        raise ValueError("max_dets must be >= 1")
    n_gt = sum(len(v) for v in gts_by_image.values())
    if n_gt == 0:
        raise ValueError("no ground-truth boxes: AP undefined")

    images = sorted(set(dets_by_image) | set(gts_by_image))
    per_image: dict[str, _ImageDets] = {}
    pooled: list[tuple[float, str, int]] = []  # (score, image, index within image)
    for img in images:
        dets = list(dets_by_image.get(img, []))
        order = sorted(range(len(dets)), key=lambda i: -dets[i][1])[:max_dets]
        boxes = [dets[i][0] for i in order]
        scores = [dets[i][1] for i in order]
        per_image[img] = _ImageDets(boxes, scores)
        pooled.extend((scores[k], img, k) for k in range(len(boxes)))
    # stable: equal scores keep image-then-input order
    pooled.sort(key=lambda rec: -rec[0])

    n_det = len(pooled)
    ap_per_thr = []
    ap50 = ap75 = 0.0
    for thr in IOU_THRESHOLDS:
        labels_by_image = {
            img: match_detections(dets.boxes, gts_by_image.get(img, []), thr)
            for img, dets in per_image.items()
        }
        labels = [labels_by_image[img][k] for _, img, k in pooled]
        ap = average_precision(labels, n_gt)
        ap_per_thr.append(ap)
        if thr == 0.5:
            ap50 = ap
        elif thr == 0.75:
            ap75 = ap
    return {
        "ap": float(np.mean(ap_per_thr)),
        "ap50": ap50,
        "ap75": ap75,
        "n_images": len(images),
        "n_gt": n_gt,
        "n_det": n_det,
    }


@dataclass
class EvalReport:
    """Per-role detection metrics; roles without any ground truth are excluded."""

    roles: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def build(cls, dets: dict[str, dict[str, list[tuple[BBox, float]]]],
              gts: dict[str, dict[str, list[BBox]]], max_dets: int = 100) -> "EvalReport":
        """dets/gts are keyed role -> image -> items."""
        report = cls()
        for role in sorted(gts):
            n_gt = sum(len(v) for v in gts[role].values())
            if n_gt == 0:
                continue
            report.roles[role] = coco_ap(dets.get(role, {}), gts[role], max_dets)
        if not report.roles:
            raise ValueError("no ground truth for any role")
        for metrics in report.roles.values():
            assert metrics["ap75"] <= metrics["ap50"] + 1e-12
        return report

    def to_json(self) -> dict:
        return {"roles": self.roles}


def top1_accuracy(top_dets_by_image: dict[str, list[tuple[BBox, float]]],
                  gts_by_image: dict[str, list[BBox]], iou_thr: float = 0.5) -> float:
    """Fraction of images whose best-scored detection hits a gold box at the IoU threshold."""
    images = [img for img, gts in gts_by_image.items() if gts]
    if not images:
        raise ValueError("no images with ground truth")
    hits = 0
    for img in images:
        dets = top_dets_by_image.get(img, [])
        if not dets:
            continue
        best = max(dets, key=lambda d: d[1])
        if any(iou(best[0], gt) >= iou_thr for gt in gts_by_image[img]):
            hits += 1
    return hits / len(images)
