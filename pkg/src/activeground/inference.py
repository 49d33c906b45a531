"""Frame-type-weighted aggregation of alignment logits into per-role box scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox
from .model import FrameTypeDistribution, ModelParams, alignment_logits, encode, predict_frame_type
from .prompts import FrameType, GroundingPrompt, Role, RoleMask
from .scenes import Frame

POOL_FIRST = "pool_first"  # mean within each frame mask, then probability-weighted sum
MIX_FIRST = "mix_first"  # probability-mix the masks, then one weighted mean


@dataclass(frozen=True)
class Detection:
    frame_id: str
    role: Role
    box: BBox
    score: float
    region_index: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score for {self.frame_id}")


def aggregate_role_score(logits: np.ndarray, masks: dict[FrameType, RoleMask],
                         fdist: FrameTypeDistribution, j: int,
                         order: str = POOL_FIRST) -> float:
    """Probability-weighted masked mean of region j's logits.

    Frames whose mask is empty contribute nothing and their probability mass
    is renormalized over the non-empty frames; a role with no mask anywhere is
    an error because the role is not in the prompt.
    """
    live = [ft for ft in (FrameType.PRE, FrameType.PNR, FrameType.POST)
            if ft in masks and not masks[ft].is_empty()]
    if not live:
        raise ValueError("all frame masks empty: role is not in the prompt")
    probs = np.array([fdist.prob(ft) for ft in live])
    total = float(probs.sum())
    weights = probs / total if total > 0 else np.full(len(live), 1.0 / len(live))
    row = logits[j]
    if order == POOL_FIRST:
        pooled = np.array([row[masks[ft].bits].mean() for ft in live])
        return float(weights @ pooled)
    if order == MIX_FIRST:
        cell = np.zeros(row.size)
        for w, ft in zip(weights, live):
            cell += w * masks[ft].bits
        return float((cell * row).sum() / cell.sum())
    raise ValueError(f"unknown pooling order {order!r}")


def rank_detections(frame: Frame, masks: dict[tuple[Role, FrameType], RoleMask],
                    fdist: FrameTypeDistribution, logits: np.ndarray,
                    top_k: int = 100, order: str = POOL_FIRST
                    ) -> dict[Role, list[Detection]]:
    """Score and rank candidate regions per role, descending; ties break toward
    the lower region index.  A role absent from the prompt yields an empty list."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    out: dict[Role, list[Detection]] = {}
    for role in (Role.OUC, Role.TOOL):
        role_masks = {ft: masks[(role, ft)] for ft in FrameType if (role, ft) in masks}
        if all(m.is_empty() for m in role_masks.values()):
            out[role] = []
            continue
        scored = []
        for j, region in enumerate(frame.regions):
            if not region.is_candidate:
                continue
            score = aggregate_role_score(logits, role_masks, fdist, j, order)
            scored.append(Detection(frame.frame_id, role, region.box, score, j))
        scored.sort(key=lambda det: (-det.score, det.region_index))
        out[role] = scored[:top_k]
    return out


class GroundingDetector:
    """Trained model bound to one instruction prompt; detects per frame."""

    def __init__(self, params: ModelParams, prompt: GroundingPrompt,
                 masks: dict[tuple[Role, FrameType], RoleMask],
                 top_k: int = 100, order: str = POOL_FIRST):
        self.params = params
        self.prompt = prompt
        self.masks = masks
        self.top_k = top_k
        self.order = order

    def detect(self, frame: Frame) -> dict[Role, list[Detection]]:
        words, regions = encode(self.prompt, frame, self.params)
        logits = alignment_logits(words, regions)
        fdist = predict_frame_type(self.prompt, frame, self.params)
        return rank_detections(frame, self.masks, fdist, logits,
                               top_k=self.top_k, order=self.order)

    def detect_ouc(self, frame: Frame) -> list[Detection]:
        return self.detect(frame)[Role.OUC]


def save_detections(detections: list[Detection], path: str):
    """JSON-lines interchange consumed by the metric and tracking tooling."""
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps({"frame_id": det.frame_id, "role": det.role.value,
                                 "box": det.box.to_list(), "score": det.score},
                                sort_keys=True))
            fh.write("\n")


def load_detections(path: str) -> list[Detection]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                out.append(Detection(doc["frame_id"], Role(doc["role"]),
                                     BBox.from_list(doc["box"]), float(doc["score"])))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection line: {exc}") from exc
    return out
