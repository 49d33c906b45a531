"""Template tracking over candidate regions with detector re-focus, plus the
one-pass evaluation protocols (OPE / OPE-Det) and their SS / NPS summaries.

Occluded frames (empty gold) are excluded from every summary statistic; the
tracker still runs through them, which is exactly when re-focus matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, iou, normalized_center_distance
from .inference import GroundingDetector
from .kvconfig import apply_kv, parse_kv_file
from .prompts import FrameType, Role
from .scenes import Episode, Frame, TrackSequence

MODE_OPE = "ope"
MODE_OPE_DET = "ope_det"

# thresholds as exact j/100 floats so grid-aligned distances tie consistently
NPS_THRESHOLDS = np.arange(51) / 100.0


@dataclass
class TrackerConfig:
    image_width: int = 640
    image_height: int = 480
    search_radius_frac: float = 0.25
    ema_alpha: float = 0.3
    update_threshold: float = 0.6
    refocus_tau: float = 0.5
    detector_floor: float = 0.0

    @classmethod
    def load(cls, path: str) -> "TrackerConfig":
        defaults = cls()
        fields_now = {k: getattr(defaults, k) for k in defaults.__dataclass_fields__}
        return cls(**apply_kv(fields_now, parse_kv_file(path), path))

    def search_radius(self) -> float:
        return self.search_radius_frac * math.hypot(self.image_width, self.image_height)


@dataclass
class TrackerState:
    template: np.ndarray  # unit-norm appearance template
    last_box: BBox
    confidence: float


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0:
        raise ValueError("zero feature cannot seed a template")
    return vec / norm


def init_state(frame: Frame, box: BBox) -> TrackerState:
    """Seed the template from the candidate region best overlapping the box."""
    if not frame.regions:
        raise ValueError(f"frame {frame.frame_id} has no regions")
    best = max(range(len(frame.regions)),
               key=lambda j: (iou(frame.regions[j].box, box), -j))
    return TrackerState(_unit(frame.regions[best].feature), box, 1.0)


def tracker_step(state: TrackerState, frame: Frame,
                 cfg: TrackerConfig) -> tuple[BBox, float, TrackerState]:
    """One tracking step: best cosine match to the template within the search
    radius; template updated by EMA only on confident matches.  With no region
    in radius the box freezes and confidence drops to 0."""
    if not frame.regions:
        raise ValueError(f"frame {frame.frame_id} has no regions")
    cx, cy = state.last_box.center
    radius = cfg.search_radius()
    best_j = -1
    best_sim = -np.inf
    for j, region in enumerate(frame.regions):
        rx, ry = region.box.center
        if math.hypot(rx - cx, ry - cy) > radius:
            continue
        feat = region.feature
        denom = float(np.linalg.norm(feat)) or 1.0
        sim = float(state.template @ feat) / denom
        if sim > best_sim:
            best_sim = sim
            best_j = j
    if best_j < 0:
        return state.last_box, 0.0, TrackerState(state.template, state.last_box, 0.0)
    confidence = min(max(best_sim, 0.0), 1.0)
    template = state.template
    if confidence >= cfg.update_threshold:
        feat = _unit(frame.regions[best_j].feature)
        template = _unit((1.0 - cfg.ema_alpha) * state.template + cfg.ema_alpha * feat)
    box = frame.regions[best_j].box
    return box, confidence, TrackerState(template, box, confidence)


def refocus(state: TrackerState, frame: Frame, detector: GroundingDetector,
            cfg: TrackerConfig) -> tuple[TrackerState, bool]:
    """Detector-assisted re-initialization when tracker confidence collapses.

    Runs only below the confidence gate; adopts the top-1 detection when its
    score clears the detector floor, otherwise leaves the state unchanged.
    """
    if state.confidence >= cfg.refocus_tau:
        return state, False
    dets = detector.detect_ouc(frame)
    if not dets:
        return state, False
    top = dets[0]
    if top.score <= cfg.detector_floor:
        return state, False
    feature = frame.regions[top.region_index].feature
    return TrackerState(_unit(feature), top.box, 1.0), True


@dataclass
class FrameRecord:
    frame_id: str
    box: BBox
    confidence: float
    iou: float | None  # None on excluded (occluded) frames
    center_distance: float | None


@dataclass
class TrackResult:
    sequence_id: str
    mode: str
    records: list[FrameRecord] = field(default_factory=list)
    ss: float | None = None
    nps: float | None = None
    n_eval: int = 0
    n_excluded: int = 0
    n_refocus: int = 0
    failed: bool = False
    note: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.sequence_id, "mode": self.mode,
            "ss": self.ss, "nps": self.nps,
            "n_eval": self.n_eval, "n_excluded": self.n_excluded,
            "n_refocus": self.n_refocus, "failed": self.failed, "note": self.note,
        }


def success_score(ious: list[float]) -> float:
    """Mean IoU over evaluated frames (equals the success-plot AUC over [0, 1])."""
    if not ious:
        raise ValueError("no evaluated frames")
    return float(np.mean(ious))


def norm_precision_score(distances: list[float]) -> float:
    """AUC of the normalized-precision plot over thresholds [0, 0.5], rescaled
    to [0, 1].  The t=0 sample uses distance <= 0 so perfect tracking scores 1."""
    if not distances:
        raise ValueError("no evaluated frames")
    d = np.asarray(distances, dtype=float)
    samples = [float((d <= 0.0).mean())]
    samples += [float((d < t).mean()) for t in NPS_THRESHOLDS[1:]]
    return float(np.mean(samples))


def run_ope(seq: TrackSequence, cfg: TrackerConfig,
            detector: GroundingDetector | None = None,
            mode: str = MODE_OPE, step_fn=tracker_step,
            use_refocus: bool = True) -> TrackResult:
    """One-pass evaluation over a sequence.

    ``ope`` initializes from the first-frame gold box; ``ope_det`` from the
    detector's top-1 first-frame prediction and marks the run failed (SS =
    NPS = 0) when the detector grounds nothing there.  When a detector is
    present the re-focus rule runs after every step unless disabled.
    """
    if mode not in (MODE_OPE, MODE_OPE_DET):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == MODE_OPE_DET and detector is None:
        raise ValueError("ope_det requires a detector")
    result = TrackResult(seq.sequence_id, mode)

    first = seq.frames[0]
    if mode == MODE_OPE:
        state = init_state(first, first.gold_boxes(Role.OUC)[0])
    else:
        dets = detector.detect_ouc(first)
        if not dets or dets[0].score <= cfg.detector_floor:
            result.failed = True
            result.note = "detector found no OUC on the first frame"
            result.ss = 0.0
            result.nps = 0.0
            return result
        top = dets[0]
        state = TrackerState(_unit(first.regions[top.region_index].feature), top.box, 1.0)

    ious: list[float] = []
    dists: list[float] = []
    for frame in seq.frames[1:]:
        box, confidence, state = step_fn(state, frame, cfg)
        if detector is not None and use_refocus:
            state, refocused = refocus(state, frame, detector, cfg)
            if refocused:
                box, confidence = state.last_box, state.confidence
                result.n_refocus += 1
        gold = frame.gold_boxes(Role.OUC)
        if gold:
            overlap = iou(box, gold[0])
            dist = normalized_center_distance(box, gold[0])
            ious.append(overlap)
            dists.append(dist)
            result.records.append(FrameRecord(frame.frame_id, box, confidence, overlap, dist))
        else:
            result.n_excluded += 1
            result.records.append(FrameRecord(frame.frame_id, box, confidence, None, None))
    result.n_eval = len(ious)
    if result.n_eval:
        result.ss = success_score(ious)
        result.nps = norm_precision_score(dists)
    else:
        result.note = "no evaluated frames"
    return result


def track_pnr_to_post(episode: Episode, cfg: TrackerConfig,
                      init_box: BBox | None = None) -> tuple[BBox, float]:
    """Table-style ablation harness: initialize on the PNR frame (gold box by
    default) and track one hop to the Post frame; the returned box is then
    scored as a top-1 detection."""
    pnr = episode.typed_frame(FrameType.PNR)
    post = episode.typed_frame(FrameType.POST)
    if init_box is None:
        init_box = pnr.gold_boxes(Role.OUC)[0]
    state = init_state(pnr, init_box)
    box, confidence, _ = tracker_step(state, post, cfg)
    return box, confidence


def summarize_runs(results: list[TrackResult]) -> dict:
    """Corpus-level report; sequences without evaluated frames are skipped in
    the means (failed runs count as zero by construction)."""
    scored = [r for r in results if r.ss is not None]
    return {
        "sequences": [r.to_json() for r in results],
        "n_sequences": len(results),
        "n_scored": len(scored),
        "mean_ss": float(np.mean([r.ss for r in scored])) if scored else None,
        "mean_nps": float(np.mean([r.nps for r in scored])) if scored else None,
        "total_refocus": int(sum(r.n_refocus for r in results)),
        "total_excluded": int(sum(r.n_excluded for r in results)),
    }
