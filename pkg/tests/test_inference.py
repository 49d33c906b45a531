import numpy as np
import pytest

from activeground.geometry import BBox
from activeground.inference import (MIX_FIRST, POOL_FIRST, Detection, GroundingDetector,
                                    aggregate_role_score, load_detections, rank_detections,
                                    save_detections)
from activeground.model import FrameTypeDistribution
from activeground.prompts import FrameType, Role, RoleMask
from activeground.scenes import Region


def mask(role, ft, bits):
    return RoleMask(role, ft, np.asarray(bits, dtype=bool))


def fdist(p_pre, p_pnr, p_post):
    probs = np.array([p_pre, p_pnr, p_post], dtype=float)
    return FrameTypeDistribution(np.log(probs + 1e-300), probs)


def three_masks(pre_bits, pnr_bits, post_bits, role=Role.OUC):
    return {FrameType.PRE: mask(role, FrameType.PRE, pre_bits),
            FrameType.PNR: mask(role, FrameType.PNR, pnr_bits),
            FrameType.POST: mask(role, FrameType.POST, post_bits)}


def test_one_hot_reduces_to_masked_mean():
    logits = np.array([[0.5, -1.0, 2.0, 3.0]])
    masks = three_masks([1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1])
    score = aggregate_role_score(logits, masks, fdist(1, 0, 0), 0)
    assert score == logits[0, :2].mean()  # exact
    score_post = aggregate_role_score(logits, masks, fdist(0, 0, 1), 0)
    assert score_post == 3.0


def test_identical_masks_convex_identity():
    logits = np.array([[0.25, 0.5, 0.125]])
    bits = [1, 0, 1]
    masks = three_masks(bits, bits, bits)
    expected = logits[0, [0, 2]].mean()
    for probs in ((1 / 3, 1 / 3, 1 / 3), (0.2, 0.5, 0.3), (1, 0, 0)):
        score = aggregate_role_score(logits, masks, fdist(*probs), 0)
        assert score == pytest.approx(expected, abs=1e-12)


def test_aggregate_hand_value():
    # pre mean 0.2, post mean 0.6, weights (0.5, 0, 0.5) -> 0.4
    logits = np.array([[0.2, 0.9, 0.6]])
    masks = three_masks([1, 0, 0], [0, 1, 0], [0, 0, 1])
    score = aggregate_role_score(logits, masks, fdist(0.5, 0.0, 0.5), 0)
    assert score == pytest.approx(0.4)


def test_empty_mask_mass_renormalized():
    logits = np.array([[1.0, 3.0]])
    masks = three_masks([0, 0], [1, 0], [0, 1])  # pre empty
    score = aggregate_role_score(logits, masks, fdist(0.5, 0.25, 0.25), 0)
    assert score == pytest.approx(0.5 * 1.0 + 0.5 * 3.0)


def test_all_masks_empty_is_error():
    logits = np.array([[1.0]])
    masks = three_masks([0], [0], [0])
    with pytest.raises(ValueError, match="not in the prompt"):
        aggregate_role_score(logits, masks, fdist(1, 0, 0), 0)


def test_mix_first_equals_pool_first_on_identical_masks():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 6))
    bits = [1, 0, 1, 1, 0, 0]
    masks = three_masks(bits, bits, bits)
    d = fdist(0.2, 0.3, 0.5)
    a = aggregate_role_score(logits, masks, d, 0, order=POOL_FIRST)
    b = aggregate_role_score(logits, masks, d, 0, order=MIX_FIRST)
    assert a == pytest.approx(b, abs=1e-12)


def test_monotone_in_masked_cell():
    rng = np.random.default_rng(1)
    for _ in range(50):
        logits = rng.normal(size=(1, 5))
        masks = three_masks([1, 1, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 1, 1])
        d = fdist(*np.random.default_rng(2).dirichlet(np.ones(3)))
        base = aggregate_role_score(logits, masks, d, 0)
        bumped = logits.copy()
        bumped[0, 0] += 0.7  # masked (pre) cell
        assert aggregate_role_score(bumped, masks, d, 0) >= base


class PlainFrame:
    def __init__(self, boxes, frame_id="f"):
        self.frame_id = frame_id
        self.regions = [Region(b, np.zeros(2)) for b in boxes]
        self.gold = {}


def full_masks(pre, pnr, post, tool_bits=None):
    n = len(pre)
    tool_bits = tool_bits or [0] * n
    out = {}
    for ft, bits in ((FrameType.PRE, pre), (FrameType.PNR, pnr), (FrameType.POST, post)):
        out[(Role.OUC, ft)] = mask(Role.OUC, ft, bits)
        out[(Role.TOOL, ft)] = mask(Role.TOOL, ft, tool_bits)
    return out


def test_rank_detections_orders_and_truncates():
    frame = PlainFrame([BBox(0, 0, 1, 1), BBox(2, 0, 3, 1)])
    logits = np.array([[0.9], [0.1]])
    masks = full_masks([1], [1], [1])
    out = rank_detections(frame, masks, fdist(1, 0, 0), logits, top_k=1)
    assert len(out[Role.OUC]) == 1
    assert out[Role.OUC][0].box == BBox(0, 0, 1, 1)
    assert out[Role.OUC][0].score == pytest.approx(0.9)
    assert out[Role.TOOL] == []


def test_rank_detections_tie_breaks_by_index():
    frame = PlainFrame([BBox(0, 0, 1, 1), BBox(2, 0, 3, 1), BBox(4, 0, 5, 1)])
    logits = np.array([[0.5], [0.5], [0.5]])
    masks = full_masks([1], [1], [1])
    out = rank_detections(frame, masks, fdist(1, 0, 0), logits, top_k=3)
    assert [d.region_index for d in out[Role.OUC]] == [0, 1, 2]


def test_rank_detections_skips_non_candidates():
    frame = PlainFrame([BBox(0, 0, 1, 1), BBox(2, 0, 3, 1)])
    frame.regions[0] = Region(frame.regions[0].box, frame.regions[0].feature,
                              is_candidate=False)
    logits = np.array([[9.0], [0.1]])
    masks = full_masks([1], [1], [1])
    out = rank_detections(frame, masks, fdist(1, 0, 0), logits, top_k=5)
    assert [d.region_index for d in out[Role.OUC]] == [1]


def test_rank_detections_shift_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n_reg, n_tok = 4, 6
        frame = PlainFrame([BBox(i, 0, i + 1, 1) for i in range(n_reg)])
        logits = rng.normal(size=(n_reg, n_tok))
        bits = (rng.random(n_tok) < 0.5).astype(int)
        if not bits.any():
            bits[0] = 1
        masks = full_masks(bits, bits, bits)
        d = fdist(*rng.dirichlet(np.ones(3)))
        base = rank_detections(frame, masks, d, logits, top_k=n_reg)
        shifted = rank_detections(frame, masks, d, logits + 11.5, top_k=n_reg)
        assert [x.region_index for x in base[Role.OUC]] == \
            [x.region_index for x in shifted[Role.OUC]]


def test_rank_detections_top_k_validation():
    frame = PlainFrame([BBox(0, 0, 1, 1)])
    with pytest.raises(ValueError):
        rank_detections(frame, full_masks([1], [1], [1]), fdist(1, 0, 0),
                        np.zeros((1, 1)), top_k=0)


def test_detection_rejects_non_finite_score():
    with pytest.raises(ValueError):
        Detection("f", Role.OUC, BBox(0, 0, 1, 1), float("nan"))


def test_detections_roundtrip(tmp_path):
    dets = [Detection("f0", Role.OUC, BBox(0, 0, 1, 1), 0.5, 0),
            Detection("f1", Role.TOOL, BBox(1, 1, 2, 2), -0.25, 3)]
    path = tmp_path / "dets.jsonl"
    save_detections(dets, str(path))
    loaded = load_detections(str(path))
    assert [(d.frame_id, d.role, d.box, d.score) for d in loaded] == \
        [(d.frame_id, d.role, d.box, d.score) for d in dets]


def test_grounding_detector_end_to_end(small_model, plain_corpus, plain_bundles):
    ep = plain_corpus[0]
    det = small_model.detector_for(ep, plain_bundles)
    frame = ep.typed_frame(FrameType.PRE)
    out = det.detect(frame)
    assert out[Role.OUC]
    top = out[Role.OUC][0]
    assert top.box == frame.gold_boxes(Role.OUC)[0]
    assert isinstance(det, GroundingDetector)


def test_condition_model_ranks_state_matching_region_first(ambiguity_setup):
    """On ambiguous pre-frames (two same-noun regions, opposite states) the
    condition-trained model must put the pre-state instance on top."""
    cfg, est, test_eps = ambiguity_setup
    nouns, states = cfg.vocab()
    bundles = {ep.instruction.id: ep.gold_bundle for ep in test_eps}
    detections = est.predict(test_eps, bundles)
    hits = 0
    for ep in test_eps:
        frame = ep.typed_frame(FrameType.PRE)
        top = detections[frame.frame_id][Role.OUC][0]
        feature = frame.regions[top.region_index].feature
        noun_i = nouns.index(ep.gold_bundle.ouc.phrase)
        state_i = 12 + states.index(ep.gold_bundle.ouc_pre[0])
        assert feature[noun_i] > 0.5  # top-1 always carries the right noun
        if feature[state_i] > 0.5:
            hits += 1
    assert hits >= 0.75 * len(test_eps)
