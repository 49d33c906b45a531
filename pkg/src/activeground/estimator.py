"""Scikit-learn-style facade over the alignment model.

``ActiveObjectGrounder`` is fit on episodes plus their knowledge bundles and
predicts ranked per-role detections for every typed frame, so the grounding
pipeline composes with the usual get_params / set_params / clone machinery.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .det_metrics import top1_accuracy
from .inference import Detection, GroundingDetector, rank_detections
from .knowledge import KnowledgeBundle, bundle_from_strategy
from .model import (ModelParams, TrainConfig, alignment_logits, encode, predict_frame_type,
                    prepare_prompt, train)
from .prompts import FrameType, Role
from .scenes import Episode, TrackSequence


def _check_episodes(episodes) -> list[Episode]:
    episodes = list(episodes)
    if not episodes:
        raise ValueError("no episodes given")
    for ep in episodes:
        if not isinstance(ep, Episode):
            raise TypeError(f"expected Episode, got {type(ep).__name__}")
    return episodes


def resolve_bundles(items, bundles) -> dict[str, KnowledgeBundle]:
    """One bundle per instruction id: the given mapping, the item's gold
    bundle, or a full-instruction fallback, in that order."""
    out: dict[str, KnowledgeBundle] = {}
    for item in items:
        iid = item.instruction.id
        if bundles and iid in bundles:
            out[iid] = bundles[iid]
        elif item.gold_bundle is not None:
            out[iid] = item.gold_bundle
        else:
            out[iid] = bundle_from_strategy("full_instruction", item.instruction)
    return out


class ActiveObjectGrounder(BaseEstimator):
    """Word-region alignment grounder with frame-type-weighted joint inference.

    Parameters mirror the training config; all randomness flows from
    ``random_state``.
    """

    def __init__(self, latent_dim=16, lr=0.1, epochs=200, batch_size=8,
                 clip_bias=0.7, use_conditions=True, use_descriptions=False,
                 pnr_conditions="post", balance_positives=True,
                 frame_head_epochs=150, frame_head_lr=1.0, joint_frame_head=False,
                 max_tokens=256, top_k=100, pooling="pool_first", random_state=0):
        self.latent_dim = latent_dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.clip_bias = clip_bias
        self.use_conditions = use_conditions
        self.use_descriptions = use_descriptions
        self.pnr_conditions = pnr_conditions
        self.balance_positives = balance_positives
        self.frame_head_epochs = frame_head_epochs
        self.frame_head_lr = frame_head_lr
        self.joint_frame_head = joint_frame_head
        self.max_tokens = max_tokens
        self.top_k = top_k
        self.pooling = pooling
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            latent_dim=self.latent_dim, lr=self.lr, epochs=self.epochs,
            batch_size=self.batch_size, clip_bias=self.clip_bias,
            use_conditions=self.use_conditions, use_descriptions=self.use_descriptions,
            pnr_conditions=self.pnr_conditions, balance_positives=self.balance_positives,
            frame_head_epochs=self.frame_head_epochs, frame_head_lr=self.frame_head_lr,
            joint_frame_head=self.joint_frame_head, max_tokens=self.max_tokens,
        )

    def fit(self, episodes, bundles: dict[str, KnowledgeBundle] | None = None):
        episodes = _check_episodes(episodes)
        resolved = resolve_bundles(episodes, bundles)
        result = train(episodes, resolved, self.train_config(), self.random_state)
        self.params_ = result.params
        self.loss_curve_ = result.loss_curve
        self.frame_head_curve_ = result.frame_head_curve
        return self

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs) -> "ActiveObjectGrounder":
        """Inference-only estimator around loaded checkpoint parameters."""
        est = cls(latent_dim=params.latent_dim, **kwargs)
        est.params_ = params
        est.loss_curve_ = []
        est.frame_head_curve_ = []
        return est

    def _prompt_and_masks(self, episode, bundle):
        return prepare_prompt(episode, bundle, self.train_config())

    def predict(self, episodes, bundles: dict[str, KnowledgeBundle] | None = None
                ) -> dict[str, dict[Role, list[Detection]]]:
        """Ranked detections per role for every typed frame, keyed by frame id."""
        check_is_fitted(self, "params_")
        episodes = _check_episodes(episodes)
        resolved = resolve_bundles(episodes, bundles)
        out: dict[str, dict[Role, list[Detection]]] = {}
        for ep in episodes:
            prompt, masks = self._prompt_and_masks(ep, resolved[ep.instruction.id])
            for frame in ep.typed_frames():
                words, regions = encode(prompt, frame, self.params_)
                logits = alignment_logits(words, regions)
                fdist = predict_frame_type(prompt, frame, self.params_)
                out[frame.frame_id] = rank_detections(frame, masks, fdist, logits,
                                                      top_k=self.top_k, order=self.pooling)
        return out

    def score(self, episodes, bundles: dict[str, KnowledgeBundle] | None = None,
              frame_type: FrameType | None = None, iou_thr: float = 0.5) -> float:
        """Top-1 OUC accuracy over typed frames (optionally one frame type)."""
        episodes = _check_episodes(episodes)
        detections = self.predict(episodes, bundles)
        dets_by_image = {}
        gts_by_image = {}
        for ep in episodes:
            for frame in ep.typed_frames():
                if frame_type is not None and frame.frame_type != frame_type:
                    continue
                dets = detections[frame.frame_id][Role.OUC]
                dets_by_image[frame.frame_id] = [(d.box, d.score) for d in dets[:1]]
                gts_by_image[frame.frame_id] = frame.gold_boxes(Role.OUC)
        return top1_accuracy(dets_by_image, gts_by_image, iou_thr)

    def detector_for(self, item: Episode | TrackSequence,
                     bundles: dict[str, KnowledgeBundle] | None = None,
                     top_k: int = 100) -> GroundingDetector:
        """Detector bound to one item's instruction, for tracking re-focus."""
        check_is_fitted(self, "params_")
        bundle = resolve_bundles([item], bundles)[item.instruction.id]
        prompt, masks = prepare_prompt(item, bundle, self.train_config())
        return GroundingDetector(self.params_, prompt, masks, top_k=top_k,
                                 order=self.pooling)
