"""Word-region alignment model: embeddings, dot-product logits, contrastive
training with knowledge label propagation, and a frame-type classifier head.

Late-fusion by design: word features are embedding rows, region features go
through a single linear projection, and their plain dot products are the
alignment logits.  Everything is trained with hand-rolled SGD so gradients
stay finite-difference checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .knowledge import KnowledgeBundle
from .kvconfig import apply_kv, parse_kv_file
from .prompts import (FrameType, GroundingPrompt, Role, RoleMask, assemble_grounding_text,
                      build_role_masks)
from .scenes import Episode, Frame, jitter_frames

UNK = "<unk>"
FRAME_ORDER = (FrameType.PRE, FrameType.PNR, FrameType.POST)
CHECKPOINT_SCHEMA = "activeground-checkpoint/v1"


@dataclass
class ModelParams:
    vocab: list[str]  # token text per embedding row; row 0 is <unk>
    word_embeddings: np.ndarray  # V x d
    region_projection: np.ndarray  # D x d
    frame_head_w: np.ndarray  # 2d x 3
    frame_head_b: np.ndarray  # 3
    head_mu: np.ndarray | None = None  # head input standardization, 2d
    head_sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.vocab[0] != UNK:
            raise ValueError("vocab row 0 must be the UNK token")
        if self.word_embeddings.shape[0] != len(self.vocab):
            raise ValueError("embedding rows must match vocab size")
        d = self.latent_dim
        if self.region_projection.shape[1] != d:
            raise ValueError("projection and embeddings disagree on latent dim")
        if self.frame_head_w.shape != (2 * d, 3) or self.frame_head_b.shape != (3,):
            raise ValueError("frame head must map 2d features to 3 logits")
        if self.head_mu is None:
            self.head_mu = np.zeros(2 * d)
        if self.head_sigma is None:
            self.head_sigma = np.ones(2 * d)
        if self.head_mu.shape != (2 * d,) or self.head_sigma.shape != (2 * d,):
            raise ValueError("head standardization vectors must have length 2d")
        self._index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def latent_dim(self) -> int:
        return self.word_embeddings.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.region_projection.shape[0]

    def token_ids(self, prompt: GroundingPrompt) -> np.ndarray:
        return np.array([self._index.get(t.text, 0) for t in prompt.tokens], dtype=int)

    def copy(self) -> "ModelParams":
        return ModelParams(list(self.vocab), self.word_embeddings.copy(),
                           self.region_projection.copy(), self.frame_head_w.copy(),
                           self.frame_head_b.copy(), self.head_mu.copy(),
                           self.head_sigma.copy())


@dataclass(frozen=True)
class FrameTypeDistribution:
    logits: np.ndarray  # (pre, pnr, post)
    probs: np.ndarray

    def __post_init__(self):
        if self.probs.shape != (3,) or self.logits.shape != (3,):
            raise ValueError("frame-type distribution is 3-way")
        if not np.isfinite(self.probs).all() or abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise ValueError("probabilities must be finite and sum to 1")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "FrameTypeDistribution":
        logits = np.asarray(logits, dtype=float)
        shifted = logits - logits.max()
        exp = np.exp(shifted)
        return cls(logits, exp / exp.sum())

    def prob(self, frame_type: FrameType) -> float:
        return float(self.probs[FRAME_ORDER.index(frame_type)])

    @classmethod
    def one_hot(cls, frame_type: FrameType) -> "FrameTypeDistribution":
        probs = np.zeros(3)
        probs[FRAME_ORDER.index(frame_type)] = 1.0
        return cls(np.log(probs + 1e-300), probs)


def build_vocab(prompts: list[GroundingPrompt]) -> list[str]:
    tokens = sorted({tok.text for prompt in prompts for tok in prompt.tokens})
    return [UNK] + tokens


def init_params(vocab: list[str], feature_dim: int, latent_dim: int,
                seed: int) -> ModelParams:
    """Uniform(-0.1, 0.1) embedding tables from the run seed; zero frame head."""
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.1, 0.1, size=(len(vocab), latent_dim))
    proj = rng.uniform(-0.1, 0.1, size=(feature_dim, latent_dim))
    return ModelParams(list(vocab), emb, proj,
                       np.zeros((2 * latent_dim, 3)), np.zeros(3))


def region_features(frame: Frame) -> np.ndarray:
    return np.stack([r.feature for r in frame.regions])


def encode(prompt: GroundingPrompt, frame: Frame, params: ModelParams
           ) -> tuple[np.ndarray, np.ndarray]:
    """(word features T x d, region features R x d); OOV tokens hit the UNK row."""
    feats = region_features(frame)
    if feats.shape[1] != params.feature_dim:
        raise ValueError(f"region feature dim {feats.shape[1]} != "
                         f"projection input {params.feature_dim}")
    words = params.word_embeddings[params.token_ids(prompt)]
    regions = feats @ params.region_projection
    return words, regions


def alignment_logits(words: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Dot-product logits, region-major: value[j][i] = region_j . word_i."""
    return regions @ words.T


def phrase_box_score(logits: np.ndarray, span: tuple[int, int], j: int) -> float:
    """Mean pooling of the dot products over the phrase token span, one region."""
    start, end = span
    if not (0 <= start < end <= logits.shape[1]):
        raise ValueError(f"empty or out-of-bounds span {span}")
    if not (0 <= j < logits.shape[0]):
        raise ValueError(f"region index {j} out of bounds")
    return float(logits[j, start:end].mean())


def contrastive_loss(logits: np.ndarray, targets: np.ndarray,
                     weights: np.ndarray | None = None
                     ) -> tuple[float, np.ndarray]:
    """Per-cell binary cross-entropy with logits, averaged over all cells.

    Returns (loss, gradient w.r.t. the logits).  Optional per-cell weights
    rescale the numerator only; the cell count stays the normalizer.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"logit shape {logits.shape} != target shape {targets.shape}")
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = z.size
    with np.errstate(over="ignore", invalid="ignore"):
        cell = np.logaddexp(0.0, z) - y * z
        sigma = np.exp(-np.logaddexp(0.0, -z))  # stable sigmoid
    if weights is None:
        return float(cell.mean()), (sigma - y) / n
    w = np.asarray(weights, dtype=float)
    if w.shape != z.shape:
        raise ValueError("weight shape must match logits")
    return float((w * cell).sum() / n), w * (sigma - y) / n


def balance_weights(targets: np.ndarray) -> np.ndarray:
    """Positives weighted by the negative/positive count ratio within the sample."""
    n_pos = float(targets.sum())
    n_neg = targets.size - n_pos
    weights = np.ones_like(targets, dtype=float)
    if n_pos > 0 and n_neg > 0:
        weights[targets > 0] = n_neg / n_pos
    return weights


def build_targets(frame: Frame, masks: dict[tuple[Role, FrameType], RoleMask],
                  atol: float = 1e-6) -> np.ndarray:
    """Target matrix (regions x tokens): each gold region row carries 1s on its
    role's mention and propagated knowledge tokens for the frame's type;
    distractor rows stay all-zero.
    """
    if frame.frame_type is None:
        raise ValueError(f"frame {frame.frame_id} has no frame type")
    n_tokens = next(iter(masks.values())).bits.size
    targets = np.zeros((len(frame.regions), n_tokens))
    for role in (Role.OUC, Role.TOOL):
        bits = masks[(role, frame.frame_type)].bits
        for gold_box in frame.gold_boxes(role):
            j = _matching_region(frame, gold_box, atol)
            targets[j, bits] = 1.0
    return targets


def _matching_region(frame: Frame, gold_box, atol: float) -> int:
    gold = np.array(gold_box.to_list())
    hits = [j for j, region in enumerate(frame.regions)
            if np.allclose(np.array(region.box.to_list()), gold, atol=atol)]
    if len(hits) != 1:
        raise ValueError(f"frame {frame.frame_id}: gold box matches {len(hits)} regions; "
                         "candidate-scoring training needs exactly one")
    return hits[0]


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    latent_dim: int = 16
    lr: float = 0.1
    epochs: int = 200
    batch_size: int = 8
    clip_bias: float = 0.7
    use_conditions: bool = True
    use_descriptions: bool = False
    pnr_conditions: str = "post"
    balance_positives: bool = True
    frame_head_epochs: int = 150
    frame_head_lr: float = 1.0
    joint_frame_head: bool = False
    jitter_per_frame: int = 0
    jitter_window_s: float = 0.2
    max_tokens: int = 256

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        defaults = cls()
        fields_now = {k: getattr(defaults, k) for k in defaults.__dataclass_fields__}
        return cls(**apply_kv(fields_now, parse_kv_file(path), path))

    def pnr_frame(self) -> FrameType:
        if self.pnr_conditions not in ("pre", "post"):
            raise ValueError("pnr_conditions must be 'pre' or 'post'")
        return FrameType(self.pnr_conditions)


@dataclass
class _Sample:
    clip_id: str
    token_ids: np.ndarray
    features: np.ndarray  # R x D
    targets: np.ndarray  # R x T
    weights: np.ndarray | None
    frame_label: int  # index into FRAME_ORDER
    head_only: bool = False  # jittered frames feed the frame-type head only


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list[float] = field(default_factory=list)  # [init, epoch1, ...]
    frame_head_curve: list[float] = field(default_factory=list)


def prepare_prompt(episode: Episode, bundle: KnowledgeBundle, cfg: TrainConfig
                   ) -> tuple[GroundingPrompt, dict[tuple[Role, FrameType], RoleMask]]:
    prompt = assemble_grounding_text(episode.instruction.text, bundle,
                                     use_conditions=cfg.use_conditions,
                                     use_descriptions=cfg.use_descriptions,
                                     max_tokens=cfg.max_tokens)
    return prompt, build_role_masks(prompt, pnr_conditions=cfg.pnr_frame())


def _collect_samples(episodes: list[Episode], bundles: dict[str, KnowledgeBundle],
                     cfg: TrainConfig, seed: int
                     ) -> tuple[list[_Sample], list[GroundingPrompt]]:
    """Samples carry their prompt index in token_ids until the vocab exists.

    Jittered frames expand frame-type training data only; they are flagged
    head_only and skipped by the alignment minibatches.
    """
    samples = []
    prompts = []
    for ep_idx, ep in enumerate(episodes):
        bundle = bundles[ep.instruction.id]
        prompt, masks = prepare_prompt(ep, bundle, cfg)
        prompt_idx = len(prompts)
        prompts.append(prompt)
        n_base = len(ep.frames)
        if cfg.jitter_per_frame > 0:
            jitter_seed = int(np.random.SeedSequence([seed, ep_idx]).generate_state(1)[0])
            ep = jitter_frames(ep, cfg.jitter_window_s, cfg.jitter_per_frame, jitter_seed)
        for k, fr in enumerate(ep.frames):
            if fr.frame_type is None:
                continue
            targets = build_targets(fr, masks)
            weights = balance_weights(targets) if cfg.balance_positives else None
            samples.append(_Sample(ep.clip_id, np.array([prompt_idx]), region_features(fr),
                                   targets, weights, FRAME_ORDER.index(fr.frame_type),
                                   head_only=k >= n_base))
    return samples, prompts


def _sample_loss_and_grads(sample: _Sample, params: ModelParams, want_grads: bool):
    with np.errstate(over="ignore", invalid="ignore"):
        words = params.word_embeddings[sample.token_ids]
        regions = sample.features @ params.region_projection
        logits = regions @ words.T
        loss, grad_z = contrastive_loss(logits, sample.targets, sample.weights)
        if not want_grads:
            return loss, None, None
        emb_grad = np.zeros_like(params.word_embeddings)
        np.add.at(emb_grad, sample.token_ids, grad_z.T @ regions)
        proj_grad = sample.features.T @ (grad_z @ words)
    return loss, emb_grad, proj_grad


def _clip_biased_order(samples: list[_Sample], n_draws: int, beta: float,
                       rng: np.random.Generator) -> list[int]:
    """Sample indices with replacement; with probability beta the next draw
    stays within the current clip."""
    by_clip: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_clip.setdefault(s.clip_id, []).append(i)
    order = []
    current: str | None = None
    for _ in range(n_draws):
        if current is not None and rng.random() < beta:
            pool = by_clip[current]
            idx = pool[int(rng.integers(len(pool)))]
        else:
            idx = int(rng.integers(len(samples)))
            current = samples[idx].clip_id
        order.append(idx)
    return order


def _dataset_loss(samples: list[_Sample], params: ModelParams) -> float:
    return float(np.mean([_sample_loss_and_grads(s, params, False)[0] for s in samples]))


def _head_input(words: np.ndarray, regions: np.ndarray) -> np.ndarray:
    return np.concatenate([words.mean(axis=0), regions.mean(axis=0)])


def _frame_head_step(samples: list[_Sample], params: ModelParams, lr: float
                     ) -> float:
    """One full-batch SGD step on the frame-type head; returns the CE loss.

    Head inputs are standardized per dimension; the statistics are refreshed
    from the current encoders and stored on the params for inference.
    """
    xs, labels = [], []
    for s in samples:
        words = params.word_embeddings[s.token_ids]
        regions = s.features @ params.region_projection
        xs.append(_head_input(words, regions))
        labels.append(s.frame_label)
    x = np.stack(xs)
    y = np.array(labels)
    params.head_mu = x.mean(axis=0)
    params.head_sigma = x.std(axis=0) + 1e-8
    x = (x - params.head_mu) / params.head_sigma
    logits = x @ params.frame_head_w + params.frame_head_b
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    n = len(samples)
    loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())
    grad_logits = probs.copy()
    grad_logits[np.arange(n), y] -= 1.0
    grad_logits /= n
    params.frame_head_w -= lr * (x.T @ grad_logits)
    params.frame_head_b -= lr * grad_logits.sum(axis=0)
    return loss


def train(episodes: list[Episode], bundles: dict[str, KnowledgeBundle],
          cfg: TrainConfig, seed: int) -> TrainResult:
    """Minibatch SGD through encode -> logits -> contrastive loss.

    Deterministic in (data, cfg, seed).  Aborts if the loss goes non-finite.
    The frame-type head is trained after alignment unless joint_frame_head
    interleaves its full-batch updates with the alignment epochs.
    """
    if not episodes:
        raise ValueError("no training episodes")
    all_samples, prompts = _collect_samples(episodes, bundles, cfg, seed)
    vocab = build_vocab(prompts)
    feature_dim = episodes[0].frames[0].regions[0].feature.size
    params = init_params(vocab, feature_dim, cfg.latent_dim, seed)
    for s in all_samples:
        s.token_ids = params.token_ids(prompts[int(s.token_ids[0])])
    samples = [s for s in all_samples if not s.head_only]

    rng = np.random.default_rng(seed)
    result = TrainResult(params)
    result.loss_curve.append(_dataset_loss(samples, params))
    n_batches = max(1, (len(samples) + cfg.batch_size - 1) // cfg.batch_size)
    for _ in range(cfg.epochs):
        order = _clip_biased_order(samples, n_batches * cfg.batch_size, cfg.clip_bias, rng)
        epoch_losses = []
        for b in range(n_batches):
            batch = [samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            emb_grad = np.zeros_like(params.word_embeddings)
            proj_grad = np.zeros_like(params.region_projection)
            batch_loss = 0.0
            for s in batch:
                loss, eg, pg = _sample_loss_and_grads(s, params, True)
                batch_loss += loss
                emb_grad += eg
                proj_grad += pg
            k = len(batch)
            batch_loss /= k
            if not np.isfinite(batch_loss):
                raise FloatingPointError("training diverged: non-finite loss")
            params.word_embeddings -= cfg.lr * emb_grad / k
            params.region_projection -= cfg.lr * proj_grad / k
            epoch_losses.append(batch_loss)
        result.loss_curve.append(float(np.mean(epoch_losses)))
        if cfg.joint_frame_head:
            result.frame_head_curve.append(
                _frame_head_step(all_samples, params, cfg.frame_head_lr))
    if not cfg.joint_frame_head:
        for _ in range(cfg.frame_head_epochs):
            result.frame_head_curve.append(
                _frame_head_step(all_samples, params, cfg.frame_head_lr))
    return result


def predict_frame_type(prompt: GroundingPrompt, frame: Frame,
                       params: ModelParams) -> FrameTypeDistribution:
    """3-way (pre, pnr, post) distribution from mean-pooled word and region features."""
    words, regions = encode(prompt, frame, params)
    x = (_head_input(words, regions) - params.head_mu) / params.head_sigma
    return FrameTypeDistribution.from_logits(x @ params.frame_head_w + params.frame_head_b)


# ---------------------------------------------------------------------------
# gradient verification

@dataclass
class GradCheckSample:
    token_ids: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None

    def as_sample(self) -> _Sample:
        return _Sample("clip", self.token_ids, self.features, self.targets,
                       self.weights, 0)


def grad_check(params: ModelParams, batch: list[GradCheckSample],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of
    the mean batch loss over every embedding and projection entry."""
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside the [1e-6, 1e-3] precision window")
    if not batch:
        raise ValueError("empty batch")
    samples = [b.as_sample() for b in batch]

    emb_grad = np.zeros_like(params.word_embeddings)
    proj_grad = np.zeros_like(params.region_projection)
    for s in samples:
        _, eg, pg = _sample_loss_and_grads(s, params, True)
        emb_grad += eg / len(samples)
        proj_grad += pg / len(samples)

    def total_loss() -> float:
        return float(np.mean([_sample_loss_and_grads(s, params, False)[0] for s in samples]))

    worst = 0.0
    for matrix, analytic in ((params.word_embeddings, emb_grad),
                             (params.region_projection, proj_grad)):
        it = np.nditer(matrix, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = matrix[idx]
            matrix[idx] = orig + eps
            up = total_loss()
            matrix[idx] = orig - eps
            down = total_loss()
            matrix[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[idx])
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
            worst = max(worst, err)
            it.iternext()
    return worst


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path: str, meta: dict | None = None):
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "vocab": params.vocab,
        "word_embeddings": params.word_embeddings.tolist(),
        "region_projection": params.region_projection.tolist(),
        "frame_head_w": params.frame_head_w.tolist(),
        "frame_head_b": params.frame_head_b.tolist(),
        "head_mu": params.head_mu.tolist(),
        "head_sigma": params.head_sigma.tolist(),
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unknown checkpoint schema {doc.get('schema')!r}")
    params = ModelParams(
        doc["vocab"],
        np.array(doc["word_embeddings"], dtype=float),
        np.array(doc["region_projection"], dtype=float),
        np.array(doc["frame_head_w"], dtype=float),
        np.array(doc["frame_head_b"], dtype=float),
        np.array(doc["head_mu"], dtype=float),
        np.array(doc["head_sigma"], dtype=float),
    )
    return params, doc.get("meta", {})
