import json
import math

import numpy as np
import pytest

from activeground.knowledge import EntityExtraction, KnowledgeBundle, Provenance
from activeground.model import (FRAME_ORDER, FrameTypeDistribution, GradCheckSample,
                                ModelParams, TrainConfig, alignment_logits, balance_weights,
                                build_targets, build_vocab, contrastive_loss, encode, grad_check,
                                init_params, load_checkpoint, phrase_box_score, predict_frame_type,
                                prepare_prompt, save_checkpoint, train)
from activeground.prompts import FrameType, Role, assemble_grounding_text
from activeground.scenes import generate_corpus


def tiny_params(emb, proj, d):
    emb = np.asarray(emb, dtype=float)
    proj = np.asarray(proj, dtype=float)
    vocab = ["<unk>"] + [f"t{i}" for i in range(emb.shape[0] - 1)]
    return ModelParams(vocab, emb, proj, np.zeros((2 * d, 3)), np.zeros(3))


def simple_prompt(tokens):
    text = " ".join(tokens)
    bundle = KnowledgeBundle("x", text,
                             ouc=EntityExtraction(tokens[0], (0, len(tokens[0])),
                                                  Provenance.LLM))
    return assemble_grounding_text(text, bundle, use_conditions=False,
                                   use_descriptions=False)


class FakeFrame:
    def __init__(self, features, frame_id="f0"):
        from activeground.geometry import BBox
        from activeground.scenes import Region
        self.frame_id = frame_id
        self.frame_type = None
        self.t = 0.0
        self.regions = [Region(BBox(i, 0, i + 1, 1), np.asarray(f, dtype=float))
                        for i, f in enumerate(features)]
        self.gold = {}

    def gold_boxes(self, role):
        return self.gold.get(role, [])


def test_encode_scalar_product():
    params = tiny_params([[0.0], [2.0]], [[3.0]], d=1)
    prompt = simple_prompt(["t0"])
    frame = FakeFrame([[1.0]])
    words, regions = encode(prompt, frame, params)
    logits = alignment_logits(words, regions)
    assert logits.shape == (1, 1)
    assert logits[0, 0] == pytest.approx(6.0)


def test_encode_zero_embedding_row():
    params = tiny_params([[0.0], [0.0]], [[3.0]], d=1)
    prompt = simple_prompt(["t0"])
    words, regions = encode(prompt, FakeFrame([[1.0]]), params)
    assert (alignment_logits(words, regions) == 0).all()


def test_encode_shapes():
    rng = np.random.default_rng(0)
    d, big_t, r, feat_d = 16, 7, 4, 32
    prompt = simple_prompt([f"w{i}" for i in range(big_t)])
    assert len(prompt.tokens) == big_t
    vocab = build_vocab([prompt])
    params = init_params(vocab, feat_d, d, seed=0)
    frame = FakeFrame(rng.normal(size=(r, feat_d)))
    words, regions = encode(prompt, frame, params)
    assert words.shape == (big_t, d) and regions.shape == (r, d)
    assert alignment_logits(words, regions).shape == (r, big_t)


def test_encode_feature_dim_mismatch():
    params = tiny_params([[0.0], [1.0]], [[1.0]], d=1)
    with pytest.raises(ValueError, match="dim"):
        encode(simple_prompt(["t0"]), FakeFrame([[1.0, 2.0]]), params)


def test_encode_oov_hits_unk():
    params = tiny_params([[5.0], [2.0]], [[1.0]], d=1)
    prompt = simple_prompt(["zzz"])
    words, _ = encode(prompt, FakeFrame([[1.0]]), params)
    assert words[0, 0] == 5.0


def test_phrase_box_score():
    logits = np.array([[0.2, 0.4, 1.0], [1.0, -1.0, 0.0]])
    assert phrase_box_score(logits, (0, 2), 0) == pytest.approx(0.3)
    assert phrase_box_score(logits, (2, 3), 0) == pytest.approx(1.0)
    assert phrase_box_score(logits, (0, 2), 1) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        phrase_box_score(logits, (1, 1), 0)
    with pytest.raises(ValueError):
        phrase_box_score(logits, (0, 2), 5)


def test_contrastive_loss_hand_values():
    loss, grad = contrastive_loss(np.array([[2.0]]), np.array([[1.0]]))
    assert loss == pytest.approx(math.log(1 + math.exp(-2)))
    z = np.zeros((2, 2))
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, grad = contrastive_loss(z, y)
    assert loss == pytest.approx(math.log(2))
    assert grad[0, 0] == pytest.approx(-0.5 / 4)
    assert grad[0, 1] == pytest.approx(0.5 / 4)


def test_contrastive_loss_shape_mismatch():
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_contrastive_loss_weighted_reduces_to_plain():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 4))
    y = (rng.random((3, 4)) < 0.3).astype(float)
    plain = contrastive_loss(z, y)
    weighted = contrastive_loss(z, y, np.ones_like(z))
    assert plain[0] == pytest.approx(weighted[0])
    np.testing.assert_allclose(plain[1], weighted[1])


def test_balance_weights():
    y = np.array([[1.0, 0.0, 0.0, 0.0]])
    w = balance_weights(y)
    assert w[0, 0] == pytest.approx(3.0)
    assert w[0, 1] == 1.0
    all_pos = balance_weights(np.ones((2, 2)))
    assert (all_pos == 1).all()


def test_build_targets_rows():
    eps = generate_corpus(1, seed0=0)
    ep = eps[0]
    bundle = ep.gold_bundle
    cfg = TrainConfig()
    prompt, masks = prepare_prompt(ep, bundle, cfg)
    fr = ep.typed_frame(FrameType.PRE)
    targets = build_targets(fr, masks)
    assert targets.shape == (len(fr.regions), len(prompt.tokens))
    gold_box = fr.gold_boxes(Role.OUC)[0]
    gold_j = [j for j, r in enumerate(fr.regions) if r.box == gold_box][0]
    np.testing.assert_array_equal(
        targets[gold_j] > 0, masks[(Role.OUC, FrameType.PRE)].bits)
    for j, r in enumerate(fr.regions):
        if r.box != gold_box and all(r.box != b for b in fr.gold_boxes(Role.TOOL)):
            assert not targets[j].any()


def test_build_targets_unmatched_gold_rejected():
    ep = generate_corpus(1, seed0=0)[0]
    cfg = TrainConfig()
    _, masks = prepare_prompt(ep, ep.gold_bundle, cfg)
    fr = ep.typed_frame(FrameType.PRE)
    from activeground.geometry import BBox
    fr.gold[Role.OUC] = [BBox(0.123, 0.456, 7.89, 9.01)]
    with pytest.raises(ValueError, match="matches 0 regions"):
        build_targets(fr, masks)


def test_train_zero_lr_leaves_params():
    eps = generate_corpus(6, seed0=0)
    bundles = {e.instruction.id: e.gold_bundle for e in eps}
    cfg = TrainConfig(lr=0.0, epochs=3, frame_head_epochs=0)
    res = train(eps, bundles, cfg, seed=1)
    fresh = init_params(res.params.vocab, 32, cfg.latent_dim, seed=1)
    np.testing.assert_array_equal(res.params.word_embeddings, fresh.word_embeddings)
    np.testing.assert_array_equal(res.params.region_projection, fresh.region_projection)


def test_train_deterministic_bytes(tmp_path):
    eps = generate_corpus(6, seed0=0)
    bundles = {e.instruction.id: e.gold_bundle for e in eps}
    cfg = TrainConfig(epochs=5, frame_head_epochs=5)
    paths = []
    for run in range(2):
        res = train(eps, bundles, cfg, seed=3)
        path = tmp_path / f"ckpt{run}.json"
        save_checkpoint(res.params, str(path))
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_loss_decreases_after_first_epoch():
    eps = generate_corpus(10, seed0=0)
    bundles = {e.instruction.id: e.gold_bundle for e in eps}
    res = train(eps, bundles, TrainConfig(epochs=3, frame_head_epochs=0), seed=0)
    assert res.loss_curve[1] < res.loss_curve[0]


def test_jittered_frames_feed_only_the_frame_head():
    eps = generate_corpus(6, seed0=0)
    bundles = {e.instruction.id: e.gold_bundle for e in eps}
    plain = train(eps, bundles, TrainConfig(epochs=5, frame_head_epochs=10), seed=4)
    jit = train(eps, bundles,
                TrainConfig(epochs=5, frame_head_epochs=10, jitter_per_frame=2), seed=4)
    np.testing.assert_array_equal(plain.params.word_embeddings, jit.params.word_embeddings)
    np.testing.assert_array_equal(plain.params.region_projection, jit.params.region_projection)
    assert not np.array_equal(plain.params.frame_head_w, jit.params.frame_head_w)


def test_train_shipped_defaults_converge():
    # threshold pinned from an oracle run of the shipped config (~0.21 final)
    eps = generate_corpus(50, seed0=0)
    bundles = {e.instruction.id: e.gold_bundle for e in eps}
    res = train(eps, bundles, TrainConfig(), seed=0)
    assert res.loss_curve[-1] < 0.25
    assert res.loss_curve[-1] < 0.2 * res.loss_curve[0]


def test_train_divergence_guard():
    eps = generate_corpus(6, seed0=0)
    bundles = {e.instruction.id: e.gold_bundle for e in eps}
    cfg = TrainConfig(lr=1e155, epochs=2, frame_head_epochs=0)
    with pytest.raises(FloatingPointError):
        train(eps, bundles, cfg, seed=0)


def test_frame_head_learns(plain_corpus, plain_bundles, small_model):
    assert small_model.frame_head_curve_[-1] < small_model.frame_head_curve_[0]


def test_predict_frame_type_hand_softmax():
    dist = FrameTypeDistribution.from_logits(np.array([10.0, 0.0, 0.0]))
    assert dist.probs[0] == pytest.approx(0.99991, abs=1e-5)
    assert dist.probs[1] == pytest.approx(4.54e-5, abs=1e-6)
    uniform = FrameTypeDistribution.from_logits(np.zeros(3))
    np.testing.assert_allclose(uniform.probs, 1 / 3)


def test_frame_type_shift_invariance():
    logits = np.array([1.2, -0.3, 0.8])
    a = FrameTypeDistribution.from_logits(logits)
    b = FrameTypeDistribution.from_logits(logits + 100.0)
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)


def test_frame_type_sums_to_one(small_model, plain_corpus, plain_bundles):
    ep = plain_corpus[0]
    prompt, _ = prepare_prompt(ep, plain_bundles[ep.instruction.id],
                               small_model.train_config())
    for fr in ep.typed_frames():
        dist = predict_frame_type(prompt, fr, small_model.params_)
        assert abs(float(dist.probs.sum()) - 1.0) <= 1e-9


def test_frame_order_is_pre_pnr_post():
    assert FRAME_ORDER == (FrameType.PRE, FrameType.PNR, FrameType.POST)


def rand_grad_sample(rng, n_tok, n_reg, feat_d, vocab_size=4):
    return GradCheckSample(
        token_ids=rng.integers(0, vocab_size, size=n_tok),
        features=rng.normal(size=(n_reg, feat_d)),
        targets=(rng.random((n_reg, n_tok)) < 0.4).astype(float),
    )


def test_grad_check_small_model():
    rng = np.random.default_rng(7)
    params = tiny_params(rng.uniform(-0.1, 0.1, size=(5, 2)),
                         rng.uniform(-0.1, 0.1, size=(3, 2)), d=2)
    batch = [rand_grad_sample(rng, 3, 2, 3) for _ in range(2)]
    assert grad_check(params, batch, eps=1e-5) < 1e-4


def test_grad_check_weighted_sample():
    rng = np.random.default_rng(8)
    params = tiny_params(rng.uniform(-0.1, 0.1, size=(4, 2)),
                         rng.uniform(-0.1, 0.1, size=(3, 2)), d=2)
    sample = rand_grad_sample(rng, 4, 3, 3)
    sample.weights = balance_weights(sample.targets)
    assert grad_check(params, [sample], eps=1e-5) < 1e-4


def test_grad_check_saturated_zero_gradient():
    params = tiny_params([[0.0, 0.0], [50.0, 50.0]], [[50.0, 50.0]], d=2)
    sample = GradCheckSample(token_ids=np.array([1]),
                             features=np.array([[1.0]]),
                             targets=np.array([[1.0]]))
    # positive logit ~5000: sigma saturates, both gradients ~0
    assert grad_check(params, [sample], eps=1e-4) < 1e-4


def test_grad_check_eps_guard():
    params = tiny_params([[0.0], [1.0]], [[1.0]], d=1)
    sample = GradCheckSample(np.array([1]), np.array([[1.0]]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        grad_check(params, [sample], eps=1e-12)
    with pytest.raises(ValueError):
        grad_check(params, [], eps=1e-5)


def test_checkpoint_roundtrip(tmp_path, small_model):
    path = tmp_path / "ckpt.json"
    save_checkpoint(small_model.params_, str(path), meta={"note": "test"})
    params, meta = load_checkpoint(str(path))
    assert meta["note"] == "test"
    np.testing.assert_array_equal(params.word_embeddings,
                                  small_model.params_.word_embeddings)
    np.testing.assert_array_equal(params.head_mu, small_model.params_.head_mu)
    assert params.vocab == small_model.params_.vocab


def test_checkpoint_unknown_schema(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema": "other/v9"}))
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(str(path))


def test_train_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("lr = 0.2\nepochs = 10\nuse_descriptions = true\n")
    cfg = TrainConfig.load(str(path))
    assert cfg.lr == 0.2 and cfg.epochs == 10 and cfg.use_descriptions is True


def test_train_config_bad_key(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("learning_rate = 0.2\n")
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig.load(str(path))
