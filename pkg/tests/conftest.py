import pytest

from activeground.estimator import ActiveObjectGrounder
from activeground.scenes import SceneConfig, generate_corpus


@pytest.fixture(scope="session")
def plain_corpus():
    return generate_corpus(30, SceneConfig(), seed0=0)


@pytest.fixture(scope="session")
def plain_bundles(plain_corpus):
    return {ep.instruction.id: ep.gold_bundle for ep in plain_corpus}


@pytest.fixture(scope="session")
def small_model(plain_corpus, plain_bundles):
    """Grounder trained at shipped defaults, shared by inference/tracking tests."""
    est = ActiveObjectGrounder(random_state=11)
    est.fit(plain_corpus, plain_bundles)
    return est


@pytest.fixture(scope="session")
def ambiguity_setup():
    """Well-converged condition-trained grounder plus a held-out ambiguity split.

    The longer schedule (vs the shipped defaults) makes the state separation
    unambiguous so per-episode ranking mechanics can be asserted directly.
    """
    cfg = SceneConfig(ambiguity=True)
    train = generate_corpus(80, cfg, seed0=0)
    test = generate_corpus(40, cfg, seed0=20_000)
    est = ActiveObjectGrounder(use_conditions=True, use_descriptions=False,
                               lr=0.3, epochs=300, random_state=7)
    est.fit(train, {ep.instruction.id: ep.gold_bundle for ep in train})
    return cfg, est, test
