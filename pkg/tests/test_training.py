import numpy as np
import pytest

from affcorr.acpnet import AcpModel, Architecture, acp_forward
from affcorr.dataset import CorrespondencePair, DatasetSplit, EmotionClass
from affcorr.errors import DataError, InvalidInput
from affcorr.training import (
    ProbeConfig,
    Stores,
    TrainConfig,
    evaluate_correspondence,
    retrieve,
    train,
    train_probe,
)

SMALL = Architecture.default(d_img=24, embed_dim=16, music_hidden=(20, 12), fusion_hidden=(10, 6, 4))
CLASSES = list(EmotionClass)


def _world(seed=0, n_images=30, n_songs=12, spread=0.3):
    """Class-clustered inputs; returns (stores, image classes, segment classes)."""
    rng = np.random.default_rng(seed)
    img_c = rng.normal(size=(3, 24)) * 3
    mus_c = rng.normal(size=(3, 193)) * 3
    images, segs, ic, sc = {}, {}, {}, {}
    for i in range(n_images):
        c = i % 3
        images[f"i{i:02d}"] = img_c[c] + spread * rng.normal(size=24)
        ic[f"i{i:02d}"] = c
    for s in range(n_songs):
        c = s % 3
        segs[f"s{s:02d}#0"] = mus_c[c] + spread * rng.normal(size=193)
        sc[f"s{s:02d}#0"] = c
    return Stores(images, segs), ic, sc


def _pairs(ic, sc, rng, n):
    pairs = set()
    imgs, segs = sorted(ic), sorted(sc)
    while len(pairs) < n:
        want = len(pairs) % 2 == 0
        i, s = imgs[rng.integers(len(imgs))], segs[rng.integers(len(segs))]
        if (ic[i] == sc[s]) == want:
            pairs.add(CorrespondencePair(i, s, want))
    return sorted(pairs)


@pytest.fixture(scope="module")
def world():
    stores, ic, sc = _world()
    pairs = _pairs(ic, sc, np.random.default_rng(1), 96)
    split = DatasetSplit(pairs[:64], pairs[64:80], pairs[80:], seed=0)
    return stores, ic, sc, split


def test_train_config_validation():
    with pytest.raises(InvalidInput):
        TrainConfig(patience=60)
    with pytest.raises(InvalidInput):
        TrainConfig(lr=-1)
    cfg = TrainConfig()
    assert (cfg.lr, cfg.max_epochs, cfg.patience, cfg.batch_size, cfg.dropout_p) == (1e-4, 50, 5, 64, 0.4)


def test_lr_zero_stops_at_patience(world):
    stores, _, _, split = world
    _, report = train(AcpModel.init(SMALL, seed=0), split, stores, TrainConfig(lr=0.0, patience=5))
    assert len(report.epochs) == 6
    assert len({e.val_accuracy for e in report.epochs}) == 1
    assert report.best_epoch == 1 and report.stopped_early


def test_overfit_32_pairs(world):
    stores, ic, sc, _ = world
    pairs = _pairs(ic, sc, np.random.default_rng(2), 32)
    split = DatasetSplit(pairs, pairs, [], seed=0)
    # capacity check for backprop + Adam; dropout noise is covered by the end-to-end run
    cfg = TrainConfig(lr=1e-3, max_epochs=50, patience=50, batch_size=8, dropout_p=0.0)
    arch = Architecture.default(d_img=24, embed_dim=64, music_hidden=(64, 64), fusion_hidden=(64, 32, 16))
    best, report = train(AcpModel.init(arch, seed=1), split, stores, cfg)
    res = evaluate_correspondence(best, pairs, stores)
    assert res.true_positive + res.true_negative >= 31
    assert report.best_val_accuracy == res.accuracy


def test_training_deterministic(world):
    stores, _, _, split = world
    cfg = TrainConfig(lr=1e-3, max_epochs=6, patience=6)
    a_model, a = train(AcpModel.init(SMALL, seed=4), split, stores, cfg)
    shuffled = DatasetSplit(list(reversed(split.train)), list(reversed(split.val)), split.test, 0)
    b_model, b = train(AcpModel.init(SMALL, seed=4), shuffled, stores, cfg)
    assert a.losses == b.losses
    for p, q in zip(a_model.params(), b_model.params()):
        assert p.tobytes() == q.tobytes()


def test_best_checkpoint_reproduces_val(world):
    stores, _, _, split = world
    best, report = train(AcpModel.init(SMALL, seed=5), split, stores, TrainConfig(lr=1e-3, max_epochs=10))
    assert report.best_val_accuracy == max(e.val_accuracy for e in report.epochs)
    assert evaluate_correspondence(best, split.val, stores).accuracy == report.best_val_accuracy
    assert report.test is not None and report.test.n == len(split.test)
    assert report.best_epoch <= report.epochs[-1].epoch


def test_missing_id(world):
    stores, _, _, split = world
    broken = DatasetSplit(split.train + [CorrespondencePair("nope", "s00#0", False)], split.val, [], 0)
    with pytest.raises(DataError):
        train(AcpModel.init(SMALL), broken, stores, TrainConfig(max_epochs=1, patience=1))


class _Const:
    """Stand-in model with a fixed output."""

    def __init__(self, p):
        self.z = np.log([1 - p, p]) if 0 < p < 1 else np.array([-50.0, 50.0])

    def logits(self, emb, feat):
        return np.tile(self.z, (len(emb), 1))


def test_constant_model_on_balanced_set(world):
    stores, _, _, split = world
    pairs = split.train
    assert sum(p.label for p in pairs) * 2 == len(pairs)
    assert evaluate_correspondence(_Const(1.0), pairs, stores).accuracy == 0.5


def test_label_flip_complement(world):
    stores, _, _, split = world
    model = AcpModel.init(SMALL, seed=6)
    pairs = split.train
    flipped = [CorrespondencePair(p.image_id, p.segment_id, not p.label) for p in pairs]
    a = evaluate_correspondence(model, pairs, stores).accuracy
    b = evaluate_correspondence(model, flipped, stores).accuracy
    assert a + b == pytest.approx(1.0)


def test_evaluate_matches_manual_scoring(world):
    stores, _, _, split = world
    model = AcpModel.init(SMALL, seed=7)
    rng = np.random.default_rng(3)
    pairs = [split.train[i] for i in rng.choice(len(split.train), 20, replace=False)]
    manual = sum(
        (acp_forward(model, stores.images[p.image_id], stores.music[p.segment_id]).p_true > 0.5) == p.label
        for p in pairs
    ) / 20
    res = evaluate_correspondence(model, pairs, stores)
    assert res.accuracy == manual
    assert res.n == 20


def test_evaluate_empty():
    with pytest.raises(InvalidInput):
        evaluate_correspondence(AcpModel.init(SMALL), [], Stores({}, {}))


def test_probe_clustered():
    rng = np.random.default_rng(8)
    centres = rng.normal(size=(3, 1024)) * 2
    labels = [CLASSES[i % 3] for i in range(300)]
    x = np.array([centres[int(c)] + 0.5 * rng.normal(size=1024) for c in labels])
    clf, report = train_probe(x, labels, ProbeConfig(seed=1, lr=1e-3))
    assert report.dims == [1024, 512, 32, 3]
    assert report.test_accuracy >= 0.95
    assert (report.n_train, report.n_val, report.n_test) == (210, 30, 60)


def test_probe_constant_embeddings():
    labels = ["a"] * 200 + ["b"] * 100
    x = np.ones((300, 32))
    clf, report = train_probe(x, labels, ProbeConfig(seed=2, lr=1e-3, max_epochs=20))
    # no signal: one prediction for every input, which should be the majority class
    pred = np.argmax(clf.net.forward(x), axis=1)
    assert len(set(pred)) == 1
    assert report.test_accuracy == pytest.approx(2 / 3, abs=0.1)


def test_probe_single_class():
    with pytest.raises(InvalidInput):
        train_probe(np.ones((20, 8)), ["a"] * 20)


def test_retrieve_permutation_and_scores(world):
    stores, _, _, _ = world
    model = AcpModel.init(SMALL, seed=9)
    q = stores.images["i00"]
    out = retrieve(model, q, stores.music, k=len(stores.music))
    assert sorted(sid for sid, _ in out) == sorted(stores.music)
    for sid, score in out:
        assert score == acp_forward(model, q, stores.music[sid]).p_true
    assert [s for _, s in out] == sorted((s for _, s in out), reverse=True)


def test_retrieve_tie_order():
    model = AcpModel.init(SMALL, init="zeros")
    lib = [("b", np.zeros(193)), ("a", np.zeros(193)), ("c", np.zeros(193))]
    assert [sid for sid, _ in retrieve(model, np.zeros(24), lib, 3)] == ["a", "b", "c"]


def test_retrieve_errors():
    model = AcpModel.init(SMALL)
    with pytest.raises(InvalidInput):
        retrieve(model, np.zeros(24), {}, 1)
    with pytest.raises(InvalidInput):
        retrieve(model, np.zeros(24), {"a": np.zeros(193)}, 2)
