"""Training and evaluation: correspondence training with early stopping,
emotion probes on frozen embeddings, and crossmodal retrieval."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .acpnet import AcpModel, acp_forward, extract_embedding
from .dataset import CorrespondencePair, DatasetSplit, partition_counts
from .errors import DataError, DivergenceError, InvalidInput
from .neural import MLP, AdamState, Classifier, adam_step, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    dropout_p: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise InvalidInput(f"invalid training config {self}")
        if self.patience > self.max_epochs:
            raise InvalidInput("patience cannot exceed max_epochs")
        if not 0 <= self.dropout_p < 1:
            raise InvalidInput("dropout_p must be in [0, 1)")


@dataclass
class Stores:
    """Lookup tables from ids to model inputs."""

    images: Mapping[str, np.ndarray]
    music: Mapping[str, np.ndarray]

    def gather(self, pairs: Sequence[CorrespondencePair]):
        try:
            emb = np.stack([np.asarray(self.images[p.image_id]) for p in pairs])
        except KeyError as exc:
            raise DataError(f"image id {exc.args[0]!r} missing from the embedding store") from None
        try:
            feat = np.stack([np.asarray(self.music[p.segment_id]) for p in pairs])
        except KeyError as exc:
            raise DataError(f"segment id {exc.args[0]!r} missing from the feature store") from None
        labels = np.array([p.label for p in pairs], dtype=np.int64)
        return emb.astype(np.float32), feat.astype(np.float32), labels


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    true_positive: int
    false_positive: int
    true_negative: int
    false_negative: int

    @property
    def n(self) -> int:
        return self.true_positive + self.false_positive + self.true_negative + self.false_negative


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test: EvalResult | None = None
    wall_time_s: float = 0.0
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"{'epoch':>5}  {'loss':>10}  {'train_acc':>9}  {'val_acc':>7}"]
        for e in self.epochs:
            mark = " *" if e.epoch == self.best_epoch else ""
            lines.append(f"{e.epoch:>5}  {e.train_loss:>10.6f}  {e.train_accuracy:>9.4f}  "
                         f"{e.val_accuracy:>7.4f}{mark}")
        lines.append(f"best epoch {self.best_epoch}: val accuracy {self.best_val_accuracy:.4f}")
        if self.test is not None:
            lines.append(f"test accuracy {self.test.accuracy:.4f} on {self.test.n} pairs")
        lines.append(f"wall time {self.wall_time_s:.1f} s")
        return "\n".join(lines)


def predict_p_true(model: AcpModel, emb: np.ndarray, feat: np.ndarray) -> np.ndarray:
    out = []
    for s in range(0, emb.shape[0], EVAL_CHUNK):
        z = model.logits(emb[s:s + EVAL_CHUNK], feat[s:s + EVAL_CHUNK])
        out.append(softmax(z.astype(np.float64))[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def _score(p_true: np.ndarray, labels: np.ndarray) -> EvalResult:
    pred = p_true > 0.5
    truth = labels.astype(bool)
    tp = int(np.sum(pred & truth))
    tn = int(np.sum(~pred & ~truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return EvalResult((tp + tn) / len(labels), tp, fp, tn, fn)


def evaluate_correspondence(model: AcpModel, pairs: Sequence[CorrespondencePair],
                            stores: Stores) -> EvalResult:
    if not pairs:
        raise InvalidInput("cannot evaluate on an empty pair set")
    emb, feat, labels = stores.gather(pairs)
    return _score(predict_p_true(model, emb, feat), labels)


def _restore(model: AcpModel, params: list[np.ndarray]) -> None:
    for dst, src in zip(model.params(), params):
        dst[...] = src


def train(model: AcpModel, split: DatasetSplit, stores: Stores,
          cfg: TrainConfig | None = None) -> tuple[AcpModel, TrainReport]:
    """Minibatch Adam with early stopping on validation accuracy.

    ``model`` is trained in place; the returned model is a separate copy holding
    the best-validation parameters, and the test split is scored once on it.
    """
    cfg = cfg or TrainConfig()
    if not split.train or not split.val:
        raise InvalidInput("training needs non-empty train and validation partitions")
    start = time.perf_counter()
    # canonical order: independent of how the pair files were written
    train_pairs, val_pairs = sorted(split.train), sorted(split.val)
    emb, feat, y = stores.gather(train_pairs)
    v_emb, v_feat, v_y = stores.gather(val_pairs)

    if model.music_norm is None or model.image_norm is None:
        # statistics over distinct training inputs, not over pair repetitions
        _, first_img = np.unique([p.image_id for p in train_pairs], return_index=True)
        _, first_seg = np.unique([p.segment_id for p in train_pairs], return_index=True)
        model.fit_normalization(emb[first_img], feat[first_seg])

    rng = np.random.default_rng(cfg.seed)
    model.set_dropout(cfg.dropout_p)
    params = model.params()
    opt = AdamState.for_params(params, cfg.lr)
    report = TrainReport()
    best_params = [p.copy() for p in params]
    best_acc, since_best = -1.0, 0
    n = len(y)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads, _ = model.loss_and_grads((emb[idx], feat[idx]), y[idx], train=True, rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {s}; "
                    f"max |param| = {max(float(np.abs(p).max()) for p in params):.3g}"
                )
            adam_step(params, grads, opt)
            total += loss * len(idx)
        model.epoch = epoch
        train_acc = _score(predict_p_true(model, emb, feat), y).accuracy
        val_acc = _score(predict_p_true(model, v_emb, v_feat), v_y).accuracy
        report.epochs.append(EpochRecord(epoch, total / n, train_acc, val_acc))
        log.info("epoch %d loss %.6f train %.4f val %.4f", epoch, total / n, train_acc, val_acc)
        if val_acc > best_acc:
            best_acc, since_best = val_acc, 0
            report.best_epoch = epoch
            best_params = [p.copy() for p in params]
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stopped_early = True
                break

    model.optimizer = opt
    best = model.copy()
    _restore(best, best_params)
    best.epoch = report.best_epoch
    report.best_val_accuracy = best_acc
    if split.test:
        report.test = evaluate_correspondence(best, split.test, stores)
    report.wall_time_s = time.perf_counter() - start
    return best, report


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeConfig:
    hidden: tuple[int, ...] = (512, 32)
    n_classes: int = 3
    input_dim: int = 1024
    lr: float = 1e-4
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    dropout_p: float = 0.4
    seed: int = 0

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.n_classes]


@dataclass
class ProbeReport:
    dims: list[int]
    classes: list[str]
    train_accuracy: float
    val_accuracy: float
    test_accuracy: float
    n_train: int
    n_val: int
    n_test: int
    best_epoch: int


def _probe_accuracy(net: MLP, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(net.forward(x), axis=1) == y))


def train_probe(embeddings: np.ndarray, labels: Sequence, cfg: ProbeConfig | None = None,
                classes: Sequence | None = None) -> tuple[Classifier, ProbeReport]:
    """Train a small MLP classifier on frozen embeddings.

    The samples are split 70:10:20 (seeded); training stops early on validation
    accuracy and the reported accuracy is on the held-out 20%.
    """
    cfg = cfg or ProbeConfig()
    x = np.asarray(embeddings, dtype=np.float32)
    classes = sorted(set(labels)) if classes is None else list(classes)
    if len(set(labels)) < 2:
        raise InvalidInput("probe training needs at least two classes")
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[l] for l in labels], dtype=np.int64)
    cfg = ProbeConfig(**{**asdict(cfg), "n_classes": len(classes), "input_dim": x.shape[1]})

    rng = np.random.default_rng(cfg.seed)
    n_train, n_val, _ = partition_counts(len(y))
    order = rng.permutation(len(y))
    tr, va, te = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]

    net = MLP.build(cfg.dims, rng, dropout_hidden=True, p_drop=cfg.dropout_p)
    clf = Classifier(net)
    params = net.params()
    opt = AdamState.for_params(params, cfg.lr)
    best_acc, best_epoch, since = -1.0, 0, 0
    best = [p.copy() for p in params]
    for epoch in range(1, cfg.max_epochs + 1):
        perm = tr[rng.permutation(len(tr))]
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            logits = net.forward(x[idx], train=True, rng=rng, record=True)
            loss, g = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"probe loss became {loss} at epoch {epoch}")
            grads, _ = net.backward(g)
            adam_step(params, grads, opt)
        acc = _probe_accuracy(net, x[va], y[va])
        if acc > best_acc:
            best_acc, best_epoch, since = acc, epoch, 0
            best = [p.copy() for p in params]
        else:
            since += 1
            if since >= cfg.patience:
                break
    for dst, src in zip(params, best):
        dst[...] = src
    report = ProbeReport(
        dims=cfg.dims, classes=[str(c) for c in classes],
        train_accuracy=_probe_accuracy(net, x[tr], y[tr]),
        val_accuracy=best_acc, test_accuracy=_probe_accuracy(net, x[te], y[te]),
        n_train=len(tr), n_val=len(va), n_test=len(te), best_epoch=best_epoch,
    )
    return clf, report


def embed_all(model: AcpModel, modality: str, inputs: np.ndarray) -> np.ndarray:
    out = [extract_embedding(model, modality, inputs[s:s + EVAL_CHUNK])
           for s in range(0, len(inputs), EVAL_CHUNK)]
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# retrieval


def retrieve(model: AcpModel, query: np.ndarray, library: Mapping[str, np.ndarray] | Sequence,
             k: int) -> list[tuple[str, float]]:
    """Top-k library segments for an image query, by descending p_true.

    Each candidate is scored with its own ``acp_forward`` call, so the scores are
    exactly the pairwise ones. Ties are ordered by segment id.
    """
    items = list(library.items()) if isinstance(library, Mapping) else list(library)
    if not items:
        raise InvalidInput("retrieval library is empty")
    if not 1 <= k <= len(items):
        raise InvalidInput(f"k={k} outside 1..{len(items)}")
    scored = [(sid, float(acp_forward(model, query, feat).p_true)) for sid, feat in items]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]
