"""The correspondence network: image subnet, music subnet and fusion classifier.

Both subnets map their modality into a shared 1024-d space; the fusion stack
classifies the concatenation ``image ++ music`` into (false, true).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import FEATURE_DIM
from .errors import InvalidInput, ShapeError
from .neural import MLP, softmax, softmax_cross_entropy

EMBED_DIM = 1024
D_IMG = 2048


@dataclass(frozen=True)
class Architecture:
    image: tuple[int, ...] = (D_IMG, EMBED_DIM, EMBED_DIM)
    music: tuple[int, ...] = (FEATURE_DIM, 256, 512, EMBED_DIM, EMBED_DIM)
    fusion: tuple[int, ...] = (2 * EMBED_DIM, 512, 128, 32, 2)

    def __post_init__(self):
        for name in ("image", "music", "fusion"):
            object.__setattr__(self, name, tuple(int(d) for d in getattr(self, name)))
        self.validate()

    @classmethod
    def default(cls, d_img: int = D_IMG, embed_dim: int = EMBED_DIM,
                music_hidden=(256, 512), fusion_hidden=(512, 128, 32)) -> "Architecture":
        return cls(
            image=(d_img, embed_dim, embed_dim),
            music=(FEATURE_DIM, *music_hidden, embed_dim, embed_dim),
            fusion=(2 * embed_dim, *fusion_hidden, 2),
        )

    def validate(self):
        if self.music[0] != FEATURE_DIM:
            raise ShapeError(f"music subnet must take {FEATURE_DIM} features, got {self.music[0]}")
        if self.image[-1] != self.music[-1]:
            raise ShapeError(f"subnet outputs differ: image {self.image[-1]} vs music {self.music[-1]}")
        if self.fusion[0] != self.image[-1] + self.music[-1]:
            raise ShapeError(
                f"fusion input {self.fusion[0]} != {self.image[-1]} + {self.music[-1]}"
            )
        if self.fusion[-1] != 2:
            raise ShapeError(f"fusion must end in 2 logits, got {self.fusion[-1]}")

    @property
    def d_img(self) -> int:
        return self.image[0]

    @property
    def embed_dim(self) -> int:
        return self.image[-1]

    def stacks(self) -> list[tuple[int, ...]]:
        return [self.image, self.music, self.fusion]


@dataclass
class AcpModel:
    image_net: MLP
    music_net: MLP
    fusion_net: MLP
    seed: int = 0
    epoch: int = 0
    optimizer: object = field(default=None, repr=False)
    # fixed per-dimension (mean, std) applied to raw inputs before each subnet
    image_norm: tuple[np.ndarray, np.ndarray] | None = None
    music_norm: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        arch = Architecture(tuple(self.image_net.dims), tuple(self.music_net.dims),
                            tuple(self.fusion_net.dims))
        self.image_norm = _norm(self.image_norm, arch.d_img, self.dtype)
        self.music_norm = _norm(self.music_norm, FEATURE_DIM, self.dtype)

    @classmethod
    def init(cls, arch: Architecture | None = None, seed: int = 0, p_drop: float = 0.4,
             dtype=np.float32, init: str = "he") -> "AcpModel":
        """Fresh model: He-uniform weights, zero biases, ReLU after every subnet layer.

        Dropout follows every hidden layer except the final embedding layers
        and the logit layer.
        """
        arch = arch or Architecture()
        rng = np.random.default_rng(seed)
        kw = dict(dropout_hidden=True, p_drop=p_drop, dtype=dtype, init=init)
        return cls(
            MLP.build(arch.image, rng, relu_last=True, **kw),
            MLP.build(arch.music, rng, relu_last=True, **kw),
            MLP.build(arch.fusion, rng, relu_last=False, **kw),
            seed=seed,
        )

    @property
    def architecture(self) -> Architecture:
        return Architecture(tuple(self.image_net.dims), tuple(self.music_net.dims),
                            tuple(self.fusion_net.dims))

    @property
    def dtype(self):
        return self.image_net.dtype

    def params(self) -> list[np.ndarray]:
        return self.image_net.params() + self.music_net.params() + self.fusion_net.params()

    def astype(self, dtype) -> "AcpModel":
        def cast(norm):
            return None if norm is None else tuple(a.astype(dtype) for a in norm)
        return AcpModel(self.image_net.astype(dtype), self.music_net.astype(dtype),
                        self.fusion_net.astype(dtype), self.seed, self.epoch,
                        image_norm=cast(self.image_norm), music_norm=cast(self.music_norm))

    def fit_normalization(self, emb: np.ndarray, feat: np.ndarray) -> None:
        """Set input standardisation from sample inputs (rows = samples)."""
        self.image_norm = _norm(_moments(emb), self.architecture.d_img, self.dtype)
        self.music_norm = _norm(_moments(feat), FEATURE_DIM, self.dtype)

    def normalize(self, modality: str, x: np.ndarray) -> np.ndarray:
        norm = self.image_norm if modality == "image" else self.music_norm
        x = np.asarray(x).astype(self.dtype, copy=False)
        if norm is None:
            return x
        return (x - norm[0]) / norm[1]

    def copy(self) -> "AcpModel":
        return self.astype(self.dtype)

    def set_dropout(self, p_drop: float):
        for net in (self.image_net, self.music_net, self.fusion_net):
            net.p_drop = p_drop

    def logits(self, emb, feat, train: bool = False, rng=None, record: bool = False):
        v_img = _check(emb, self.architecture.d_img, "image embedding")
        v_mus = _check(feat, FEATURE_DIM, "music features")
        a = self.image_net.forward(self.normalize("image", v_img), train, rng, record)
        b = self.music_net.forward(self.normalize("music", v_mus), train, rng, record)
        return self.fusion_net.forward(np.concatenate([a, b], axis=-1), train, rng, record)

    def loss_and_grads(self, inputs, target, need_grads: bool = True, train: bool = False,
                       rng=None):
        """Cross-entropy of the correspondence logits; grads for params and both inputs."""
        emb, feat = inputs
        z = self.logits(emb, feat, train, rng, record=need_grads)
        loss, g = softmax_cross_entropy(z, target)
        if not need_grads:
            return loss, None, None
        fgrads, gcat = self.fusion_net.backward(g)
        d = self.image_net.dims[-1]
        igrads, gemb = self.image_net.backward(gcat[..., :d])
        mgrads, gfeat = self.music_net.backward(gcat[..., d:])
        if self.image_norm is not None:
            gemb = gemb / self.image_norm[1]
        if self.music_norm is not None:
            gfeat = gfeat / self.music_norm[1]
        return loss, igrads + mgrads + fgrads, [gemb, gfeat]


def _moments(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 1e-6, std, 1.0)


def _norm(norm, dim: int, dtype):
    if norm is None:
        return None
    mean, std = (np.asarray(a, dtype=dtype) for a in norm)
    if mean.shape != (dim,) or std.shape != (dim,):
        raise ShapeError(f"normalisation must have {dim} entries, got {mean.shape}/{std.shape}")
    if np.any(std <= 0):
        raise ShapeError("normalisation scales must be positive")
    return mean, std


def _check(x, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (1, 2) or x.shape[-1] != dim:
        raise ShapeError(f"{what} must have {dim} values, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Prediction:
    p_true: float | np.ndarray
    logits: np.ndarray

    @property
    def label(self):
        return self.p_true > 0.5


def image_forward(model: AcpModel, emb) -> np.ndarray:
    emb = _check(emb, model.architecture.d_img, "image embedding")
    return model.image_net.forward(model.normalize("image", emb))


def music_forward(model: AcpModel, feat) -> np.ndarray:
    feat = _check(feat, FEATURE_DIM, "music features")
    return model.music_net.forward(model.normalize("music", feat))


def fuse_predict(model: AcpModel, v_img, v_mus):
    d = model.architecture.embed_dim
    v_img = _check(v_img, d, "image embedding")
    v_mus = _check(v_mus, d, "music embedding")
    logits = model.fusion_net.forward(np.concatenate([v_img, v_mus], axis=-1))
    p = softmax(logits.astype(np.float64))[..., 1]
    return (float(p) if np.ndim(p) == 0 else p), logits


def acp_forward(model: AcpModel, emb, feat) -> Prediction:
    p, logits = fuse_predict(model, image_forward(model, emb), music_forward(model, feat))
    return Prediction(p, logits)


def extract_embedding(model: AcpModel, modality: str, x) -> np.ndarray:
    """The pre-fusion 1024-d representation of an image or music input."""
    x = np.asarray(x)
    expected = {"image": model.architecture.d_img, "music": FEATURE_DIM}
    if modality not in expected:
        raise InvalidInput(f"modality must be 'image' or 'music', got {modality!r}")
    if x.ndim not in (1, 2) or x.shape[-1] != expected[modality]:
        raise InvalidInput(
            f"{modality} input must have {expected[modality]} values, got shape {x.shape}"
        )
    return image_forward(model, x) if modality == "image" else music_forward(model, x)
