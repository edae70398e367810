"""On-disk formats: feature/embedding stores, checkpoints, WAV, manifests, CSV.

Binary layouts are little-endian.

Feature store (``.afcf``)::

    b"AFCF" | version u32 | count u64 | dim u32
    count x ( id_len u16 | id utf-8 | dim x f32 )

Checkpoint (``.afck``)::

    b"AFCK" | version u32 | concat_order u32 (0 = image then music)
    n_stacks u32 | per stack: n_dims u32, n_dims x u32
    p_drop f32 | seed u64 | epoch u32
    parameters as f32, declaration order (image, music, fusion; W then b per layer)
    has_norm u8 | [ image mean, image std, music mean, music std as f32 ]
    has_optimizer u8 | [ lr f64 | t u64 | m blobs | v blobs ]
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from .acpnet import AcpModel, Architecture
from .dataset import CorrespondencePair, ImageRecord, SongRecord
from .dsp import AudioClip
from .errors import FormatError
from .neural import MLP, AdamState, DenseLayer

STORE_MAGIC = b"AFCF"
STORE_VERSION = 1
CKPT_MAGIC = b"AFCK"
CKPT_VERSION = 1
CONCAT_IMAGE_FIRST = 0


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


# ---------------------------------------------------------------------------
# feature / embedding stores


@dataclass
class FeatureStore:
    ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise FormatError(f"{len(self.ids)} ids but values of shape {self.values.shape}")
        self._index = {k: i for i, k in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise FormatError("duplicate record ids in store")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __getitem__(self, key: str) -> np.ndarray:
        return self.values[self._index[key]]

    def index_of(self, key: str) -> int:
        return self._index[key]


def write_store(path, store: FeatureStore) -> None:
    parts = [STORE_MAGIC, struct.pack("<IQI", STORE_VERSION, len(store), store.dim)]
    for rid, row in zip(store.ids, store.values):
        raw = rid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"record id too long: {rid[:40]}...")
        parts += [struct.pack("<H", len(raw)), raw, row.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_store(path, expected_dim: int | None = None) -> FeatureStore:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != STORE_MAGIC:
        raise FormatError(f"{path}: not a feature store (bad magic)")
    version, count, dim = r.unpack("IQI")
    if version != STORE_VERSION:
        raise FormatError(f"{path}: unsupported store version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: store dim {dim}, expected {expected_dim}")
    ids, rows = [], []
    for _ in range(count):
        (n,) = r.unpack("H")
        ids.append(r.take(n).decode("utf-8"))
        rows.append(r.floats(dim))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    values = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return FeatureStore(ids, values)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AcpModel, optimizer: AdamState | None = None) -> None:
    arch = model.architecture
    parts = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, CONCAT_IMAGE_FIRST, 3)]
    for dims in arch.stacks():
        parts.append(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
    parts.append(struct.pack("<fQI", model.image_net.p_drop, model.seed, model.epoch))
    parts += [p.astype("<f4").tobytes() for p in model.params()]
    if model.image_norm is None or model.music_norm is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts += [a.astype("<f4").tobytes() for a in (*model.image_norm, *model.music_norm)]
    if optimizer is None or not optimizer.m:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + struct.pack("<dQ", optimizer.lr, optimizer.t))
        parts += [m.astype("<f4").tobytes() for m in optimizer.m]
        parts += [v.astype("<f4").tobytes() for v in optimizer.v]
    Path(path).write_bytes(b"".join(parts))


def _read_net(r: _Reader, dims: Sequence[int], relu_last: bool, p_drop: float) -> MLP:
    layers = []
    for a, b in zip(dims, dims[1:]):
        w = r.floats(a * b).reshape(b, a)
        layers.append(DenseLayer(w, r.floats(b)))
    n = len(layers)
    return MLP(layers, [True] * (n - 1) + [relu_last], [True] * (n - 1) + [False], p_drop)


def load_checkpoint(path, expected: Architecture | None = None) -> AcpModel:
    """Load a model (and optimizer state, if saved, as ``model.optimizer``)."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, order, n_stacks = r.unpack("III")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if order != CONCAT_IMAGE_FIRST:
        raise FormatError(f"{path}: unknown concatenation order {order}")
    if n_stacks != 3:
        raise FormatError(f"{path}: expected 3 stacks, found {n_stacks}")
    stacks = []
    for _ in range(3):
        (n,) = r.unpack("I")
        stacks.append(tuple(r.unpack(f"{n}I")))
    try:
        arch = Architecture(*stacks)
    except ValueError as exc:
        raise FormatError(f"{path}: inconsistent architecture descriptor: {exc}") from None
    if expected is not None and expected != arch:
        raise FormatError(
            f"{path}: checkpoint architecture {arch.stacks()} does not match "
            f"requested {expected.stacks()}"
        )
    p_drop, seed, epoch = r.unpack("fQI")
    p_drop = float(np.float32(p_drop))
    image = _read_net(r, arch.image, True, p_drop)
    music = _read_net(r, arch.music, True, p_drop)
    fusion = _read_net(r, arch.fusion, False, p_drop)
    (has_norm,) = r.unpack("B")
    norms = {}
    if has_norm:
        norms["image_norm"] = (r.floats(arch.d_img), r.floats(arch.d_img))
        norms["music_norm"] = (r.floats(arch.music[0]), r.floats(arch.music[0]))
    model = AcpModel(image, music, fusion, seed=seed, epoch=epoch, **norms)
    (has_opt,) = r.unpack("B")
    if has_opt:
        lr, t = r.unpack("dQ")
        shapes = [p.shape for p in model.params()]
        m = [r.floats(int(np.prod(s))).reshape(s) for s in shapes]
        v = [r.floats(int(np.prod(s))).reshape(s) for s in shapes]
        model.optimizer = AdamState(lr=lr, t=t, m=m, v=v)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return model


# ---------------------------------------------------------------------------
# audio


def read_wav(path, clip_id: str | None = None) -> AudioClip:
    """Read 16-bit PCM; stereo stays (n, channels) for ``resample_mono`` to fold."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise FormatError(f"{path}: cannot read WAV: {exc}") from None
    if data.dtype != np.int16:
        raise FormatError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.shape[0] == 0:
        raise FormatError(f"{path}: no samples")
    return AudioClip(data.astype(np.float64) / 32768.0, int(rate),
                     clip_id if clip_id is not None else Path(path).stem)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(path, clip.sample_rate, pcm)


# ---------------------------------------------------------------------------
# manifests and pair lists


def read_songs(path) -> list[SongRecord]:
    base = Path(path).parent
    out = []
    for entry in json.loads(Path(path).read_text()):
        wav = entry.get("wav_path")
        if wav is not None and not os.path.isabs(wav):
            wav = str(base / wav)
        out.append(SongRecord(str(entry["id"]), list(entry.get("tags", [])),
                              float(entry.get("duration_s", 0.0)), wav))
    return out


def read_images(path) -> list[ImageRecord]:
    return [ImageRecord(str(e["id"]), str(e["original_label"]), int(e["embedding_index"]))
            for e in json.loads(Path(path).read_text())]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_blocklist(path) -> set[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return {ln.strip().lower() for ln in lines if ln.strip() and not ln.startswith("#")}


def write_pairs(path, pairs: Iterable[CorrespondencePair]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "segment_id", "label"])
        for p in pairs:
            w.writerow([p.image_id, p.segment_id, int(p.label)])


def read_pairs(path) -> list[CorrespondencePair]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [CorrespondencePair(r["image_id"], r["segment_id"],
                                   r["label"].strip().lower() in ("1", "true"))
                for r in rows]
    except KeyError as exc:
        raise FormatError(f"{path}: missing column {exc}") from None


def write_labels(path, rows: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        w.writerows(rows)


def read_labels(path) -> list[tuple[str, str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(r["id"], r["label"]) for r in rows]
    except KeyError as exc:
        raise FormatError(f"{path}: missing column {exc}") from None
