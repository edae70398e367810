"""Class-conditional synthetic corpus for end-to-end checks.

Songs are sine/noise mixtures whose pitch classes, register and pulse rate
depend on the emotion class; images are Gaussian clusters around one centre per
class. Everything is drawn from a single seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import IMAGE_REGROUPING, EmotionClass
from .dsp import SAMPLE_RATE, AudioClip
from .fileio import FeatureStore, write_json, write_store, write_wav

# (pitch classes, octave of the root, pulse rate in Hz, loudness)
VOICES = {
    EmotionClass.POSITIVE: ((0, 4, 7), 5, 2.5, 0.5),
    EmotionClass.NEUTRAL: ((2, 9), 4, 0.0, 0.25),
    EmotionClass.NEGATIVE: ((10, 1, 5), 3, 0.8, 0.35),
}

TAGS = {
    EmotionClass.POSITIVE: ["happy", "so energetic", "joyous", "this will always make me happy",
                            "makes me energetic and wanna dance"],
    EmotionClass.NEUTRAL: ["calmness", "cool and relaxing music", "soothing for the ear to hear",
                           "relax"],
    EmotionClass.NEGATIVE: ["sad", "makes me sad", "for the painfully alone"],
}
FILLER_TAGS = ["rock", "80s", "female vocalists", "favorites", "chillout"]


@dataclass
class SyntheticSpec:
    n_songs: int = 60
    n_images: int = 600
    priors: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)  # positive, neutral, negative
    min_segments: int = 1
    max_segments: int = 3
    d_img: int = 2048
    center_scale: float = 1.0
    spread: float = 0.5
    noise_level: float = 0.02
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    classes: tuple = field(default=(EmotionClass.POSITIVE, EmotionClass.NEUTRAL,
                                    EmotionClass.NEGATIVE), repr=False)

    def __post_init__(self):
        p = np.asarray(self.priors, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or p.sum() <= 0:
            raise ValueError(f"priors must be 3 non-negative weights, got {self.priors}")
        self.priors = tuple(float(x) for x in p / p.sum())


def midi_hz(pitch_class: int, octave: int) -> float:
    return 440.0 * 2.0 ** ((pitch_class + 12 * (octave + 1) - 69) / 12.0)


def render_song(cls: EmotionClass, duration: float, rng: np.random.Generator,
                sample_rate: int = SAMPLE_RATE, noise_level: float = 0.02) -> np.ndarray:
    pcs, octave, pulse, loud = VOICES[cls]
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    detune = 2.0 ** (rng.uniform(-0.15, 0.15) / 12.0)
    y = np.zeros_like(t)
    for pc in pcs:
        f0 = midi_hz(pc, octave) * detune
        for harmonic, weight in ((1, 1.0), (2, 0.4), (3, 0.15)):
            y += weight * np.sin(2 * np.pi * f0 * harmonic * t + rng.uniform(0, 2 * np.pi))
    y /= np.max(np.abs(y)) + 1e-12
    if pulse:
        rate = pulse * rng.uniform(0.9, 1.1)
        y *= 0.55 + 0.45 * np.cos(2 * np.pi * rate * t) ** 2
    y *= loud * rng.uniform(0.85, 1.15)
    y += noise_level * rng.standard_normal(t.shape)
    return np.clip(y, -1.0, 1.0)


def _labels_of(cls: EmotionClass) -> list[str]:
    return sorted(k for k, v in IMAGE_REGROUPING.items() if v == cls)


def generate(spec: SyntheticSpec, out_dir) -> dict:
    """Write songs.json, images.json, embeddings.afcf and wav/*.wav under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    songs = []
    song_classes = rng.choice(3, size=spec.n_songs, p=spec.priors)
    for i, c in enumerate(song_classes):
        cls = spec.classes[c]
        n_seg = int(rng.integers(spec.min_segments, spec.max_segments + 1))
        duration = 60.0 * n_seg + float(rng.integers(0, 20))
        sid = f"song{i:04d}"
        audio = render_song(cls, duration, rng, spec.sample_rate, spec.noise_level)
        write_wav(out / "wav" / f"{sid}.wav", AudioClip(audio, spec.sample_rate, sid))
        pool = TAGS[cls]
        tags = list(rng.choice(pool, size=int(rng.integers(1, 3)), replace=False))
        tags += list(rng.choice(FILLER_TAGS, size=int(rng.integers(0, 3)), replace=False))
        songs.append({"id": sid, "tags": [str(t) for t in tags], "duration_s": duration,
                      "wav_path": f"wav/{sid}.wav"})

    centers = spec.center_scale * rng.standard_normal((3, spec.d_img))
    image_classes = rng.choice(3, size=spec.n_images, p=spec.priors)
    noise = rng.standard_normal((spec.n_images, spec.d_img))
    embeddings = centers[image_classes] + spec.spread * noise
    images, ids = [], []
    for i, c in enumerate(image_classes):
        label = str(rng.choice(_labels_of(spec.classes[c])))
        iid = f"img{i:05d}"
        ids.append(iid)
        images.append({"id": iid, "original_label": label, "embedding_index": i})

    write_json(out / "songs.json", songs)
    write_json(out / "images.json", images)
    write_store(out / "embeddings.afcf", FeatureStore(ids, embeddings.astype(np.float32)))
    return {
        "songs": str(out / "songs.json"),
        "images": str(out / "images.json"),
        "embeddings": str(out / "embeddings.afcf"),
        "song_classes": [spec.classes[c].label for c in song_classes],
        "image_classes": [spec.classes[c].label for c in image_classes],
    }
