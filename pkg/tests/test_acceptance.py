"""Acceptance suite: one test per criterion, each at its stated tolerance.

The synthetic end-to-end run (criteria 5-8) goes through the command line
exactly as a user would: gen-synthetic -> extract-features -> build-dataset ->
train. It runs twice with the same seed for the determinism criterion.
"""

import json
import math
import os
import time
from collections import Counter

import numpy as np
import pytest

import oracles
from affcorr import cli, dsp
from affcorr.acpnet import AcpModel, acp_forward
from affcorr.dataset import (
    EmotionClass,
    classify_tag,
    regroup_image_label,
    resolve_song_label,
    song_of,
)
from affcorr.dsp import AudioClip, SegmentSpec
from affcorr.fileio import load_checkpoint, read_labels, read_pairs, read_store
from affcorr.neural import grad_check
from affcorr.training import ProbeConfig, embed_all, evaluate_correspondence, retrieve, train_probe

SR = dsp.SAMPLE_RATE
SEED = 0
POS, NEU, NEG = EmotionClass.POSITIVE, EmotionClass.NEUTRAL, EmotionClass.NEGATIVE

pytestmark = pytest.mark.slow


# ---------------------------------------------------------------------------
# 1. DSP oracle suite


def test_criterion_1_dsp_oracles(criterion):
    with criterion(1, "DSP features vs brute-force oracles, 10 clips, rel err < 1e-6, < 60 s") as notes:
        rng = np.random.default_rng(SEED)
        start = time.perf_counter()
        worst = Counter()
        for _ in range(10):
            seconds = float(rng.uniform(1, 10))
            x = oracles.random_clip(rng, seconds)
            spec = dsp.stft(AudioClip(x, SR))
            mags = oracles.dft_magnitudes(x)
            checks = {
                "mfcc": (dsp.mfcc(spec), oracles.mfcc(mags, SR)),
                "chroma": (dsp.chroma(spec), oracles.chroma(mags, SR)),
                "contrast": (dsp.spectral_contrast(spec), oracles.contrast(mags, SR)),
                "tonnetz": (dsp.tonal_centroid(spec), oracles.tonnetz(mags, SR)),
                "mel": (dsp.mel_features(spec), oracles.mel_features(mags, SR)),
            }
            for name, (got, ref) in checks.items():
                worst[name] = max(worst[name], oracles.rel_err(got, ref))
        elapsed = time.perf_counter() - start
        notes.append(", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
        notes.append(f"{elapsed:.1f} s")
        assert all(v < 1e-6 for v in worst.values()), worst
        assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. feature contract


def test_criterion_2_feature_contract(criterion):
    with criterion(2, "193 values, offsets {0,40,52,59,65}, 11 windows, silence values") as notes:
        spec = SegmentSpec()
        x = oracles.random_clip(np.random.default_rng(SEED + 1), 60)
        clip = AudioClip(x, SR)
        seg = dsp.extract_segment_features(clip, spec)
        assert seg.values.shape == (193,)
        assert dsp.OFFSETS == (0, 40, 52, 59, 65)
        bounds = dsp.window_bounds(len(x), SR, spec)
        assert len(bounds) == 11
        wins = [dsp.extract_window_features(AudioClip(x[a:b], SR)).values for a, b in bounds]
        assert np.allclose(seg.values, np.mean(wins, axis=0), rtol=1e-12, atol=1e-12)

        silent = dsp.extract_segment_features(AudioClip(np.zeros(60 * SR), SR), spec).values
        assert silent[0] == pytest.approx(math.sqrt(128) * math.log(1e-10), rel=1e-12)
        assert np.all(np.abs(silent[1:40]) < 1e-9)
        assert np.all(silent[40:65] == 0)
        assert np.allclose(silent[65:], math.log(1e-10), rtol=1e-12)
        notes.append(f"silence c0 = {silent[0]:.4f}")


# ---------------------------------------------------------------------------
# 3. gradient check on the full default network


def test_criterion_3_full_grad_check(criterion):
    with criterion(3, "full ACP-Net grad check, 5 pairs, 64-bit, < 1e-4, < 5 min") as notes:
        start = time.perf_counter()
        model = AcpModel.init(seed=SEED, dtype=np.float64)
        arch = model.architecture
        assert arch.stacks() == [(2048, 1024, 1024), (193, 256, 512, 1024, 1024), (2048, 512, 128, 32, 2)]
        rng = np.random.default_rng(SEED)
        worst = 0.0
        for k in range(5):
            emb, feat = rng.standard_normal(arch.d_img), rng.standard_normal(193)
            label = int(rng.integers(0, 2))
            worst = max(worst, grad_check(model, (emb, feat), label, max_coords=40, seed=k))
        elapsed = time.perf_counter() - start
        notes.append(f"worst {worst:.2e}, {elapsed:.0f} s, 40 coords/array")
        assert worst < 1e-4
        assert elapsed < 300


# ---------------------------------------------------------------------------
# 4. labelling rules


def test_criterion_4_labeling_rules(criterion):
    with criterion(4, "8 regroupings, 10 example tags, 'happysad', tie-break") as notes:
        table1 = {"awe": POS, "amusement": POS, "excitement": POS, "contentment": NEU,
                  "fear": NEG, "disgust": NEG, "anger": NEG, "sadness": NEG}
        for label, cls in table1.items():
            assert regroup_image_label(label) is cls
        table2 = {
            "this will always make me happy": POS, "so energetic": POS,
            "makes me energetic and wanna dance": POS, "joyous": POS,
            "soothing for the ear to hear": NEU, "cool and relaxing music": NEU, "calmness": NEU,
            "sad": NEG, "makes me sad": NEG, "for the painfully alone": NEG,
        }
        for tag, cls in table2.items():
            assert classify_tag(tag) is cls
        assert classify_tag("happysad") is None
        assert resolve_song_label({POS: 2, NEU: 2, NEG: 0}) is POS
        notes.append(f"{len(table1)} + {len(table2)} + 2 cases")


# ---------------------------------------------------------------------------
# end-to-end synthetic runs (criteria 5-8)


def _pipeline(root):
    syn, data, run = root / "syn", root / "data", root / "run"
    feats = root / "features.afcf"
    timings = {}
    steps = [
        ("gen-synthetic", ["gen-synthetic", "--out", str(syn), "--n-songs", "60", "--n-images", "600",
                           "--seed", str(SEED)]),
        ("extract-features", ["extract-features", "--songs", str(syn / "songs.json"), "--out", str(feats)]),
        ("build-dataset", ["build-dataset", "--songs", str(syn / "songs.json"), "--images",
                           str(syn / "images.json"), "--seed", str(SEED), "--features", str(feats),
                           "--embeddings", str(syn / "embeddings.afcf"), "--out", str(data)]),
        ("train", ["train", "--dataset", str(data), "--seed", str(SEED), "--out", str(run)]),
    ]
    for name, argv in steps:
        t = time.perf_counter()
        code = cli.main(argv)
        timings[name] = time.perf_counter() - t
        assert code == 0, f"{name} exited {code}"
    return dict(syn=syn, data=data, run=run, feats=feats, timings=timings)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    old = os.environ.get("AFCORR_THREADS")
    os.environ["AFCORR_THREADS"] = "1"
    try:
        first = _pipeline(tmp_path_factory.mktemp("run_a"))
        second = _pipeline(tmp_path_factory.mktemp("run_b"))
    finally:
        if old is None:
            os.environ.pop("AFCORR_THREADS", None)
        else:
            os.environ["AFCORR_THREADS"] = old
    return first, second


@pytest.fixture(scope="module")
def trained(runs):
    run = runs[0]
    from affcorr.cli import load_stores
    model = load_checkpoint(run["run"] / "model.afck")
    stores = load_stores(run["data"])
    return run, model, stores


def test_criterion_5_end_to_end_accuracy(criterion, trained):
    with criterion(5, "synthetic end-to-end held-out accuracy >= 0.95, < 10 min") as notes:
        run, model, stores = trained
        test_pairs = read_pairs(run["data"] / "test.csv")
        labels = [p.label for p in test_pairs]
        assert 0.4 <= sum(labels) / len(labels) <= 0.6  # balanced build
        report = json.loads((run["run"] / "report.json").read_text())
        acc = evaluate_correspondence(model, test_pairs, stores).accuracy
        assert acc == report["test"]["accuracy"]
        total = sum(run["timings"].values())
        notes.append(f"test accuracy {acc:.4f} on {len(test_pairs)} pairs, "
                     f"best epoch {report['best_epoch']}, {total:.0f} s")
        assert acc >= 0.95
        assert total < 600


def test_criterion_6_music_probe(criterion, trained):
    with criterion(6, "music probe 1024-512-32-3 on frozen embeddings >= 0.90 held out") as notes:
        run, model, _ = trained
        store = read_store(run["feats"], expected_dim=193)
        labels = read_labels(run["data"] / "music_labels.csv")
        x = np.stack([store[i] for i, _ in labels])
        emb = embed_all(model, "music", x)
        _, report = train_probe(emb, [l for _, l in labels], ProbeConfig(seed=SEED))
        notes.append(f"held-out accuracy {report.test_accuracy:.4f} on {report.n_test} segments")
        assert report.dims == [1024, 512, 32, 3]
        assert report.test_accuracy >= 0.90


def test_criterion_7_determinism(criterion, runs):
    with criterion(7, "rerun with same seed: identical losses, stores and checkpoints") as notes:
        a, b = runs
        la = json.loads((a["run"] / "losses.json").read_text())
        lb = json.loads((b["run"] / "losses.json").read_text())
        assert [e["train_loss"] for e in la["epochs"]] == [e["train_loss"] for e in lb["epochs"]]
        assert la == lb
        same = [
            a["feats"].read_bytes() == b["feats"].read_bytes(),
            (a["syn"] / "embeddings.afcf").read_bytes() == (b["syn"] / "embeddings.afcf").read_bytes(),
            (a["run"] / "model.afck").read_bytes() == (b["run"] / "model.afck").read_bytes(),
            (a["run"] / "last.afck").read_bytes() == (b["run"] / "last.afck").read_bytes(),
            (a["data"] / "pairs.csv").read_bytes() == (b["data"] / "pairs.csv").read_bytes(),
        ]
        notes.append(f"{len(la['epochs'])} epochs compared, {sum(same)}/{len(same)} files identical")
        assert all(same)


def test_criterion_8_retrieval(criterion, trained):
    with criterion(8, "top-5 retrieval class agreement >= 0.90; scores equal pairwise") as notes:
        run, model, stores = trained
        music_cls = dict(read_labels(run["data"] / "music_labels.csv"))
        image_cls = {}
        with open(run["data"] / "images.csv") as fh:
            next(fh)
            for line in fh:
                iid, _, cls, _ = line.strip().split(",")
                image_cls[iid] = cls
        test_pairs = read_pairs(run["data"] / "test.csv")
        queries = sorted({p.image_id for p in test_pairs})[:30]
        test_songs = {song_of(p.segment_id) for p in test_pairs}
        library = [(sid, stores.music[sid]) for sid in sorted(stores.music.ids)
                   if song_of(sid) in test_songs]
        hits = total = 0
        for q in queries:
            top = retrieve(model, stores.images[q], library, 5)
            for sid, score in top:
                assert score == acp_forward(model, stores.images[q], stores.music[sid]).p_true
                hits += music_cls[sid] == image_cls[q]
                total += 1
        frac = hits / total
        notes.append(f"{hits}/{total} = {frac:.3f} over {len(queries)} held-out queries, "
                     f"library {len(library)} held-out segments")
        assert frac >= 0.90
