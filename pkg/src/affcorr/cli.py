"""Command-line entry point: ``affcorr <subcommand> ...``.

Exit status: 0 success, 1 usage/config error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset as ds
from .acpnet import AcpModel, Architecture
from .config import RunConfig, load_config
from .dsp import SAMPLE_RATE, SegmentSpec, extract_segment_features, resample_mono, split_segments
from .errors import AffcorrError, InvalidInput
from .fileio import (FeatureStore, load_checkpoint, read_blocklist, read_images, read_labels,
                     read_pairs, read_songs, read_store, read_wav, save_checkpoint, write_json,
                     write_labels, write_pairs, write_store)
from .neural import grad_check
from .synthetic import SyntheticSpec, generate
from .training import (ProbeConfig, Stores, TrainConfig, embed_all, evaluate_correspondence,
                       retrieve, train, train_probe)

log = logging.getLogger("affcorr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def thread_count() -> int:
    raw = os.environ.get("AFCORR_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"AFCORR_THREADS must be an integer, got {raw!r}") from None


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except (InvalidInput, OSError) as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# extract-features


def extract_song(path: str, song_id: str, spec: SegmentSpec) -> list[tuple[str, np.ndarray]]:
    clip = resample_mono(read_wav(path, song_id), SAMPLE_RATE)
    return [(seg.id, extract_segment_features(seg, spec).values) for seg in split_segments(clip, spec)]


def cmd_extract_features(args) -> int:
    spec = _config(args.config).segment
    jobs: list[tuple[str, str]] = []
    if args.songs:
        jobs += [(s.wav_path, s.id) for s in read_songs(args.songs) if s.wav_path]
    jobs += [(w, Path(w).stem) for w in args.wavs]
    if not jobs:
        raise UsageError("no input: give WAV paths and/or --songs")

    def work(job):
        path, sid = job
        try:
            return extract_song(path, sid, spec)
        except (AffcorrError, OSError) as exc:
            log.warning("skipping %s: %s", path, exc)
            return None

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(work, jobs))
    if all(r is None for r in results):
        log.error("no input file could be processed")
        return EXIT_DATA
    records = sorted((rec for r in results if r for rec in r), key=lambda t: t[0])
    ids = [rid for rid, _ in records]
    values = np.stack([v for _, v in records]) if records else np.zeros((0, 193))
    write_store(args.out, FeatureStore(ids, values))
    log.info("wrote %d segment records to %s", len(ids), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# build-dataset


def cmd_build_dataset(args) -> int:
    blocklist = read_blocklist(args.blocklist) if args.blocklist else set()
    songs = ds.label_songs(read_songs(args.songs), blocklist)
    images = read_images(args.images)
    segments = ds.labeled_segments(songs)
    pairs = ds.generate_pairs(images, segments, args.false_ratio, args.seed, args.true_per_segment)
    split = ds.split_dataset(pairs, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pairs(out / "pairs.csv", pairs)
    for name, part in split.partitions().items():
        write_pairs(out / f"{name}.csv", part)
    write_labels(out / "music_labels.csv", [(s.id, s.cls.label) for s in segments])
    write_labels(out / "image_labels.csv", [(i.id, i.original_label) for i in images])
    with open(out / "images.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "original_label", "class", "embedding_index"])
        for img in sorted(images, key=lambda r: r.id):
            w.writerow([img.id, img.original_label, img.cls.label, img.embedding_ref])
    meta = {
        "seed": args.seed,
        "false_ratio": args.false_ratio,
        "true_per_segment": args.true_per_segment,
        "features": os.path.abspath(args.features) if args.features else None,
        "embeddings": os.path.abspath(args.embeddings) if args.embeddings else None,
        "n_songs": len(songs),
        "n_segments": len(segments),
        "n_images": len(images),
        "n_pairs": len(pairs),
        "partitions": {k: len(v) for k, v in split.partitions().items()},
        "songs": split.songs,
    }
    write_json(out / "dataset.json", meta)
    log.info("built %d pairs -> train %d / val %d / test %d", len(pairs), len(split.train),
             len(split.val), len(split.test))
    return EXIT_OK


# ---------------------------------------------------------------------------
# store plumbing shared by train / eval / probe / retrieve


def _dataset_meta(dataset_dir) -> dict:
    path = Path(dataset_dir) / "dataset.json"
    return json.loads(path.read_text()) if path.exists() else {}


def image_lookup(embeddings: FeatureStore, dataset_dir=None) -> dict[str, np.ndarray]:
    """Image id -> embedding, through images.csv indices when the dataset has them."""
    index_file = Path(dataset_dir) / "images.csv" if dataset_dir else None
    if index_file is not None and index_file.exists():
        with open(index_file, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n = len(embeddings)
        out = {}
        for r in rows:
            k = int(r["embedding_index"])
            if not 0 <= k < n:
                raise InvalidInput(f"embedding_index {k} of {r['id']} outside store of {n}")
            out[r["id"]] = embeddings.values[k]
        return out
    return dict(zip(embeddings.ids, embeddings.values))


def load_stores(dataset_dir, features=None, embeddings=None) -> Stores:
    meta = _dataset_meta(dataset_dir) if dataset_dir else {}
    features = features or meta.get("features")
    embeddings = embeddings or meta.get("embeddings")
    if not features or not embeddings:
        raise UsageError("feature and embedding stores unknown: pass --features and --embeddings")
    music = read_store(features, expected_dim=193)
    images = read_store(embeddings)
    return Stores(image_lookup(images, dataset_dir), music)


# ---------------------------------------------------------------------------
# train / eval


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.train = TrainConfig(**{**cfg.train.__dict__, "seed": args.seed})
    split = ds.DatasetSplit(
        read_pairs(Path(args.dataset) / "train.csv"),
        read_pairs(Path(args.dataset) / "val.csv"),
        read_pairs(Path(args.dataset) / "test.csv"),
        seed=cfg.train.seed,
    )
    stores = load_stores(args.dataset, args.features, args.embeddings)
    arch = cfg.architecture.build()
    model = AcpModel.init(arch, seed=cfg.train.seed, p_drop=cfg.train.dropout_p)
    with threadpool_limits(limits=thread_count()):
        best, report = train(model, split, stores, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.afck", best)
    save_checkpoint(out / "last.afck", model, model.optimizer)
    report_dict = report.to_dict()
    report_dict.pop("wall_time_s")
    write_json(out / "losses.json", report_dict)
    write_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


def _pairs_dataset_dir(pairs_path, dataset):
    if dataset:
        return dataset
    parent = Path(pairs_path).parent
    return parent if (parent / "dataset.json").exists() else None


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    pairs = read_pairs(args.pairs)
    stores = load_stores(_pairs_dataset_dir(args.pairs, args.dataset), args.features, args.embeddings)
    result = evaluate_correspondence(model, pairs, stores)
    print(json.dumps({**result.__dict__, "n": result.n}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe


def cmd_probe(args) -> int:
    model = load_checkpoint(args.ckpt)
    labels = read_labels(args.labels)
    dataset_dir = args.dataset or (Path(args.labels).parent
                                   if (Path(args.labels).parent / "dataset.json").exists() else None)
    store = read_store(args.store)
    lookup = image_lookup(store, dataset_dir) if args.modality == "image" else \
        dict(zip(store.ids, store.values))
    missing = [i for i, _ in labels if i not in lookup]
    if missing:
        raise InvalidInput(f"{len(missing)} labelled ids missing from {args.store}, e.g. {missing[0]}")
    x = np.stack([lookup[i] for i, _ in labels])
    emb = embed_all(model, args.modality, x)
    cfg = ProbeConfig(seed=args.seed, max_epochs=args.max_epochs)
    _, report = train_probe(emb, [l for _, l in labels], cfg)
    print(json.dumps(report.__dict__, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# retrieve


def cmd_retrieve(args) -> int:
    model = load_checkpoint(args.ckpt)
    library = read_store(args.library, expected_dim=193)
    images = image_lookup(read_store(args.embeddings), args.dataset)
    if args.query not in images:
        raise InvalidInput(f"query image {args.query!r} not in {args.embeddings}")
    hits = retrieve(model, images[args.query], list(zip(library.ids, library.values)), args.k)
    for rank, (sid, score) in enumerate(hits, 1):
        print(f"{rank}\t{sid}\t{score:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check / gen-synthetic


def cmd_grad_check(args) -> int:
    cfg = _config(args.config)
    arch = cfg.architecture.build()
    model = AcpModel.init(arch, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for k in range(args.pairs):
        emb = rng.standard_normal(arch.d_img)
        feat = rng.standard_normal(193)
        label = int(rng.integers(0, 2))
        err = grad_check(model, (emb, feat), label, h=args.h,
                         max_coords=args.max_coords or None, seed=args.seed + k)
        print(f"pair {k}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"worst {worst:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_DATA


def _priors(text: str):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("priors must be three comma-separated numbers") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("priors must be three comma-separated numbers")
    return vals


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(n_songs=args.n_songs, n_images=args.n_images, priors=args.priors,
                         spread=args.spread, d_img=args.d_img, seed=args.seed,
                         min_segments=args.min_segments, max_segments=args.max_segments)
    info = generate(spec, args.out)
    log.info("synthetic corpus written to %s", args.out)
    print(json.dumps({k: info[k] for k in ("songs", "images", "embeddings")}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="affcorr", description="Affective music/image correspondence toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract-features", help="193-d features per 60 s segment of WAV files")
    s.add_argument("wavs", nargs="*", help="16-bit PCM WAV files (song id = file stem)")
    s.add_argument("--songs", help="song manifest; its wav_path entries are processed")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("build-dataset", help="label songs/images and emit pair lists")
    s.add_argument("--songs", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--blocklist")
    s.add_argument("--false-ratio", type=float, default=1.0)
    s.add_argument("--true-per-segment", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--features", help="feature store to record in dataset.json")
    s.add_argument("--embeddings", help="image embedding store to record in dataset.json")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("gen-synthetic", help="write a class-conditional synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-songs", type=int, default=60)
    s.add_argument("--n-images", type=int, default=600)
    s.add_argument("--priors", type=_priors, default=(1 / 3, 1 / 3, 1 / 3))
    s.add_argument("--spread", type=float, default=0.5)
    s.add_argument("--d-img", type=int, default=2048)
    s.add_argument("--min-segments", type=int, default=1)
    s.add_argument("--max-segments", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_synthetic)

    s = sub.add_parser("train", help="train the correspondence network")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--features")
    s.add_argument("--embeddings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="correspondence accuracy on a pair list")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--dataset")
    s.add_argument("--features")
    s.add_argument("--embeddings")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("probe", help="emotion probe on frozen subnet embeddings")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--modality", choices=("music", "image"), required=True)
    s.add_argument("--labels", required=True, help="CSV with columns id,label")
    s.add_argument("--store", required=True, help="feature store (music) or embedding store (image)")
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-epochs", type=int, default=50)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("retrieve", help="rank library segments for an image query")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--query", required=True, help="image id")
    s.add_argument("--library", required=True, help="feature store of candidate segments")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--dataset")
    s.add_argument("-k", type=int, default=10)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("grad-check", help="finite-difference check of the full network")
    s.add_argument("--pairs", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--max-coords", type=int, default=40,
                   help="coordinates probed per parameter array (0 = all)")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--config")
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"affcorr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AffcorrError, OSError) as exc:
        print(f"affcorr: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
