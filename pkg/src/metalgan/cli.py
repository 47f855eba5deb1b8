"""Command line entry point: ``metalgan <command> ...``.

Every command that draws random numbers takes ``--seed``; each consumer
(split, cluster, train) derives its own named substream from it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .colorlab import compose_output, load_rgb, normalize, rgb_to_lab, save_png, to_planes
from .datapipe import ColorDataset, DatasetIndex, ingest, split
from .evalkit import ToyClassifier, colorize_ids, colorize_planes, evaluate_generator, sample_grid, to_rgb
from .metatrain import TrainConfig, load_networks, train
from .taskforge import ClusterModel, build_backbone, build_clusters
from .toydata import load_labels, make_toy_corpus

log = logging.getLogger("metalgan")

INDEX_NAME = "index.json"


def _open_index(data, seed, test_fraction):
    """The saved index in ``data`` if there is one, else a fresh ingest and split."""
    path = Path(data) / INDEX_NAME
    if path.exists():
        return DatasetIndex.load(path)
    return split(ingest(data), test_fraction, seed)


def cmd_toydata(args):
    labels = make_toy_corpus(args.out, args.n, args.size, args.seed)
    print(f"wrote {len(labels)} images to {args.out}")


def cmd_ingest(args):
    index = split(ingest(args.data), args.test_fraction, args.seed)
    out = Path(args.out) if args.out else Path(args.data) / INDEX_NAME
    index.save(out)
    print(f"{len(index)} images ({len(index.train_ids)} train, {len(index.test_ids)} test, "
          f"{index.skipped} skipped) -> {out}")


def cmd_cluster(args):
    index = _open_index(args.data, args.seed, args.test_fraction)
    dataset = ColorDataset(index, args.image_size)
    backbone_cfg = {"name": args.backbone}
    if args.backbone == "random_conv":
        backbone_cfg.update(channels=args.channels, seed=args.seed)
    elif args.weights:
        backbone_cfg["weights"] = args.weights
    images = [dataset.rgb(i) for i in index.train_ids]
    model = build_clusters(images, build_backbone(backbone_cfg), args.k, args.pca_dim, args.seed)
    model.save(args.out)
    sizes = sorted((len(c) for c in model.clusters), reverse=True)
    print(f"{args.k} clusters over {len(images)} images, sizes {sizes} -> {args.out}")


def cmd_train(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig.desk()
    overrides = {"mode": args.mode}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["n_epochs"] = args.epochs
    cfg = TrainConfig.from_json({**cfg.to_json(), **overrides})
    index = _open_index(args.data, cfg.seed, cfg.test_fraction)
    dataset = ColorDataset(index, cfg.image_size, np.float32 if cfg.dtype == "float32" else np.float64)
    clusters = None
    if cfg.mode == "metalgan":
        if not args.clusters:
            raise SystemExit("--clusters is required in metalgan mode")
        clusters = ClusterModel.load(args.clusters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    def report(state):
        print(f"epoch {state.epoch}/{cfg.n_epochs} done", flush=True)

    result = train(dataset, cfg, clusters, out, args.resume, on_epoch=report)
    print(f"last checkpoint: {result.checkpoints[-1] if result.checkpoints else 'none'}")


def cmd_fit_classifier(args):
    index = _open_index(args.data, args.seed, args.test_fraction)
    labels = load_labels(args.labels) if Path(args.labels).is_dir() else {
        k: v for k, v in json.loads(Path(args.labels).read_text()).items()}
    dataset = ColorDataset(index, args.image_size)
    ids = [i for i in index.train_ids if i in labels]
    clf = ToyClassifier.fit([dataset.rgb(i) for i in ids], [labels[i] for i in ids], C=args.C)
    clf.save(args.out)
    acc = np.mean(clf.predict([dataset.rgb(i) for i in index.test_ids]) == np.array([labels[i] for i in index.test_ids]))
    print(f"fit on {len(ids)} images, held-out accuracy {acc:.3f} -> {args.out}")


def cmd_evaluate(args):
    g, _, cfg = load_networks(args.checkpoint)
    index = _open_index(args.data, cfg.seed, cfg.test_fraction)
    dataset = ColorDataset(index, cfg.image_size, np.float32 if cfg.dtype == "float32" else np.float64)
    classifier = ToyClassifier.load(args.classifier)
    ids = index.test_ids
    report, l1 = evaluate_generator(g, dataset, ids, classifier, args.splits)
    report.save(args.out, l1_error=l1, checkpoint=str(args.checkpoint))
    print(f"IS {report.mean:.4f} +- {report.std:.4f} over {report.n_images} images, L1 {l1:.4f} -> {args.out}")
    if args.grid:
        shown = ids[: args.grid_rows]
        outputs = colorize_ids(g, dataset, shown)
        sample_grid([o.L for o in outputs], [dataset.rgb(i) for i in shown], outputs, args.grid)


def cmd_colorize(args):
    g, _, cfg = load_networks(args.checkpoint)
    img = load_rgb(args.input, args.size)
    lab = normalize(rgb_to_lab(img))
    L, _ = to_planes(lab)
    side = 2**cfg.g_depth
    if L.shape[1] % side or L.shape[2] % side:
        raise SystemExit(f"image is {L.shape[2]}x{L.shape[1]}; sides must be multiples of {side} (use --size)")
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    ab = colorize_planes(g, L.astype(dtype))
    out = to_rgb(compose_output(L.astype(np.float64), ab, id=img.id))
    save_png(out, args.out)
    print(f"wrote {args.out}")


def build_parser():
    p = argparse.ArgumentParser(prog="metalgan", description="Cluster-based meta-learning for image colorization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="image directory (uses its index.json when present)")
        sp.add_argument("--test-fraction", type=float, default=0.2)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("toydata", help="write the procedural toy corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_toydata)

    sp = sub.add_parser("ingest", help="index a directory of images and split it")
    data_args(sp)
    sp.add_argument("--out", help=f"index path (default <data>/{INDEX_NAME})")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("cluster", help="group training images into tasks")
    data_args(sp)
    sp.add_argument("--out", required=True, help="cluster JSON to write")
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--pca-dim", type=int, default=64)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--backbone", choices=["random_conv", "resnet50"], default="random_conv")
    sp.add_argument("--channels", type=int, default=256, help="random_conv output channels")
    sp.add_argument("--weights", help="resnet50 weights file")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("train", help="train a generator")
    sp.add_argument("--mode", choices=["metalgan", "cgan"], default="metalgan")
    sp.add_argument("--config", help="TrainConfig JSON (default: the desk preset)")
    sp.add_argument("--clusters", help="cluster JSON from `cluster`")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--seed", type=int, help="overrides the config seed")
    sp.add_argument("--epochs", type=int, help="overrides n_epochs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fit-classifier", help="fit the chroma classifier used for scoring")
    data_args(sp)
    sp.add_argument("--labels", required=True, help="labels.json or a directory containing it")
    sp.add_argument("--out", required=True)
    sp.add_argument("--C", type=float, default=100.0)
    sp.add_argument("--image-size", type=int, default=32)
    sp.set_defaults(func=cmd_fit_classifier)

    sp = sub.add_parser("evaluate", help="Inception Score and L1 error on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--splits", type=int, default=10)
    sp.add_argument("--out", default="report.json")
    sp.add_argument("--grid", help="also write a sample grid PNG here")
    sp.add_argument("--grid-rows", type=int, default=8)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("colorize", help="colorize one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, help="resize to size x size first")
    sp.set_defaults(func=cmd_colorize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
