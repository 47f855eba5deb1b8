"""
MetalGAN against the plain cGAN
===============================

Trains both modes on the toy corpus under the same budget and compares the
toy-classifier Inception Score and the held-out L1 error. The default of 2
epochs takes a couple of minutes; pass ``20`` for the full desk run
(about 15 minutes on one core).

    python demos/05_train_and_compare.py [epochs]
"""

import sys
import tempfile
from pathlib import Path

import torch

from metalgan.datapipe import ColorDataset, ingest, split
from metalgan.evalkit import ToyClassifier, colorize_ids, evaluate_generator, sample_grid
from metalgan.metatrain import TrainConfig, train_cgan, train_metalgan
from metalgan.taskforge import RandomConvBackbone, build_clusters
from metalgan.toydata import load_labels, make_toy_corpus

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2
work = Path(tempfile.mkdtemp())

make_toy_corpus(work / "toy", n_images=500, size=32, seed=0)
labels = load_labels(work / "toy")
index = split(ingest(work / "toy"), 0.2, seed=0)
dataset = ColorDataset(index, 32)
train_imgs = [dataset.rgb(i) for i in index.train_ids]

# The scorer sees only chroma statistics, so it rewards plausible colors.
clf = ToyClassifier.fit(train_imgs, [labels[i] for i in index.train_ids], C=100.0)
truth = [dataset.rgb(i) for i in index.test_ids]
print(f"ground-truth test images score {clf.predict_proba(truth).shape[1]}-class IS", end=" ")
from metalgan.evalkit import inception_score  # noqa: E402
print(round(inception_score(truth, clf).mean, 3))

clusters = build_clusters(train_imgs, RandomConvBackbone(channels=256, seed=0), k=8, pca_dim=64, seed=0)


def progress(tag):
    def cb(state):
        rep, l1 = evaluate_generator(state.g, dataset, index.test_ids, clf)
        print(f"{tag} epoch {state.epoch}: IS {rep.mean:.3f}, test L1 {l1:.4f}", flush=True)
    return cb


meta = train_metalgan(dataset, clusters, TrainConfig.desk(n_epochs=epochs), out_dir=work / "metalgan",
                      on_epoch=progress("metalgan"))
base = train_cgan(dataset, TrainConfig.desk(n_epochs=epochs, mode="cgan"), out_dir=work / "cgan",
                  on_epoch=progress("cgan"))

shown = index.test_ids[:6]
for tag, res in (("metalgan", meta), ("cgan", base)):
    outs = colorize_ids(res.g, dataset, shown)
    sample_grid([o.L for o in outs], [dataset.rgb(i) for i in shown], outs, work / f"{tag}_grid.png")
print("checkpoints, loss traces and sample grids are in", work)
