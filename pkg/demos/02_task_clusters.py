"""
Grouping images into tasks
==========================

Each image gets a MAC descriptor (channel-wise max of a CNN feature map,
L2-normalized), the descriptors are reduced with PCA, and K-means splits the
training set into clusters. Each cluster is one meta-learning task.
"""

import tempfile
from collections import Counter

from metalgan.datapipe import ColorDataset, ingest, split
from metalgan.taskforge import RandomConvBackbone, build_clusters, retrieve_cluster
from metalgan.toydata import FAMILIES, load_labels, make_toy_corpus

root = tempfile.mkdtemp()
make_toy_corpus(root, n_images=200, size=32, seed=0)
labels = load_labels(root)
index = split(ingest(root), test_fraction=0.2, seed=0)
dataset = ColorDataset(index, 32)
print(len(index.train_ids), "training images,", len(index.test_ids), "held out")

# A fixed random conv stack stands in for a pretrained network; the pipeline
# is identical with resnet50_backbone() when weights are available.
backbone = RandomConvBackbone(channels=256, seed=0)
model = build_clusters([dataset.rgb(i) for i in index.train_ids], backbone, k=8, pca_dim=64, seed=0)

names = list(FAMILIES)
for c in model.clusters:
    fams = Counter(names[labels[i]] for i in c.member_ids)
    print(f"cluster {c.cluster_id}: {len(c):3d} images, mostly {fams.most_common(2)}")

print("k-means inertia per iteration:", [round(x, 2) for x in model.inertia_trace])

# A query image is routed to the cluster whose centroid is nearest.
q = index.train_ids[0]
print(q, "->", retrieve_cluster(model.descriptor(q), model.clusters).cluster_id)
