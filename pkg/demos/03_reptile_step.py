"""
One meta-training step
======================

For a query image the generator is copied and trained for a few SGD steps on
images from the query's cluster. The outer generator then moves a fraction
``stepsize_ml`` of the way towards the adapted copy.
"""

import tempfile

import numpy as np

from metalgan.datapipe import ColorDataset, ingest, split
from metalgan.metatrain import TrainConfig, discriminator_pass, inner_loop, new_state, reptile_update
from metalgan.netcore import flatten_params, load_params
from metalgan.taskforge import RandomConvBackbone, build_clusters, retrieve_cluster
from metalgan.toydata import make_toy_corpus

# The update rule itself is a straight line between two parameter vectors.
theta, tilde = np.array([1.0, 2.0]), np.array([3.0, 4.0])
print("reptile step with 0.001:", reptile_update(theta, tilde, 0.001))

root = tempfile.mkdtemp()
make_toy_corpus(root, n_images=80, size=32, seed=0)
index = split(ingest(root), 0.2, seed=0)
dataset = ColorDataset(index, 32)
clusters = build_clusters([dataset.rgb(i) for i in index.train_ids], RandomConvBackbone(seed=0), k=4, pca_dim=16, seed=0)

cfg = TrainConfig.desk(k=4, n_meta_iter=20)
state = new_state(cfg)
query = index.train_ids[0]
task = retrieve_cluster(clusters.descriptor(query), clusters.clusters)
print(f"query {query} belongs to cluster {task.cluster_id} with {len(task)} images")

theta = flatten_params(state.g).astype(np.float64)
trace = []
adapted = inner_loop(task, state.g, state.d, cfg, dataset, state.rng, trace)
print("inner-loop L1 loss, first and last step:", round(trace[0][1], 4), round(trace[-1][1], 4))
print("distance travelled by the adapted copy:", np.linalg.norm(adapted - theta).round(4))

new = reptile_update(theta, adapted.astype(np.float64), cfg.stepsize_ml)
load_params(state.g, new.astype(np.float32))
print("distance travelled by the outer generator:", np.linalg.norm(new - theta).round(4))

# The discriminator then sees every image of the cluster once.
losses = discriminator_pass(task, state.d, state.g, cfg, dataset, state.rng)
print(f"discriminator pass: {len(losses)} batches, mean loss {np.mean(losses):.3f}")
