"""Task construction: frozen-backbone features, MAC descriptors, PCA, K-means.

Each K-means cluster is one task for the meta-learner. A query image is
mapped to its task by nearest-centroid lookup on its projected descriptor.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .colorlab import ImageRGB
from .datapipe import substream

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-6


class BackboneError(RuntimeError):
    pass


class ClusteringError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: np.ndarray  # C x h x w

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"feature map must be C x h x w, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map has non-finite values")
        self.values = v

    @property
    def channels(self):
        return self.values.shape[0]


@dataclass
class Descriptor:
    vector: np.ndarray
    image_id: str = ""
    degenerate: bool = False


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray  # out_dim x in_dim, orthonormal rows
    explained_variance: np.ndarray

    @property
    def in_dim(self):
        return self.basis.shape[1]

    @property
    def out_dim(self):
        return self.basis.shape[0]


@dataclass
class TaskCluster:
    cluster_id: int
    member_ids: list
    centroid: np.ndarray

    def __len__(self):
        return len(self.member_ids)


@dataclass
class KMeansResult:
    clusters: list
    labels: np.ndarray
    inertia_trace: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def inertia(self):
        return self.inertia_trace[-1]


# ---------------------------------------------------------------------------
# Backbones


class RandomConvBackbone(nn.Module):
    """Small frozen conv stack with seeded random weights.

    Stands in for a pretrained network at desk scale. Spatial resolution is
    preserved up to ``n_layers - 1`` stride-2 reductions, so an 8x8 input
    yields a C x h x w map with C = ``channels``.
    """

    def __init__(self, channels=256, n_layers=3, width=32, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        layers = []
        c_in = 3
        for i in range(n_layers):
            c_out = channels if i == n_layers - 1 else width * 2**i
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = c_in * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.channels = channels
        self.config = {"name": "random_conv", "channels": channels, "n_layers": n_layers, "width": width, "seed": seed}
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.body(x)


def resnet50_backbone(weights_path=None):
    """ResNet50 truncated after its last residual stage (2048 channels).

    ``weights_path`` falls back to ``$METALGAN_CACHE/resnet50.pth``; a missing or
    unreadable file raises :class:`BackboneError`.
    """
    import torchvision

    if weights_path is None:
        cache = os.environ.get("METALGAN_CACHE")
        if cache is None:
            raise BackboneError("no ResNet50 weights given and METALGAN_CACHE is unset")
        weights_path = Path(cache) / "resnet50.pth"
    weights_path = Path(weights_path)
    if not weights_path.is_file():
        raise BackboneError(f"backbone weights not found: {weights_path}")
    model = torchvision.models.resnet50(weights=None)
    try:
        model.load_state_dict(torch.load(weights_path, map_location="cpu"))
    except Exception as exc:  # corrupt pickle, wrong keys, ...
        raise BackboneError(f"could not load backbone weights from {weights_path}: {exc}") from exc
    body = nn.Sequential(*list(model.children())[:-2])
    body.channels = 2048
    body.config = {"name": "resnet50", "channels": 2048, "weights": str(weights_path)}
    body.requires_grad_(False)
    return body.eval()


def build_backbone(config):
    config = dict(config)
    name = config.pop("name", "random_conv")
    if name == "random_conv":
        return RandomConvBackbone(**config)
    if name == "resnet50":
        return resnet50_backbone(config.get("weights"))
    raise BackboneError(f"unknown backbone {name!r}")


_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
_IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def extract_features(img: ImageRGB, backbone) -> FeatureMap:
    if backbone is None:
        raise BackboneError("no backbone supplied")
    x = (img.pixels / 255.0 - _IMAGENET_MEAN) / _IMAGENET_STD
    x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)[None])).float()
    with torch.no_grad():
        out = backbone(x)
    return FeatureMap(out[0].double().numpy())


# ---------------------------------------------------------------------------
# Descriptors


def _unit(vec, image_id=""):
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        return Descriptor(np.zeros_like(vec), image_id, degenerate=True)
    return Descriptor(vec / norm, image_id)


def mac_descriptor(fm: FeatureMap, image_id="") -> Descriptor:
    """Per-channel spatial max followed by L2 normalization."""
    values = fm.values if isinstance(fm, FeatureMap) else np.asarray(fm)
    raw = values.reshape(values.shape[0], -1).max(axis=1).astype(np.float64)
    return _unit(raw, image_id)


def fit_pca(descriptors, out_dim) -> PcaProjection:
    """Top-``out_dim`` principal directions of the rows of ``descriptors``.

    Rows are mean-centered; no whitening. Each basis row is sign-fixed so its
    largest-magnitude entry is positive.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ClusteringError("descriptors must be an n x d array")
    n, d = X.shape
    if out_dim > d:
        raise ClusteringError(f"out_dim {out_dim} exceeds input dimension {d}")
    if n < out_dim + 1:
        raise ClusteringError(f"need at least {out_dim + 1} samples for out_dim={out_dim}, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=True)
    basis = vt[:out_dim].copy()
    pivots = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(out_dim), pivots])
    basis *= signs[:, None]
    var = np.zeros(out_dim)
    k = min(out_dim, s.size)
    var[:k] = s[:k] ** 2 / (n - 1)
    return PcaProjection(mean, basis, var)


def project(p: PcaProjection, v, image_id="") -> Descriptor:
    """Center, project and re-normalize one raw descriptor."""
    v = v.vector if isinstance(v, Descriptor) else np.asarray(v, dtype=np.float64)
    if v.shape != (p.in_dim,):
        raise ClusteringError(f"expected a {p.in_dim}-dim descriptor, got shape {v.shape}")
    return _unit(p.basis @ (v - p.mean), image_id)


# ---------------------------------------------------------------------------
# K-means


def _sq_dists(X, C):
    # Direct differences rather than the |x|^2 - 2x.c + |c|^2 expansion: slower,
    # but exact zeros for coincident points keep k = n and tie cases clean.
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _repair_empty(X, labels, C, k):
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        own = ((X - C[labels]) ** 2).sum(axis=1)
        # only steal from clusters that keep at least one member
        own[counts[labels] <= 1] = -1.0
        far = int(np.argmax(own))
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        C[empty] = X[far]
    return labels


def kmeans(descriptors, k, seed=0, ids=None, max_iter=300, tol=0.0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding and empty-cluster repair.

    ``descriptors`` is either an n x d array or a list of :class:`Descriptor`;
    degenerate descriptors are dropped. ``inertia_trace`` records the
    within-cluster sum of squares after every assignment step.
    """
    if len(descriptors) and isinstance(descriptors[0], Descriptor):
        kept = [d for d in descriptors if not d.degenerate]
        if len(kept) < len(descriptors):
            log.warning("dropping %d degenerate descriptors before clustering", len(descriptors) - len(kept))
        ids = [d.image_id for d in kept]
        X = np.array([d.vector for d in kept], dtype=np.float64)
    else:
        X = np.asarray(descriptors, dtype=np.float64)
        ids = list(range(len(X))) if ids is None else list(ids)
    n = X.shape[0]
    if n < k:
        raise ClusteringError(f"cannot form {k} clusters from {n} descriptors")
    if k < 1:
        raise ClusteringError("k must be positive")

    rng = substream(seed, "cluster")
    C = _kmeanspp(X, k, rng)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    labels = _repair_empty(X, labels, C, k)
    trace = [float(((X - C[labels]) ** 2).sum())]
    it = 0
    for it in range(1, max_iter + 1):
        C = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        d2 = _sq_dists(X, C)
        new = np.argmin(d2, axis=1)
        # keep the current label on exact ties so the loop terminates
        same = d2[np.arange(n), labels] <= d2[np.arange(n), new]
        new = np.where(same, labels, new)
        new = _repair_empty(X, new, C, k)
        trace.append(float(((X - C[new]) ** 2).sum()))
        if np.array_equal(new, labels) or trace[-2] - trace[-1] <= tol * trace[-2]:
            labels = new
            break
        labels = new
    C = np.array([X[labels == j].mean(axis=0) for j in range(k)])
    clusters = [TaskCluster(j, [ids[i] for i in np.flatnonzero(labels == j)], C[j]) for j in range(k)]
    return KMeansResult(clusters, labels, trace, it)


def retrieve_cluster(q: Descriptor, clusters) -> TaskCluster:
    """Nearest centroid by Euclidean distance; ties go to the lowest cluster id."""
    if not clusters:
        raise ClusteringError("empty cluster list")
    if isinstance(q, Descriptor):
        if q.degenerate:
            raise ClusteringError(f"degenerate descriptor for {q.image_id!r} cannot be used as a query")
        v = q.vector
    else:
        v = np.asarray(q, dtype=np.float64)
    ordered = sorted(clusters, key=lambda c: c.cluster_id)
    C = np.array([c.centroid for c in ordered])
    d2 = ((C - v) ** 2).sum(axis=1)
    return ordered[int(np.argmin(d2))]


# ---------------------------------------------------------------------------
# Whole pipeline + persistence


@dataclass
class ClusterModel:
    k: int
    seed: int
    pca_dim: int
    clusters: list
    descriptors: dict  # image_id -> projected unit vector
    inertia_trace: list = field(default_factory=list)

    @property
    def assignments(self):
        return {i: c.cluster_id for c in self.clusters for i in c.member_ids}

    def cluster_of(self, image_id):
        return self.clusters[self.assignments[image_id]]

    def descriptor(self, image_id) -> Descriptor:
        v = np.asarray(self.descriptors[image_id])
        return Descriptor(v, image_id, degenerate=not np.any(v))

    def to_json(self):
        return {
            "k": self.k,
            "seed": self.seed,
            "pca_dim": self.pca_dim,
            "assignments": self.assignments,
            "centroids": [c.centroid.tolist() for c in self.clusters],
            "descriptors": {i: np.asarray(v).tolist() for i, v in self.descriptors.items()},
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, doc):
        members = {j: [] for j in range(doc["k"])}
        for image_id, cid in doc["assignments"].items():
            members[cid].append(image_id)
        clusters = [
            TaskCluster(j, sorted(members[j]), np.asarray(doc["centroids"][j], dtype=np.float64))
            for j in range(doc["k"])
        ]
        descriptors = {i: np.asarray(v, dtype=np.float64) for i, v in doc.get("descriptors", {}).items()}
        return cls(doc["k"], doc["seed"], doc["pca_dim"], clusters, descriptors)

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def build_clusters(images, backbone, k, pca_dim, seed=0) -> ClusterModel:
    """Run features -> MAC -> PCA -> K-means over an iterable of :class:`ImageRGB`."""
    raw, ids = [], []
    for img in images:
        d = mac_descriptor(extract_features(img, backbone), img.id)
        if d.degenerate:
            log.warning("image %s has an all-zero feature map; excluded", img.id)
            continue
        raw.append(d.vector)
        ids.append(img.id)
    pca = fit_pca(np.array(raw), pca_dim)
    projected = [project(pca, v, i) for v, i in zip(raw, ids)]
    for d in projected:
        if d.degenerate:
            log.warning("image %s projects onto the dataset mean; excluded", d.image_id)
    result = kmeans(projected, k, seed=seed)
    descriptors = {d.image_id: d.vector for d in projected if not d.degenerate}
    return ClusterModel(k, seed, pca_dim, result.clusters, descriptors, result.inertia_trace)
