"""Inception Score with a pluggable classifier, sample grids, and test-set metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .colorlab import ImageLab, ImageRGB, compose_output, denormalize, lab_to_rgb, rgb_array_to_lab

PROB_FLOOR = 1e-12
SUM_TOL = 1e-6
GUTTER = 2


class EvalError(ValueError):
    pass


@dataclass
class ScoreReport:
    mean: float
    std: float
    n_images: int
    n_splits: int
    classifier_id: str
    split_scores: list | None = None

    def to_json(self):
        return asdict(self)

    def save(self, path, **extra):
        Path(path).write_text(json.dumps({**self.to_json(), **extra}, indent=2))


def check_probabilities(p):
    """Validate an n x C matrix of class probabilities, renormalizing rows that are off by < 1e-6."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise EvalError(f"classifier output must be n x C, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise EvalError("classifier output has negative or non-finite entries")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > SUM_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise EvalError(f"classifier rows do not sum to one (max deviation {worst:.3g})")
    return p / sums[:, None]


def score_from_probabilities(p, n_splits=10):
    """Per-split exp(mean_x KL(p(y|x) || p(y))) for an n x C probability matrix."""
    p = check_probabilities(p)
    n = p.shape[0]
    if n_splits < 1 or n < n_splits:
        raise EvalError(f"need at least n_splits={n_splits} images, got {n}")
    scores = []
    for part in np.array_split(p, n_splits):
        pc = np.maximum(part, PROB_FLOOR)
        marginal = np.maximum(part.mean(axis=0), PROB_FLOOR)
        kl = (part * (np.log(pc) - np.log(marginal))).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return scores


def inception_score(images, classifier, n_splits=10, classifier_id=None) -> ScoreReport:
    """Inception Score of ``images`` under ``classifier``.

    ``classifier`` is any callable (or object with ``predict_proba``) mapping a
    list of :class:`ImageRGB` to an n x C probability matrix.
    """
    images = list(images)
    if len(images) < n_splits:
        raise EvalError(f"need at least n_splits={n_splits} images, got {len(images)}")
    predict = getattr(classifier, "predict_proba", classifier)
    scores = score_from_probabilities(predict(images), n_splits)
    cid = classifier_id or getattr(classifier, "classifier_id", type(classifier).__name__)
    return ScoreReport(float(np.mean(scores)), float(np.std(scores)), len(images), n_splits, cid, scores)


# ---------------------------------------------------------------------------
# Frozen toy classifier


def chroma_features(images, grid=4):
    """Chroma-only features: global a/b mean and std plus a grid of a/b cell means.

    Lightness is left out on purpose: colorized outputs share the input L
    plane, so only chroma can tell a good colorization from a bad one.
    """
    feats = []
    for img in images:
        px = img.pixels if isinstance(img, ImageRGB) else np.asarray(img)
        ab = rgb_array_to_lab(px)[..., 1:] / 128.0
        h, w = ab.shape[:2]
        cells = ab[: h - h % grid, : w - w % grid].reshape(grid, h // grid, grid, w // grid, 2).mean(axis=(1, 3))
        feats.append(np.concatenate([ab.mean(axis=(0, 1)), ab.std(axis=(0, 1)), cells.ravel()]))
    return np.array(feats)


class ToyClassifier:
    """Multinomial logistic regression on :func:`chroma_features`, stored as JSON."""

    VERSION = 1

    def __init__(self, coef, intercept, classes, mean, scale, classifier_id="toy-chroma-v1"):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.intercept = np.asarray(intercept, dtype=np.float64)
        self.classes = list(classes)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.classifier_id = classifier_id

    @classmethod
    def fit(cls, images, labels, C=1.0, classifier_id="toy-chroma-v1"):
        from sklearn.linear_model import LogisticRegression

        X = chroma_features(images)
        mean, scale = X.mean(axis=0), X.std(axis=0) + 1e-8
        model = LogisticRegression(C=C, max_iter=5000)
        model.fit((X - mean) / scale, labels)
        return cls(model.coef_, model.intercept_, model.classes_.tolist(), mean, scale, classifier_id)

    def logits(self, images):
        X = (chroma_features(images) - self.mean) / self.scale
        return X @ self.coef.T + self.intercept

    def predict_proba(self, images):
        z = self.logits(images)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    __call__ = predict_proba

    def predict(self, images):
        return [self.classes[i] for i in np.argmax(self.logits(images), axis=1)]

    def to_json(self):
        return {
            "version": self.VERSION,
            "classifier_id": self.classifier_id,
            "classes": self.classes,
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != cls.VERSION:
            raise EvalError(f"unsupported classifier version {doc.get('version')}")
        return cls(doc["coef"], doc["intercept"], doc["classes"], doc["mean"], doc["scale"], doc["classifier_id"])


# ---------------------------------------------------------------------------
# Inference helpers


def colorize_planes(g, L):
    """ab planes ``(2, H, W)`` predicted for one normalized ``(1, H, W)`` L plane."""
    dtype = next(g.parameters()).dtype
    with torch.no_grad():
        ab = g(torch.from_numpy(np.ascontiguousarray(L[None])).to(dtype))
    return ab[0].double().numpy()


def colorize_ids(g, dataset, ids):
    """Normalized output :class:`ImageLab` per image id, one image per forward pass."""
    out = []
    for i in ids:
        L, _ = dataset.pair(i)
        out.append(compose_output(L.astype(np.float64), colorize_planes(g, L), id=i))
    return out


def to_rgb(img: ImageLab) -> ImageRGB:
    return lab_to_rgb(denormalize(img) if img.normalized else img)


def l1_error(g, dataset, ids):
    """Mean absolute ab error over ``ids`` in normalized units."""
    errs = []
    for i in ids:
        L, ab = dataset.pair(i)
        errs.append(np.abs(colorize_planes(g, L) - ab).mean())
    return float(np.mean(errs))


def evaluate_generator(g, dataset, ids, classifier, n_splits=10):
    """(ScoreReport, test L1 error) for a generator on the given image ids."""
    outputs = [to_rgb(x) for x in colorize_ids(g, dataset, ids)]
    return inception_score(outputs, classifier, n_splits), l1_error(g, dataset, ids)


# ---------------------------------------------------------------------------
# Sample grid


def _gray_rgb(L):
    # ImageLab inputs carry their own scale; bare arrays are normalized planes
    if isinstance(L, ImageLab):
        L = L.L if not L.normalized else (L.L + 1.0) * 50.0
    else:
        L = np.asarray(L, dtype=np.float64)
        L = (L[0] if L.ndim == 3 else L) * 50.0 + 50.0
    return lab_to_rgb(ImageLab(L, np.zeros(L.shape + (2,)))).pixels


def _as_rgb(img):
    if isinstance(img, ImageRGB):
        return img.pixels
    if isinstance(img, ImageLab):
        return to_rgb(img).pixels
    return np.asarray(img, dtype=np.uint8)


def sample_grid(inputs, targets, outputs, path=None):
    """Rows of (grayscale input, ground truth, output) triplets with 2-pixel white gutters.

    Writes a PNG when ``path`` is given; always returns the grid array.
    """
    if not (len(inputs) == len(targets) == len(outputs)):
        raise EvalError("inputs, targets and outputs must have the same length")
    if not inputs:
        raise EvalError("nothing to draw")
    tiles = [[_gray_rgb(x), _as_rgb(t), _as_rgb(o)] for x, t, o in zip(inputs, targets, outputs)]
    h, w = tiles[0][0].shape[:2]
    rows = len(tiles)
    grid = np.full((rows * h + (rows - 1) * GUTTER, 3 * w + 2 * GUTTER, 3), 255, dtype=np.uint8)
    for r, triplet in enumerate(tiles):
        for c, tile in enumerate(triplet):
            if tile.shape[:2] != (h, w):
                raise EvalError(f"tile {r},{c} is {tile.shape[:2]}, expected {(h, w)}")
            y, x = r * (h + GUTTER), c * (w + GUTTER)
            grid[y : y + h, x : x + w] = tile
    if path is not None:
        try:
            Image.fromarray(grid, mode="RGB").save(path, format="PNG")
        except OSError as exc:
            raise EvalError(f"could not write grid to {path}: {exc}") from exc
    return grid
