"""
Scoring colorizations
=====================

The Inception Score is exp of the mean KL divergence between each image's
class distribution and the marginal over the set. Confident, diverse
predictions score high; identical or unsure ones score 1.
"""

import numpy as np

from metalgan.evalkit import score_from_probabilities

print("uniform predictions:", score_from_probabilities(np.full((100, 8), 1 / 8), n_splits=10)[:3])
print("confident, balanced over 8 classes:", score_from_probabilities(np.eye(8)[np.arange(80) % 8], n_splits=1))
print("confident, all one class:", score_from_probabilities(np.eye(8)[np.zeros(80, int)], n_splits=1))

rng = np.random.default_rng(0)
for temp in (0.1, 1.0, 10.0):
    logits = rng.normal(size=(200, 8)) / temp
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    s = score_from_probabilities(p, 10)
    print(f"softmax temperature {temp:5.1f}: IS {np.mean(s):.3f} +- {np.std(s):.3f}")
