"""Independent reference computations the tests compare the package against.

None of these import the code under test except for plain data types, so a
bug in the package cannot hide behind a matching bug here.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
from scipy import stats

FAKE, REAL = 0, 1


def brute_force_metrics(pred: list[int], true: list[int]) -> dict:
    """Per-class precision/recall/F1 by counting list positions, then the
    three averaging modes. Zero denominators give 0.0."""
    n = len(pred)
    out = {"accuracy": sum(1 for p, t in zip(pred, true) if p == t) / n, "per_class": {}}
    for c in (FAKE, REAL):
        predicted_c = [i for i in range(n) if pred[i] == c]
        actual_c = [i for i in range(n) if true[i] == c]
        hits = [i for i in predicted_c if true[i] == c]
        p = len(hits) / len(predicted_c) if predicted_c else 0.0
        r = len(hits) / len(actual_c) if actual_c else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out["per_class"][c] = (p, r, f, len(actual_c))
    pc = out["per_class"]
    out["MACRO"] = tuple((pc[FAKE][k] + pc[REAL][k]) / 2 for k in range(3))
    acc = out["accuracy"]
    out["MICRO"] = (acc, acc, 2 * acc * acc / (acc + acc) if acc else 0.0)
    out["PER_CLASS"] = pc[FAKE][:3]
    out["predicted_counts"] = (pred.count(FAKE), pred.count(REAL))
    out["ground_truth_counts"] = (true.count(FAKE), true.count(REAL))
    return out


def vote_oracle(labels: tuple[int, ...]) -> int:
    """Mode of an odd-length label tuple."""
    (label, _), = Counter(labels).most_common(1)
    return label


def all_vote_patterns(m: int = 3):
    return list(itertools.product((FAKE, REAL), repeat=m))


def central_difference(f, x: np.ndarray, idx: tuple, eps: float = 1e-6) -> float:
    """d f / d x[idx] by a symmetric difference; ``x`` is restored afterwards."""
    old = x[idx]
    x[idx] = old + eps
    up = f()
    x[idx] = old - eps
    down = f()
    x[idx] = old
    return (up - down) / (2 * eps)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def binomial_band(n: int, p: float = 0.5, level: float = 0.95) -> tuple[float, float]:
    """Central interval of accuracies a chance classifier reaches with
    probability ``level`` on ``n`` posts."""
    lo, hi = stats.binom.interval(level, n, p)
    return lo / n, hi / n


def expected_planted_cosine(signal_strength: float) -> float:
    """Two unit vectors ``s*c + sqrt(1-s^2)*n_k`` with independent noise
    directions have cosine ``s^2`` up to the noise cross terms, which vanish
    in expectation."""
    return signal_strength**2


def manual_event_rewrite(text: str, old_surfaces: list[str], new_surface: str) -> str:
    """Case-insensitive whole-word substitution done by scanning words."""
    words = text.split(" ")
    lowered = {s.lower() for s in old_surfaces}
    return " ".join(new_surface if w.lower() in lowered else w for w in words)


def fsum_mean(xs) -> float:
    return math.fsum(xs) / len(xs)
