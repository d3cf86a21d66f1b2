"""Independent reference implementations used only by the test suite.

Everything here is written naively (explicit loops, textbook formulas) and on
purpose shares no code with the package under test.  Expected values in the
tests are frozen from these oracles, never from the implementation.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# Direct O(W^2) discrete Fourier transform


def dft_direct(x):
    """Definition-level DFT with the e^{-i 2 pi j h / W} kernel, all W bins."""
    x = np.asarray(x, dtype=float)
    w = x.size
    j = np.arange(w)
    h = np.arange(w)
    kernel = np.exp(-2j * math.pi * np.outer(h, j) / w)
    return kernel @ x


# ---------------------------------------------------------------------------
# Clustering: naive validity indices and exhaustive k-means optimum


def naive_silhouette(points, labels):
    points = np.asarray(points, dtype=float)
    labels = list(labels)
    n = len(labels)
    clusters = sorted(set(labels))
    if len(clusters) < 2:
        raise ValueError("need at least two clusters")

    def dist(i, j):
        return math.sqrt(float(np.sum((points[i] - points[j]) ** 2)))

    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(dist(i, j) for j in own) / len(own)
        b = math.inf
        for c in clusters:
            if c == labels[i]:
                continue
            members = [j for j in range(n) if labels[j] == c]
            b = min(b, sum(dist(i, j) for j in members) / len(members))
        denom = max(a, b)
        scores.append(0.0 if denom == 0.0 else (b - a) / denom)
    return sum(scores) / n


def naive_calinski_harabasz(points, labels):
    points = np.asarray(points, dtype=float)
    labels = list(labels)
    n = len(labels)
    clusters = sorted(set(labels))
    k = len(clusters)
    if k < 2 or k >= n:
        raise ValueError("need 2 <= k < n")
    overall = points.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in clusters:
        members = points[[j for j in range(n) if labels[j] == c]]
        centroid = members.mean(axis=0)
        between += len(members) * float(np.sum((centroid - overall) ** 2))
        within += float(np.sum((members - centroid) ** 2))
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def naive_davies_bouldin(points, labels):
    points = np.asarray(points, dtype=float)
    labels = list(labels)
    n = len(labels)
    clusters = sorted(set(labels))
    k = len(clusters)
    if k < 2:
        raise ValueError("need at least two clusters")
    centroids = []
    sigmas = []
    for c in clusters:
        members = points[[j for j in range(n) if labels[j] == c]]
        centroid = members.mean(axis=0)
        centroids.append(centroid)
        sigmas.append(
            sum(math.sqrt(float(np.sum((m - centroid) ** 2))) for m in members)
            / len(members)
        )
    worst = []
    for i in range(k):
        r = 0.0
        for j in range(k):
            if i == j:
                continue
            d = math.sqrt(float(np.sum((centroids[i] - centroids[j]) ** 2)))
            r = max(r, math.inf if d == 0.0 else (sigmas[i] + sigmas[j]) / d)
        worst.append(r)
    return sum(worst) / k


def best_partition_inertia(points, k):
    """Global k-means optimum by exhausting every surjective labelling."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    best = math.inf
    for labelling in itertools.product(range(k), repeat=n):
        if len(set(labelling)) != k:
            continue
        total = 0.0
        for c in range(k):
            members = points[[j for j in range(n) if labelling[j] == c]]
            centroid = members.mean(axis=0)
            total += float(np.sum((members - centroid) ** 2))
        best = min(best, total)
    return best


# ---------------------------------------------------------------------------
# Metrics: loop-based formulas


def naive_metrics(observed, predicted):
    observed = [float(v) for v in observed]
    predicted = [float(v) for v in predicted]
    n = len(observed)
    se = [(p - o) ** 2 for o, p in zip(observed, predicted)]
    ae = [abs(p - o) for o, p in zip(observed, predicted)]
    mse = sum(se) / n
    mae = sum(ae) / n
    mean_obs = sum(observed) / n
    ss_tot = sum((o - mean_obs) ** 2 for o in observed)
    ss_res = sum(se)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    ape = [abs(p - o) / abs(o) for o, p in zip(observed, predicted) if abs(o) > 1e-9]
    mape = 100.0 * sum(ape) / len(ape) if ape else None
    return {
        "mse": mse,
        "rmse": math.sqrt(mse),
        "mae": mae,
        "mape": mape,
        "r2": r2,
        "mape_skipped": n - len(ape),
    }


# ---------------------------------------------------------------------------
# Expression trees: a second, independently written interpreter


def eval_tree_reference(node, row):
    """Recursive evaluator structured differently from the package's one."""
    from scenario_forecast import sr_engine as se

    kind = type(node).__name__
    if kind == "Const":
        return node.value
    if kind == "Var":
        return float(row[node.ref])
    if kind == "Unary":
        inner = eval_tree_reference(node.child, row)
        table = {
            "neg": lambda v: -v,
            "abs": lambda v: abs(v),
            "sin": lambda v: float(np.sin(v)),
            "cos": lambda v: float(np.cos(v)),
        }
        return table[node.op](inner)
    lhs = eval_tree_reference(node.left, row)
    rhs = eval_tree_reference(node.right, row)
    if node.op == "+":
        return lhs + rhs
    if node.op == "-":
        return lhs - rhs
    if node.op == "*":
        return lhs * rhs
    if node.op == "/":
        return 1.0 if abs(rhs) < se.DIVISION_EPS else lhs / rhs
    raise AssertionError(f"unknown operator {node.op!r}")


def linear_fit(x, y):
    """Least-squares a*x + b via the closed-form normal equations."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(coef[0]), float(coef[1])
