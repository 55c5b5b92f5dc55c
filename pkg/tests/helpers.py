"""Shared test utilities: random metric instances and brute-force oracles.

The oracles deliberately use plain loops and explicit set scans so they
stay independent of the library's vectorized or dict-based shortcuts.
"""

import numpy as np

from sggkit.data import Edge, Node, SceneRecord
from sggkit.metrics import GroundTruthGraph


def brute_top_k(pred, k):
    best = {}
    for s, o, p, score in pred:
        if (s, o, p) not in best or score > best[(s, o, p)]:
            best[(s, o, p)] = score
    order = sorted(best.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1], kv[0][2]))
    return [trip for trip, _ in order[:k]]


def brute_recall(pred, gt, k):
    top = brute_top_k(pred, k)
    hits = 0
    for trip in gt.triplets:
        if trip in top:
            hits += 1
    return hits / len(gt.triplets)


def brute_mean_recall(preds, gts, k):
    cats = set()
    for gt in gts:
        for _, _, p in gt.triplets:
            cats.add(p)
    recalls = []
    for cat in cats:
        hits = total = 0
        for pred, gt in zip(preds, gts):
            top = brute_top_k(pred, k)
            for trip in gt.triplets:
                if trip[2] == cat:
                    total += 1
                    if trip in top:
                        hits += 1
        recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def brute_pairwise_recall(pred, gt, k):
    top = brute_top_k(pred, k)
    matched = total = 0
    for i, j in gt.bidirectional_pairs:
        total += 1
        if (i, j, gt.edges[(i, j)]) in top and (j, i, gt.edges[(j, i)]) in top:
            matched += 1
    return matched / total


def brute_symmetry_split(gt):
    asym, sym = [], []
    for i, j in gt.bidirectional_pairs:
        (sym if gt.edges[(i, j)] == gt.edges[(j, i)] else asym).append((i, j))
    return asym, sym


def make_random_instance(rng, n_predicates=6, max_triplets=16, max_pairs=6):
    """A random ground truth (with some bidirectional pairs) plus predictions.

    Predictions mix true triplets, corrupted ones, and pure noise, with
    scores drawn so ties occur. Ground truth stays within the advertised
    triplet and pair budgets.
    """
    n_nodes = int(rng.integers(3, 8))
    node_labels = {i: int(rng.integers(1, 10)) for i in range(n_nodes)}
    edges = {}
    pairs = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
    rng.shuffle(pairs)
    n_bidir = int(rng.integers(1, max_pairs + 1))
    budget = max_triplets
    for idx, (i, j) in enumerate(pairs):
        if budget <= 0:
            break
        if idx < n_bidir and budget >= 2:
            edges[(i, j)] = int(rng.integers(1, n_predicates + 1))
            edges[(j, i)] = int(rng.integers(1, n_predicates + 1))
            budget -= 2
        elif rng.random() < 0.4:
            s, o = (i, j) if rng.random() < 0.5 else (j, i)
            edges[(s, o)] = int(rng.integers(1, n_predicates + 1))
            budget -= 1
    gt = GroundTruthGraph(node_labels, edges, sorted({(min(s, o), max(s, o)) for s, o in edges if (o, s) in edges}))
    pred = []
    for (s, o), p in edges.items():
        if rng.random() < 0.7:
            pred.append((s, o, p, float(rng.integers(0, 8))))
        if rng.random() < 0.5:
            pred.append((s, o, int(rng.integers(1, n_predicates + 1)), float(rng.integers(0, 8))))
    for _ in range(int(rng.integers(0, 12))):
        s, o = rng.choice(n_nodes, size=2, replace=False)
        pred.append((int(s), int(o), int(rng.integers(1, n_predicates + 1)), float(rng.integers(0, 8))))
    rng.shuffle(pred)
    return pred, gt


def scene_from_graph(gt, scene_id="s0"):
    nodes = [Node(i, lab, (0.0, 0.0, 1.0, 1.0), i) for i, lab in sorted(gt.node_labels.items())]
    edges = [Edge(s, o, p) for (s, o), p in sorted(gt.edges.items())]
    return SceneRecord(scene_id, nodes, edges)
