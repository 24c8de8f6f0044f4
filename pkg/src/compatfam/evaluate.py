"""Metrics and compatible-item retrieval."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .compat import pcd


def auc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Rank-sum form, O(n log n). Labels are +1/-1 (or truthy/falsy).
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # average 1-based rank over each run of tied scores
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = (lo + 1 + hi) / 2.0
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    sp, sn = scores[pos], scores[~pos]
    wins = (sp[:, None] > sn[None, :]).sum() + 0.5 * (sp[:, None] == sn[None, :]).sum()
    return float(wins / (len(sp) * len(sn)))


def error_rate(probabilities, labels, threshold=0.5):
    probabilities = np.asarray(probabilities, dtype=np.float64)
    predicted = probabilities >= threshold
    return float(np.mean(predicted != (np.asarray(labels) > 0)))


@dataclass
class RankedList:
    query_id: int
    ids: np.ndarray
    scores: np.ndarray  # negative distance, non-increasing

    def __len__(self):
        return len(self.ids)


def _rank(ids, dist, top_n):
    order = np.lexsort((ids, dist))[:top_n]
    return ids[order], -dist[order]


class CandidateIndex:
    """E_0 vectors of all candidates; exact linear-scan nearest neighbours."""

    def __init__(self, ids, e0):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.e0 = np.asarray(e0, dtype=np.float64)
        if len(self.ids) == 0:
            raise ValueError("empty candidate index")

    @classmethod
    def build(cls, model, items):
        e0, _ = model.encode(items.images)
        return cls(items.ids, e0)

    def __len__(self):
        return len(self.ids)

    def search(self, vector, top_n):
        """(ids, squared distances) of the top_n nearest E_0 vectors."""
        dist = np.sum((self.e0 - vector) ** 2, axis=1)
        top_n = min(top_n, len(dist))
        if top_n < len(dist):
            # keep every candidate tied with the cut-off so the id tie-break stays exact
            cut = np.partition(dist, top_n - 1)[top_n - 1]
            keep = np.flatnonzero(dist <= cut)
        else:
            keep = np.arange(len(dist))
        order = np.lexsort((self.ids[keep], dist[keep]))[:top_n]
        return self.ids[keep][order], dist[keep][order]


def recommend_exact(family, index, top_n, query_id=-1):
    """Rank every candidate by the full projected compatibility distance."""
    protos = np.broadcast_to(family.prototypes, (len(index),) + family.prototypes.shape)
    d, _, _ = pcd(protos, index.e0)
    ids, scores = _rank(index.ids, d, top_n)
    return RankedList(query_id, ids, scores)


def recommend_approx(family, index, top_n, query_id=-1, executor=None):
    """K nearest-neighbour searches, one per prototype, merged by min_k d_k."""
    protos = family.prototypes
    if executor is None:
        results = [index.search(p, top_n) for p in protos]
    else:
        results = list(executor.map(lambda p: index.search(p, top_n), protos))
    best = {}
    for ids, dist in results:
        for i, dv in zip(ids.tolist(), dist.tolist()):
            if i not in best or dv < best[i]:
                best[i] = dv
    ids = np.fromiter(best.keys(), dtype=np.int64, count=len(best))
    dist = np.fromiter(best.values(), dtype=np.float64, count=len(best))
    ids, scores = _rank(ids, dist, top_n)
    return RankedList(query_id, ids, scores)


def recommend_l2(e0_query, index, top_n, query_id=-1):
    ids, dist = index.search(e0_query, top_n)
    return RankedList(query_id, ids, -dist)


def min_prototype_distance(prototypes, e0_y):
    """min_k d_k for aligned (B, K, N) prototypes and (B, N) embeddings."""
    diff = np.asarray(prototypes) - np.asarray(e0_y)[:, None, :]
    return np.min(np.sum(diff * diff, axis=-1), axis=1)


def symmetric_auc_bound(num_classes, shifts):
    """Best class-level AUC any symmetric scorer can reach on the modular relation.

    Enumerates the off-diagonal C x C table. A symmetric scorer gives (a, b)
    and (b, a) one shared score, so every unordered class pair is a block
    holding p positives and n negatives. Sorting blocks by p / (p + n) is
    optimal (blocks with equal ratio contribute the same whatever their
    order), so the bound is the AUC of that ratio scorer.
    """
    if num_classes > 12:
        raise ValueError("exhaustive bound limited to C <= 12")
    shifts = {int(s) % num_classes for s in shifts}
    scores, labels = [], []
    for a in range(num_classes):
        for b in range(num_classes):
            if a == b:
                continue
            forward = (b - a) % num_classes in shifts
            backward = (a - b) % num_classes in shifts
            scores.append((forward + backward) / 2.0)
            labels.append(1 if forward else -1)
    if len(set(labels)) < 2:
        raise ValueError(f"shifts {sorted(shifts)} mod {num_classes} leave no incompatible "
                         "(or no compatible) class pair; the bound is undefined")
    return auc(scores, labels)


def write_rankings_csv(rankings, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_id", "rank", "candidate_id", "score"])
        for r in rankings:
            for rank, (cid, score) in enumerate(zip(r.ids.tolist(), r.scores.tolist()), start=1):
                w.writerow([r.query_id, rank, cid, repr(float(score))])


def read_rankings_csv(path):
    with open(path, newline="") as fh:
        return [(int(r["query_id"]), int(r["rank"]), int(r["candidate_id"]), float(r["score"]))
                for r in csv.DictReader(fh)]


def write_metrics_csv(rows, path):
    """``rows`` is a list of dicts sharing the same keys."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


def read_metrics_csv(path):
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                try:
                    row[k] = int(v)
                except ValueError:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            out.append(row)
    return out


def parallel_executor(workers):
    return ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else None
