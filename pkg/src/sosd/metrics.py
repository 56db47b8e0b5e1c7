"""Descriptor matching metrics: FPR at fixed recall and rank-based mAP for
verification, matching, and retrieval tasks.

All average precisions use the interpolation-free finite-sum definition:
rank candidates by ascending distance (stable; ties broken by index) and
average precision@rank over the relevant ranks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LabeledDescriptorSet, pairwise_distances
from .errors import ValidationError


def fpr_at_recall(pos_dists, neg_dists, recall: float = 0.95) -> float:
    """False positive rate at the smallest threshold reaching the recall.

    The threshold tau is the ceil(recall * P)-th smallest positive
    distance; pairs at distance <= tau (ties included) count as predicted
    matches. Returns the fraction of negatives at distance <= tau.
    """
    pos = np.asarray(pos_dists, dtype=np.float64).ravel()
    neg = np.asarray(neg_dists, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("positive and negative distance lists must be non-empty")
    if not 0.0 < recall <= 1.0:
        raise ValidationError("recall must lie in (0, 1]")
    k = math.ceil(recall * pos.size)
    tau = np.sort(pos, kind="stable")[k - 1]
    return float(np.count_nonzero(neg <= tau)) / neg.size


def finite_sum_ap(dists, relevant) -> float:
    """AP over one ranking: mean of precision@rank at each relevant rank."""
    dists = np.asarray(dists, dtype=np.float64).ravel()
    rel = np.asarray(relevant, dtype=bool).ravel()
    if dists.shape != rel.shape or dists.size == 0:
        raise ValidationError("dists and relevant must be non-empty and equal-length")
    if not rel.any():
        raise ValidationError("at least one relevant item is required")
    order = np.argsort(dists, kind="stable")
    rel_sorted = rel[order]
    ranks = np.flatnonzero(rel_sorted) + 1
    cum_rel = np.arange(1, ranks.size + 1)
    return float(np.mean(cum_rel / ranks))


@dataclass(frozen=True)
class VerificationResult:
    ap: float
    fpr_at_95: float
    n_pos: int
    n_neg: int


def verification_task(
    a: np.ndarray, b: np.ndarray, same: np.ndarray, recall: float = 0.95
) -> VerificationResult:
    """Score descriptor pairs by distance; report finite-sum AP and FPR."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    same = np.asarray(same, dtype=bool).ravel()
    if a.ndim != 2 or a.shape != b.shape or same.shape != (a.shape[0],):
        raise ValidationError("a, b must be equal-shape (n, q); same must be (n,)")
    if same.all() or not same.any():
        raise ValidationError(
            "verification needs at least one same-class and one cross-class pair"
        )
    diff = a - b
    dists = np.sqrt(np.sum(diff * diff, axis=1))
    ap = finite_sum_ap(dists, same)
    fpr = fpr_at_recall(dists[same], dists[~same], recall=recall)
    return VerificationResult(
        ap=ap, fpr_at_95=fpr, n_pos=int(same.sum()), n_neg=int((~same).sum())
    )


def matching_task(
    reference: LabeledDescriptorSet, query: LabeledDescriptorSet
) -> float:
    """mAP where each query has exactly one correct reference instance.

    The correct match's AP is 1/rank in the ascending-distance ordering
    over all references (ties broken by reference index), making the mean
    equal to the mean reciprocal rank.
    """
    if reference.dim != query.dim:
        raise ValidationError("reference and query dimensions differ")
    ref_labels = reference.labels
    missing = sorted(set(query.labels.tolist()) - set(ref_labels.tolist()))
    if missing:
        raise ValidationError(f"query labels missing from reference: {missing}")
    label_rows: dict[int, list[int]] = {}
    for row, lab in enumerate(ref_labels.tolist()):
        label_rows.setdefault(lab, []).append(row)
    dup = sorted(
        lab
        for lab in set(query.labels.tolist())
        if len(label_rows[lab]) != 1
    )
    if dup:
        raise ValidationError(
            f"reference must hold exactly one instance per query label; "
            f"duplicated labels: {dup}"
        )
    dmat = pairwise_distances(query.vectors, reference.vectors)
    ap_sum = 0.0
    for qi in range(len(query)):
        correct = label_rows[int(query.labels[qi])][0]
        row = dmat[qi]
        d_corr = row[correct]
        rank = (
            int(np.count_nonzero(row < d_corr))
            + int(np.count_nonzero(row[:correct] == d_corr))
            + 1
        )
        ap_sum += 1.0 / rank
    return ap_sum / len(query)


def retrieval_task(queries: LabeledDescriptorSet, pool: LabeledDescriptorSet) -> float:
    """Mean finite-sum AP over the pool; all same-class items are relevant."""
    if queries.dim != pool.dim:
        raise ValidationError("query and pool dimensions differ")
    pool_labels = pool.labels
    missing = sorted(set(queries.labels.tolist()) - set(pool_labels.tolist()))
    if missing:
        raise ValidationError(f"query classes absent from pool: {missing}")
    dmat = pairwise_distances(queries.vectors, pool.vectors)
    ap_sum = 0.0
    for qi in range(len(queries)):
        relevant = pool_labels == queries.labels[qi]
        ap_sum += finite_sum_ap(dmat[qi], relevant)
    return ap_sum / len(queries)


def build_verification_pairs(
    ds: LabeledDescriptorSet, n_pos: int, n_neg: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Sample (n_pos, 2) same-class and (n_neg, 2) cross-class row-index
    pairs without replacement; deterministic under seed."""
    if n_pos < 0 or n_neg < 0:
        raise ValidationError("pair counts must be >= 0")
    labels = ds.labels
    n = len(ds)
    if np.unique(labels).size < 2:
        raise ValidationError("need at least 2 classes to build pairs")
    rng = np.random.default_rng(seed)

    intra: list[tuple[int, int]] = []
    for rows in ds.class_indices().values():
        for i in range(rows.size):
            for j in range(i + 1, rows.size):
                intra.append((int(rows[i]), int(rows[j])))
    if n_pos > len(intra):
        raise ValidationError(
            f"infeasible: requested {n_pos} positive pairs, only {len(intra)} exist"
        )
    total_pairs = n * (n - 1) // 2
    total_cross = total_pairs - len(intra)
    if n_neg > total_cross:
        raise ValidationError(
            f"infeasible: requested {n_neg} negative pairs, only {total_cross} exist"
        )

    pos = np.empty((n_pos, 2), dtype=np.int64)
    if n_pos:
        chosen = rng.choice(len(intra), size=n_pos, replace=False)
        for out_row, idx in enumerate(chosen):
            pos[out_row] = intra[int(idx)]

    neg = np.empty((n_neg, 2), dtype=np.int64)
    if n_neg:
        if n_neg * 2 >= total_cross:
            cross = [
                (i, j)
                for i in range(n)
                for j in range(i + 1, n)
                if labels[i] != labels[j]
            ]
            chosen = rng.choice(len(cross), size=n_neg, replace=False)
            for out_row, idx in enumerate(chosen):
                neg[out_row] = cross[int(idx)]
        else:
            seen: set[tuple[int, int]] = set()
            have = 0
            while have < n_neg:
                draw = rng.integers(0, n, size=(n_neg - have, 2))
                for i, j in draw:
                    i, j = (int(i), int(j)) if i < j else (int(j), int(i))
                    if i == j or labels[i] == labels[j] or (i, j) in seen:
                        continue
                    seen.add((i, j))
                    neg[have] = (i, j)
                    have += 1
                    if have == n_neg:
                        break
    return pos, neg


@dataclass(frozen=True)
class EvalReport:
    fpr_at_95: float
    verification_map: float
    matching_map: float
    retrieval_map: float
    n_positives: int
    n_negatives: int
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "fpr_at_95": self.fpr_at_95,
            "verification_map": self.verification_map,
            "matching_map": self.matching_map,
            "retrieval_map": self.retrieval_map,
            "counts": {
                "positives": self.n_positives,
                "negatives": self.n_negatives,
                "queries": self.n_queries,
            },
        }

    def csv_row(self) -> dict:
        return {
            "fpr_at_95": self.fpr_at_95,
            "verification_map": self.verification_map,
            "matching_map": self.matching_map,
            "retrieval_map": self.retrieval_map,
            "positives": self.n_positives,
            "negatives": self.n_negatives,
            "queries": self.n_queries,
        }


def _matching_split(ds: LabeledDescriptorSet):
    """Reference = first instance per class, queries = second instances.

    Canonical order: ascending class id, rows in ascending index. Classes
    with < 2 instances contribute a reference but no query.
    """
    ref_rows: list[int] = []
    query_rows: list[int] = []
    for rows in ds.class_indices().values():
        ref_rows.append(int(rows[0]))
        if rows.size > 1:
            query_rows.append(int(rows[1]))
    return np.array(ref_rows, dtype=np.int64), np.array(query_rows, dtype=np.int64)


def evaluate_descriptor_set(
    ds: LabeledDescriptorSet,
    n_pos: int = 1000,
    n_neg: int = 1000,
    seed: int = 0,
    recall: float = 0.95,
) -> EvalReport:
    """Full report over one labeled set.

    Verification uses sampled pairs; matching ranks one query per class
    against one reference per class; retrieval ranks each query against
    every other row in the set.
    """
    pos, neg = build_verification_pairs(ds, n_pos, n_neg, seed)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("evaluation needs n_pos >= 1 and n_neg >= 1")
    a_rows = np.concatenate([pos[:, 0], neg[:, 0]])
    b_rows = np.concatenate([pos[:, 1], neg[:, 1]])
    same = np.concatenate([np.ones(n_pos, dtype=bool), np.zeros(n_neg, dtype=bool)])
    ver = verification_task(
        ds.vectors[a_rows], ds.vectors[b_rows], same, recall=recall
    )

    ref_rows, query_rows = _matching_split(ds)
    if query_rows.size == 0:
        raise ValidationError("no class has >= 2 instances; matching undefined")
    reference = LabeledDescriptorSet(
        vectors=ds.vectors[ref_rows], labels=ds.labels[ref_rows]
    )
    queries = LabeledDescriptorSet(
        vectors=ds.vectors[query_rows], labels=ds.labels[query_rows]
    )
    matching_map = matching_task(reference, queries)

    keep = np.ones(len(ds), dtype=bool)
    keep[query_rows] = False
    pool = LabeledDescriptorSet(vectors=ds.vectors[keep], labels=ds.labels[keep])
    retrieval_map = retrieval_task(queries, pool)

    return EvalReport(
        fpr_at_95=ver.fpr_at_95,
        verification_map=ver.ap,
        matching_map=matching_map,
        retrieval_map=retrieval_map,
        n_positives=n_pos,
        n_negatives=n_neg,
        n_queries=int(query_rows.size),
    )
