"""First- and second-order similarity losses with exact analytic gradients.

The first-order term is a hinge triplet loss over hardest-within-batch
negatives: for pair i the negative distance is the minimum of
d(x_i, x_j), d(x_i, y_j), d(y_i, x_j), d(y_i, y_j) over all other pairs j,
where x are anchors and y positives. The quadratic variant (qht) squares
the hinge residual, the plain variant (ht) does not.

The second-order term compares the distance profiles of the two members
of a pair against selected neighbor pairs:

    d2_i = sqrt( sum_j (d(x_i, x_j) - d(y_i, y_j))^2 )

with j ranging over a K-nearest-neighbor union (same_side mode) or over
every other pair (full_batch mode). The regularizer is the batch mean of
d2_i, and the total objective adds it to the first-order loss with equal
weight.

Gradients are the exact partial derivatives of the total with respect to
every anchor and positive coordinate, holding the discrete choices (the
negative argmin and the neighbor selection) fixed at their current values.
Wherever a distance (or d2_i) falls below distance_epsilon the gradient
contribution of that term is defined to be 0, a valid subgradient of the
square root at the origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PairBatch, pairwise_distances
from .errors import NondifferentiablePointError, ValidationError

FOS_VARIANTS = ("qht", "ht")
NEIGHBOR_MODES = ("same_side", "full_batch")

# candidate order for the negative argmin; ties break on smallest j first,
# then on this listing order
CANDIDATE_KINDS = (
    "anchor-anchor",
    "anchor-positive",
    "positive-anchor",
    "positive-positive",
)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    k: int = 8
    fos_variant: str = "qht"
    sos_neighbor_mode: str = "same_side"
    distance_epsilon: float = 1e-8

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if self.k < 1:
            raise ValidationError("neighbor count k must be >= 1")
        if self.fos_variant not in FOS_VARIANTS:
            raise ValidationError(f"fos_variant must be one of {FOS_VARIANTS}")
        if self.sos_neighbor_mode not in NEIGHBOR_MODES:
            raise ValidationError(
                f"sos_neighbor_mode must be one of {NEIGHBOR_MODES}"
            )
        if self.distance_epsilon <= 0:
            raise ValidationError("distance_epsilon must be > 0")


@dataclass(frozen=True)
class HardestNegative:
    d_neg: float
    j: int
    kind: str


@dataclass(frozen=True)
class PairRecord:
    d_pos: float
    d_neg: float
    neg_j: int
    neg_label: int
    neg_kind: str
    neighbors: tuple[int, ...]


@dataclass(frozen=True)
class LossGradReport:
    fos_loss: float
    sos_loss: float
    total_loss: float
    grad_anchors: np.ndarray
    grad_positives: np.ndarray
    per_pair: list[PairRecord] = field(default_factory=list)


@dataclass(frozen=True)
class _Frozen:
    """Discrete choices held fixed during differentiation."""

    neg_j: np.ndarray      # (N,) index of the mined pair
    neg_k: np.ndarray      # (N,) candidate kind, 0..3
    nbr: np.ndarray | None  # (N, N) neighbor mask, None when sos is skipped


def _check_k(cfg: LossConfig, n: int) -> None:
    if cfg.k > n - 1:
        raise ValidationError(f"k={cfg.k} exceeds N-1={n - 1}")


def _distance_matrices(x: np.ndarray, y: np.ndarray):
    dxx = pairwise_distances(x, x)
    dyy = pairwise_distances(y, y)
    dxy = pairwise_distances(x, y)
    return dxx, dyy, dxy


def _mine_hardest(dxx, dyy, dxy):
    """Negative argmin per pair: smallest j wins ties, then listing order."""
    n = dxx.shape[0]
    irange = np.arange(n)
    dyx = dxy.T
    m0 = np.minimum(np.minimum(dxx, dxy), np.minimum(dyx, dyy))
    m0 = m0.copy()
    np.fill_diagonal(m0, np.inf)
    neg_j = np.argmin(m0, axis=1)
    four = np.stack(
        [dxx[irange, neg_j], dxy[irange, neg_j], dyx[irange, neg_j], dyy[irange, neg_j]],
        axis=1,
    )
    neg_k = np.argmin(four, axis=1)
    d_neg = four[irange, neg_k]
    return d_neg, neg_j, neg_k


def _neighbor_mask(dxx, dyy, k: int, mode: str) -> np.ndarray:
    """Boolean (N, N) mask: entry [i, j] says pair j is selected for pair i."""
    n = dxx.shape[0]
    if mode == "full_batch":
        return ~np.eye(n, dtype=bool)
    eye = np.eye(n, dtype=bool)
    dxx_m = np.where(eye, np.inf, dxx)
    dyy_m = np.where(eye, np.inf, dyy)
    # stable sort keeps ascending j among equal distances
    anchor_nn = np.argsort(dxx_m, axis=1, kind="stable")[:, :k]
    positive_nn = np.argsort(dyy_m, axis=1, kind="stable")[:, :k]
    nbr = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    nbr[rows, anchor_nn.ravel()] = True
    nbr[rows, positive_nn.ravel()] = True
    return nbr


def _sos_values(dxx, dyy, nbr):
    delta = dxx - dyy
    sq = np.where(nbr, delta * delta, 0.0)
    d2 = np.sqrt(np.sum(sq, axis=1))
    return delta, d2


def _evaluate(x, y, cfg: LossConfig, include_sos: bool = True):
    """Loss values, gradients, and frozen choices for one batch.

    Returns (fos, sos, grad_x, grad_y, d_pos, d_neg, frozen).
    """
    n = x.shape[0]
    eps = cfg.distance_epsilon
    irange = np.arange(n)
    dxx, dyy, dxy = _distance_matrices(x, y)
    d_pos = dxy[irange, irange].copy()
    d_neg, neg_j, neg_k = _mine_hardest(dxx, dyy, dxy)

    resid = cfg.margin + d_pos - d_neg
    active = resid > 0
    hinge = np.where(active, resid, 0.0)
    if cfg.fos_variant == "qht":
        fos = float(np.sum(hinge * hinge) / n)
        coef = np.where(active, 2.0 * resid, 0.0) / n
    else:
        fos = float(np.sum(hinge) / n)
        coef = np.where(active, 1.0, 0.0) / n

    grad_x = np.zeros_like(x)
    grad_y = np.zeros_like(y)

    # positive-distance path
    ok_pos = d_pos >= eps
    unit_pos = np.where(
        ok_pos[:, None], (x - y) / np.where(d_pos > 0, d_pos, 1.0)[:, None], 0.0
    )
    cu = coef[:, None] * unit_pos
    grad_x += cu
    grad_y -= cu

    # negative-distance path: the mined distance enters with a minus sign
    first_from_y = neg_k >= 2
    second_from_y = (neg_k == 1) | (neg_k == 3)
    a_rows = np.where(first_from_y[:, None], y, x)
    b_rows = np.where(second_from_y[:, None], y[neg_j], x[neg_j])
    ok_neg = d_neg >= eps
    unit_neg = np.where(
        ok_neg[:, None],
        (a_rows - b_rows) / np.where(d_neg > 0, d_neg, 1.0)[:, None],
        0.0,
    )
    cn = coef[:, None] * unit_neg
    mask_x = ~first_from_y
    grad_x[irange[mask_x]] -= cn[mask_x]
    grad_y[irange[first_from_y]] -= cn[first_from_y]
    mask_jx = ~second_from_y
    np.add.at(grad_x, neg_j[mask_jx], cn[mask_jx])
    np.add.at(grad_y, neg_j[second_from_y], cn[second_from_y])

    sos = 0.0
    nbr = None
    if include_sos:
        nbr = _neighbor_mask(dxx, dyy, cfg.k, cfg.sos_neighbor_mode)
        delta, d2 = _sos_values(dxx, dyy, nbr)
        sos = float(np.sum(d2) / n)
        # weight of the (i, j) profile term in the gradient
        denom = np.where(d2 >= eps, d2, np.inf)
        w = np.where(nbr, delta, 0.0) / (n * denom[:, None])
        p = np.where(nbr & (dxx >= eps), w / np.where(dxx > 0, dxx, 1.0), 0.0)
        q = np.where(nbr & (dyy >= eps), w / np.where(dyy > 0, dyy, 1.0), 0.0)
        grad_x += (p.sum(axis=1) + p.sum(axis=0))[:, None] * x - (p + p.T) @ x
        grad_y -= (q.sum(axis=1) + q.sum(axis=0))[:, None] * y - (q + q.T) @ y

    frozen = _Frozen(neg_j=neg_j, neg_k=neg_k, nbr=nbr)
    return fos, sos, grad_x, grad_y, d_pos, d_neg, frozen


def hardest_negative(batch: PairBatch, i: int) -> HardestNegative:
    """Mined negative distance and its source for pair i."""
    n = batch.n_pairs
    if n < 2:
        raise ValidationError("no negatives available: batch has fewer than 2 pairs")
    if not 0 <= i < n:
        raise ValidationError(f"pair index {i} out of range for N={n}")
    dxx, dyy, dxy = _distance_matrices(batch.anchors, batch.positives)
    d_neg, neg_j, neg_k = _mine_hardest(dxx, dyy, dxy)
    return HardestNegative(
        d_neg=float(d_neg[i]), j=int(neg_j[i]), kind=CANDIDATE_KINDS[int(neg_k[i])]
    )


def fos_loss(batch: PairBatch, cfg: LossConfig) -> float:
    """First-order hinge loss over hardest-within-batch negatives."""
    fos, _, _, _, _, _, _ = _evaluate(
        batch.anchors, batch.positives, cfg, include_sos=False
    )
    return fos


def knn_select(batch: PairBatch, i: int, k: int) -> set[int]:
    """Labels of pairs whose anchor or positive neighbors pair i.

    The anchor of pair j must rank within the k nearest anchors of anchor i,
    or the positive of pair j within the k nearest positives of positive i.
    The result has between k and 2k labels.
    """
    n = batch.n_pairs
    if not 1 <= k <= n - 1:
        raise ValidationError(f"k={k} out of range [1, {n - 1}]")
    if not 0 <= i < n:
        raise ValidationError(f"pair index {i} out of range for N={n}")
    dxx = pairwise_distances(batch.anchors, batch.anchors)
    dyy = pairwise_distances(batch.positives, batch.positives)
    nbr = _neighbor_mask(dxx, dyy, k, "same_side")
    return {int(batch.labels[j]) for j in np.flatnonzero(nbr[i])}


def sos_distance(batch: PairBatch, i: int, cfg: LossConfig) -> float:
    """Second-order distance of pair i against its selected neighbors."""
    n = batch.n_pairs
    if not 0 <= i < n:
        raise ValidationError(f"pair index {i} out of range for N={n}")
    if cfg.sos_neighbor_mode == "same_side":
        _check_k(cfg, n)
    dxx = pairwise_distances(batch.anchors, batch.anchors)
    dyy = pairwise_distances(batch.positives, batch.positives)
    nbr = _neighbor_mask(dxx, dyy, cfg.k, cfg.sos_neighbor_mode)
    _, d2 = _sos_values(dxx, dyy, nbr)
    return float(d2[i])


def sosr(batch: PairBatch, cfg: LossConfig) -> float:
    """Batch-mean second-order distance."""
    n = batch.n_pairs
    if cfg.sos_neighbor_mode == "same_side":
        _check_k(cfg, n)
    dxx = pairwise_distances(batch.anchors, batch.anchors)
    dyy = pairwise_distances(batch.positives, batch.positives)
    nbr = _neighbor_mask(dxx, dyy, cfg.k, cfg.sos_neighbor_mode)
    _, d2 = _sos_values(dxx, dyy, nbr)
    return float(np.sum(d2) / n)


def total_loss(batch: PairBatch, cfg: LossConfig, include_sos: bool = True) -> LossGradReport:
    """Total objective with analytic gradients and per-pair diagnostics."""
    n = batch.n_pairs
    _check_k(cfg, n)
    fos, sos, grad_x, grad_y, d_pos, d_neg, frozen = _evaluate(
        batch.anchors, batch.positives, cfg, include_sos=include_sos
    )
    per_pair = []
    for i in range(n):
        if frozen.nbr is not None:
            neighbors = tuple(
                int(batch.labels[j]) for j in np.flatnonzero(frozen.nbr[i])
            )
        else:
            neighbors = ()
        per_pair.append(
            PairRecord(
                d_pos=float(d_pos[i]),
                d_neg=float(d_neg[i]),
                neg_j=int(frozen.neg_j[i]),
                neg_label=int(batch.labels[frozen.neg_j[i]]),
                neg_kind=CANDIDATE_KINDS[int(frozen.neg_k[i])],
                neighbors=neighbors,
            )
        )
    return LossGradReport(
        fos_loss=fos,
        sos_loss=sos,
        total_loss=fos + sos,
        grad_anchors=grad_x,
        grad_positives=grad_y,
        per_pair=per_pair,
    )


def _frozen_neighbor_pairs(nbr: np.ndarray):
    """Row-major (i, j) index lists plus per-row segment starts."""
    ii, jj = np.nonzero(nbr)
    counts = nbr.sum(axis=1)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return ii, jj, starts


def _frozen_total_stack(xs, ys, frozen: _Frozen, cfg: LossConfig, pairs):
    """Frozen-choice total loss for a (B, N, q) stack of perturbed batches."""
    n = xs.shape[1]
    d_pos = np.sqrt(np.sum((xs - ys) ** 2, axis=-1))
    first_from_y = frozen.neg_k >= 2
    second_from_y = (frozen.neg_k == 1) | (frozen.neg_k == 3)
    a_rows = np.where(first_from_y[None, :, None], ys, xs)
    xj = xs[:, frozen.neg_j, :]
    yj = ys[:, frozen.neg_j, :]
    b_rows = np.where(second_from_y[None, :, None], yj, xj)
    d_neg = np.sqrt(np.sum((a_rows - b_rows) ** 2, axis=-1))
    resid = cfg.margin + d_pos - d_neg
    hinge = np.maximum(resid, 0.0)
    if cfg.fos_variant == "qht":
        total = np.sum(hinge * hinge, axis=1) / n
    else:
        total = np.sum(hinge, axis=1) / n
    if pairs is not None:
        ii, jj, starts = pairs
        dxx = np.sqrt(np.sum((xs[:, ii, :] - xs[:, jj, :]) ** 2, axis=-1))
        dyy = np.sqrt(np.sum((ys[:, ii, :] - ys[:, jj, :]) ** 2, axis=-1))
        seg = np.add.reduceat((dxx - dyy) ** 2, starts, axis=1)
        total = total + np.sum(np.sqrt(seg), axis=1) / n
    return total


def _detect_ties(x, y, cfg: LossConfig, include_sos: bool, tol: float) -> str | None:
    """Name the first smoothness hazard found, or None if the point is clean."""
    n = x.shape[0]
    dxx, dyy, dxy = _distance_matrices(x, y)
    irange = np.arange(n)
    d_pos = dxy[irange, irange]
    cand = np.stack([dxx, dxy, dxy.T, dyy], axis=2)
    cand[irange, irange, :] = np.inf
    flat = cand.reshape(n, 4 * n)
    two = np.partition(flat, 1, axis=1)[:, :2]
    d_neg = two[:, 0]
    if np.any(two[:, 1] - two[:, 0] < tol):
        return "negative argmin tie"
    if np.any(np.abs(cfg.margin + d_pos - d_neg) < tol):
        return "hinge boundary"
    if np.any(d_pos < tol) or np.any(d_neg < tol):
        return "degenerate distance"
    if include_sos:
        nbr = _neighbor_mask(dxx, dyy, cfg.k, cfg.sos_neighbor_mode)
        if cfg.sos_neighbor_mode == "same_side" and cfg.k < n - 1:
            eye = np.eye(n, dtype=bool)
            for side in (np.where(eye, np.inf, dxx), np.where(eye, np.inf, dyy)):
                ranked = np.sort(side, axis=1)
                if np.any(ranked[:, cfg.k] - ranked[:, cfg.k - 1] < tol):
                    return "neighbor rank tie"
        _, d2 = _sos_values(dxx, dyy, nbr)
        if np.any(d2 < tol):
            return "vanishing second-order distance"
        used = np.where(nbr, dxx, np.inf)
        if np.any(used < tol) or np.any(np.where(nbr, dyy, np.inf) < tol):
            return "degenerate neighbor distance"
    return None


def finite_difference_check(
    batch: PairBatch,
    cfg: LossConfig,
    h: float = 1e-5,
    include_sos: bool = True,
    tie_tol: float | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every coordinate of every anchor and positive is perturbed by +/- h and
    the total re-evaluated with the discrete choices frozen from the
    unperturbed batch. The reported error is the largest absolute deviation
    over the sup norm of the numeric gradient: a per-coordinate quotient
    would amplify finite-difference truncation noise on the few coordinates
    whose true component is near zero.

    Raises NondifferentiablePointError when the batch sits within tie_tol
    of a hinge boundary, an argmin or neighbor-rank tie, or a degenerate
    distance, since no finite-difference comparison is meaningful there.
    """
    if h <= 0:
        raise ValidationError("step h must be > 0")
    n = batch.n_pairs
    _check_k(cfg, n)
    x = batch.anchors
    y = batch.positives
    tol = max(100.0 * h, 10.0 * cfg.distance_epsilon) if tie_tol is None else tie_tol
    hazard = _detect_ties(x, y, cfg, include_sos, tol)
    if hazard is not None:
        raise NondifferentiablePointError(f"nondifferentiable point: {hazard}")
    _, _, grad_x, grad_y, _, _, frozen = _evaluate(x, y, cfg, include_sos=include_sos)
    pairs = _frozen_neighbor_pairs(frozen.nbr) if frozen.nbr is not None else None
    q = x.shape[1]
    n_coords = n * q
    pair_count = pairs[0].shape[0] if pairs is not None else n
    block = max(1, min(512, int(2_500_000 // max(pair_count * q, n * q))))
    worst_abs = 0.0
    scale = 0.0
    for side, analytic in ((0, grad_x), (1, grad_y)):
        base_x = np.broadcast_to(x, (block, n, q))
        base_y = np.broadcast_to(y, (block, n, q))
        for start in range(0, n_coords, block):
            idx = np.arange(start, min(start + block, n_coords))
            b = idx.size
            rows, cols = idx // q, idx % q
            xs = np.array(base_x[:b])
            ys = np.array(base_y[:b])
            bump = xs if side == 0 else ys
            bump[np.arange(b), rows, cols] += h
            f_plus = _frozen_total_stack(xs, ys, frozen, cfg, pairs)
            bump[np.arange(b), rows, cols] -= 2.0 * h
            f_minus = _frozen_total_stack(xs, ys, frozen, cfg, pairs)
            numeric = (f_plus - f_minus) / (2.0 * h)
            diff = np.abs(analytic[rows, cols] - numeric)
            worst_abs = max(worst_abs, float(diff.max()))
            scale = max(scale, float(np.abs(numeric).max()))
    return worst_abs / max(1e-12, scale)


def random_unit_batch(rng: np.random.Generator, n: int, q: int) -> PairBatch:
    """Batch of random unit descriptors with labels 0..n-1."""
    x = rng.standard_normal((n, q))
    y = rng.standard_normal((n, q))
    x /= np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
    y /= np.sqrt(np.einsum("ij,ij->i", y, y))[:, None]
    return PairBatch(anchors=x, positives=y, labels=np.arange(n))


def gradient_check_trials(
    trials: int,
    batch_sizes: tuple[int, ...] = (4, 8, 16),
    dims: tuple[int, ...] = (3, 32, 128),
    h: float = 1e-5,
    seed: int = 0,
    max_resamples: int = 20,
) -> list[dict]:
    """Run finite-difference trials over random smooth-region batches.

    Cycles batch size, dimension, hinge variant, second-order term on/off,
    and neighbor mode across trials. Batches landing on a tie are redrawn;
    if max_resamples consecutive draws for one trial all sit on ties the
    nondifferentiable-point error propagates.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    combos = [
        (variant, include_sos, mode)
        for variant in FOS_VARIANTS
        for include_sos in (True, False)
        for mode in NEIGHBOR_MODES
    ]
    results = []
    for t in range(trials):
        n = batch_sizes[t % len(batch_sizes)]
        q = dims[(t // len(batch_sizes)) % len(dims)]
        variant, include_sos, mode = combos[t % len(combos)]
        cfg = LossConfig(
            k=min(2, n - 1), fos_variant=variant, sos_neighbor_mode=mode
        )
        last_error: NondifferentiablePointError | None = None
        for _ in range(max_resamples):
            batch = random_unit_batch(rng, n, q)
            try:
                err = finite_difference_check(
                    batch, cfg, h=h, include_sos=include_sos
                )
            except NondifferentiablePointError as exc:
                last_error = exc
                continue
            results.append(
                {
                    "trial": t,
                    "n_pairs": n,
                    "dim": q,
                    "fos_variant": variant,
                    "include_sos": include_sos,
                    "sos_neighbor_mode": mode,
                    "max_rel_err": err,
                }
            )
            break
        else:
            raise NondifferentiablePointError(
                f"nondifferentiable point: resampling exhausted ({last_error})"
            )
    return results
