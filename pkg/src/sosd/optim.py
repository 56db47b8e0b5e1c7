"""Training of free unit-norm embeddings by direct loss minimization.

Each training sample owns its descriptor as a free parameter. A step
evaluates the batch loss, applies SGD or Adam to the full parameter
table, and re-projects every descriptor to the unit sphere. Batches draw
N distinct classes per epoch without replacement; classes beyond the
last full batch sit out that epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .core import LabeledDescriptorSet, PairBatch, project_rows
from .errors import DivergenceError, ValidationError
from .losses import LossConfig, _evaluate
from .metrics import fpr_at_recall

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    epochs: int = 100
    pairs_per_batch: int = 512
    seed: int = 0
    enable_sosr: bool = True
    dim: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    sgd_lr0: float = 0.01
    sgd_decay_epoch: int = 50
    sgd_decay_factor: float = 10.0
    adam_alpha: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.pairs_per_batch < 2:
            raise ValidationError("pairs_per_batch must be >= 2")
        if min(self.sgd_lr0, self.sgd_decay_factor, self.adam_alpha) <= 0:
            raise ValidationError("learning rates and decay factor must be > 0")
        if self.sgd_decay_epoch < 1:
            raise ValidationError("sgd_decay_epoch must be >= 1")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValidationError("adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValidationError("adam_eps must be > 0")


@dataclass
class EmbeddingTable:
    """One unit-norm free vector per training sample, with class labels."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.vectors = project_rows(self.vectors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.vectors.shape[0],):
            raise ValidationError("labels length must match vector count")
        _, counts = np.unique(self.labels, return_counts=True)
        if counts.size and counts.min() < 2:
            raise ValidationError(
                "every class needs at least 2 instances to form pairs"
            )

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_classes(self) -> int:
        return int(np.unique(self.labels).size)

    @classmethod
    def from_descriptor_set(cls, ds: LabeledDescriptorSet) -> "EmbeddingTable":
        return cls(vectors=ds.vectors.copy(), labels=ds.labels.copy())

    @classmethod
    def random(cls, labels, dim: int, seed: int) -> "EmbeddingTable":
        labels = np.asarray(labels, dtype=np.int64)
        rng = np.random.default_rng(seed)
        vectors = rng.standard_normal((labels.shape[0], dim))
        return cls(vectors=vectors, labels=labels)

    def to_descriptor_set(self, provenance: str = "") -> LabeledDescriptorSet:
        return LabeledDescriptorSet(
            vectors=self.vectors.copy(),
            labels=self.labels.copy(),
            provenance=provenance,
        )


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "OptimizerState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    fos: float
    sos: float
    total: float
    fpr95: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "fos", "sos", "total", "fpr95"])
            for r in self.records:
                fpr = "" if r.fpr95 is None else repr(r.fpr95)
                writer.writerow([r.epoch, repr(r.fos), repr(r.sos), repr(r.total), fpr])


@dataclass(frozen=True)
class ValidationPairs:
    """Fixed index pairs into a table, scored for FPR@recall each epoch."""

    pos: np.ndarray  # (P, 2) row indices of same-class pairs
    neg: np.ndarray  # (Q, 2) row indices of cross-class pairs
    recall: float = 0.95


def sgd_learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step-decayed SGD rate: lr0 / decay_factor^(epoch // decay_epoch)."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    return cfg.sgd_lr0 / cfg.sgd_decay_factor ** (epoch // cfg.sgd_decay_epoch)


def adam_update(
    params: np.ndarray,
    grads: np.ndarray,
    state: OptimizerState,
    cfg: TrainConfig,
    t: int,
) -> np.ndarray:
    """Bias-corrected Adam update in place on the state; returns new params."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    return params - cfg.adam_alpha * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def optimizer_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: OptimizerState,
    cfg: TrainConfig,
    t: int,
    epoch: int,
) -> np.ndarray:
    """One optimizer update followed by unit-sphere re-projection."""
    if params.shape != grads.shape:
        raise ValidationError("params and grads must share shape")
    if t < 1:
        raise ValidationError("step index t must be >= 1")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("divergence: non-finite gradient")
    if cfg.optimizer == "adam":
        out = adam_update(params, grads, state, cfg, t)
    else:
        out = params - sgd_learning_rate(cfg, epoch) * grads
    if not np.all(np.isfinite(out)):
        raise DivergenceError("divergence: non-finite parameters")
    return project_rows(out)


def _class_index(labels_arr: np.ndarray):
    """Padded per-class row-index matrix in ascending label order."""
    labels, counts = np.unique(labels_arr, return_counts=True)
    order = np.argsort(labels_arr, kind="stable")
    padded = np.full((labels.size, int(counts.max())), -1, dtype=np.int64)
    pos = 0
    for c, cnt in enumerate(counts):
        padded[c, :cnt] = np.sort(order[pos : pos + cnt])
        pos += cnt
    return labels, counts, padded


def _plan_epoch(index, n: int, rng: np.random.Generator):
    """Row-index plan for one epoch: [(rows_a, rows_b, labels), ...].

    Classes are shuffled once per epoch and split into floor(M/N) batches;
    leftover classes sit out the epoch. Within a class the anchor and
    positive are two distinct instances drawn uniformly.
    """
    labels, counts, padded = index
    m = labels.size
    if m < n:
        raise ValidationError(
            f"fewer than N eligible classes: have {m}, need {n}"
        )
    perm = rng.permutation(m)
    plan = []
    for b in range(m // n):
        chosen = perm[b * n : (b + 1) * n]
        cnt = counts[chosen]
        first = (rng.random(n) * cnt).astype(np.int64)
        second = (rng.random(n) * (cnt - 1)).astype(np.int64)
        second += second >= first
        plan.append((padded[chosen, first], padded[chosen, second], labels[chosen]))
    return plan


def sample_epoch_batches(
    table: EmbeddingTable, n: int, rng: np.random.Generator
) -> list[PairBatch]:
    """One epoch of batches: N distinct classes each, 2 instances per class."""
    return [
        PairBatch(
            anchors=table.vectors[rows_a],
            positives=table.vectors[rows_b],
            labels=labels,
            anchor_rows=rows_a,
            positive_rows=rows_b,
        )
        for rows_a, rows_b, labels in _plan_epoch(_class_index(table.labels), n, rng)
    ]


def _validation_fpr(vectors: np.ndarray, val: ValidationPairs) -> float:
    def dists(pairs):
        diff = vectors[pairs[:, 0]] - vectors[pairs[:, 1]]
        return np.sqrt(np.sum(diff * diff, axis=1))

    return fpr_at_recall(dists(val.pos), dists(val.neg), recall=val.recall)


def train(
    table: EmbeddingTable,
    cfg: TrainConfig,
    validation: ValidationPairs | None = None,
) -> tuple[EmbeddingTable, TrainHistory]:
    """Optimize the embedding table; deterministic given cfg.seed."""
    if cfg.dim is not None and cfg.dim != table.dim:
        raise ValidationError(
            f"configured dim {cfg.dim} does not match table dim {table.dim}"
        )
    if table.n_classes < cfg.pairs_per_batch:
        raise ValidationError(
            f"fewer than N eligible classes: have {table.n_classes}, "
            f"need {cfg.pairs_per_batch}"
        )
    if cfg.loss.k > cfg.pairs_per_batch - 1:
        raise ValidationError(
            f"k={cfg.loss.k} exceeds N-1={cfg.pairs_per_batch - 1}"
        )
    rng = np.random.default_rng(cfg.seed)
    vectors = table.vectors.copy()
    index = _class_index(table.labels)
    state = OptimizerState.zeros_like(vectors)
    history = TrainHistory()
    t = 0
    for epoch in range(cfg.epochs):
        plan = _plan_epoch(index, cfg.pairs_per_batch, rng)
        fos_sum = 0.0
        sos_sum = 0.0
        for rows_a, rows_b, _ in plan:
            fos, sos, grad_x, grad_y, _, _, _ = _evaluate(
                vectors[rows_a], vectors[rows_b], cfg.loss,
                include_sos=cfg.enable_sosr,
            )
            grads = np.zeros_like(vectors)
            grads[rows_a] += grad_x
            grads[rows_b] += grad_y
            t += 1
            try:
                vectors = optimizer_step(vectors, grads, state, cfg, t, epoch)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (epoch {epoch}, step {t})") from exc
            fos_sum += fos
            sos_sum += sos
        n_batches = len(plan)
        fpr = _validation_fpr(vectors, validation) if validation is not None else None
        history.records.append(
            EpochRecord(
                epoch=epoch,
                fos=fos_sum / n_batches,
                sos=sos_sum / n_batches,
                total=(fos_sum + sos_sum) / n_batches,
                fpr95=fpr,
            )
        )
    result = EmbeddingTable(vectors=vectors, labels=table.labels.copy())
    # keep the optimizer's exact output; the constructor's re-projection
    # would perturb last-ulp bits of rows that are already unit
    result.vectors = vectors
    return result, history
