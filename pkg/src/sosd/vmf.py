"""von Mises-Fisher tools: density, concentration estimation, sampling,
and hypersphere-utilization statistics.

All Bessel work happens in log space; I_v(x) overflows float64 far below
the concentrations that matter at q=128. The vMF machinery is used for
evaluation and synthetic data only, never inside a training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import UNIT_NORM_ATOL, project_rows, project_to_sphere
from .errors import NumericError, ValidationError

# Below this, scipy's exponentially scaled Bessel has underflowed and the
# power series takes over (large order with small-to-moderate argument).
_IVE_TINY = 1e-280

# scipy's ive returns NaN for arguments beyond roughly 2.1e9; past this the
# large-argument expansion takes over. The series is capped well below that
# since its term count grows with x.
_SERIES_MAX_X = 1e6

_KAPPA_NEWTON_TOL = 1e-12
_KAPPA_NEWTON_MAX_ITER = 200


def _log_bessel_series(order: float, x: float) -> float:
    """Power series for ln I_order(x); all terms positive, summed in log space.

    Converges quickly in the regime where the scaled Bessel underflows
    (order >> x). Terms: (x/2)^(2m+order) / (m! * Gamma(m+order+1)).
    """
    if x == 0.0:
        return 0.0 if order == 0.0 else -math.inf
    if x > _SERIES_MAX_X:
        raise NumericError(
            f"log Bessel out of supported range: order={order}, x={x}"
        )
    log_half_x = math.log(x / 2.0)
    m = np.arange(0, 260 + int(x))
    terms = (
        (2 * m + order) * log_half_x
        - special.gammaln(m + 1.0)
        - special.gammaln(m + order + 1.0)
    )
    return float(special.logsumexp(terms))


def _log_bessel_asymptotic(order: float, x: float) -> float:
    """Large-argument expansion: I_v(x) ~ e^x / sqrt(2 pi x) * S(v, x)."""
    mu = 4.0 * order * order
    t = 1.0 / (8.0 * x)
    s = (
        1.0
        - (mu - 1.0) * t
        + (mu - 1.0) * (mu - 9.0) * t * t / 2.0
        - (mu - 1.0) * (mu - 9.0) * (mu - 25.0) * t * t * t / 6.0
    )
    return x - 0.5 * math.log(2.0 * math.pi * x) + math.log(s)


def log_bessel_i(order: float, x: float) -> float:
    """ln I_order(x) for order >= 0, x >= 0; -inf when I_order(x) = 0."""
    if order < 0 or x < 0:
        raise ValidationError("order and x must be >= 0")
    if x == 0.0:
        return 0.0 if order == 0.0 else -math.inf
    scaled = special.ive(order, x)
    if np.isfinite(scaled) and scaled > _IVE_TINY:
        return float(np.log(scaled) + x)
    if x >= 1e4 and x >= 100.0 * order * order:
        return _log_bessel_asymptotic(order, x)
    return _log_bessel_series(order, x)


def bessel_ratio_A(q: int, kappa: float) -> float:
    """A(kappa) = I_{q/2}(kappa) / I_{q/2-1}(kappa), in [0, 1)."""
    if q < 2:
        raise ValidationError("q must be >= 2")
    if kappa < 0:
        raise ValidationError("kappa must be >= 0")
    if kappa == 0.0:
        return 0.0
    num = special.ive(q / 2.0, kappa)
    den = special.ive(q / 2.0 - 1.0, kappa)
    if np.isfinite(num) and np.isfinite(den) and den > _IVE_TINY:
        return float(num / den)
    if kappa >= 1e4 and kappa >= 1000.0 * q:
        qf = float(q)
        ratio = (
            1.0
            - (qf - 1.0) / (2.0 * kappa)
            + (qf - 1.0) * (qf - 3.0) / (8.0 * kappa * kappa)
        )
        return min(ratio, 1.0 - 1e-16)
    return math.exp(
        _log_bessel_series(q / 2.0, kappa) - _log_bessel_series(q / 2.0 - 1.0, kappa)
    )


def _bessel_ratio_derivative(q: int, kappa: float, a: float) -> float:
    # dA/dk = 1 - A^2 - (q-1)/k * A
    return 1.0 - a * a - (q - 1.0) / kappa * a


@dataclass(frozen=True)
class VmfParams:
    """Mean direction and concentration of a vMF density on S^(q-1)."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.ascontiguousarray(np.asarray(self.mu, dtype=np.float64))
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise ValidationError("mu must be a 1-D vector with dimension >= 2")
        norm = float(np.sqrt(np.sum(mu * mu)))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError("mu must be unit-norm")
        object.__setattr__(self, "mu", project_to_sphere(mu))
        if self.kappa < 0:
            raise ValidationError("kappa must be >= 0")

    @property
    def q(self) -> int:
        return self.mu.shape[0]


def uniform_log_density(q: int) -> float:
    """Log of the constant density on S^(q-1): -ln area."""
    if q < 2:
        raise ValidationError("q must be >= 2")
    log_area = math.log(2.0) + (q / 2.0) * math.log(math.pi) - special.gammaln(q / 2.0)
    return -log_area


def vmf_log_density(x: np.ndarray, p: VmfParams) -> float:
    """ln f(x; mu, kappa) = ln c_q(kappa) + kappa <mu, x>."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != p.mu.shape:
        raise ValidationError(
            f"dimension mismatch: x has shape {x.shape}, mu has shape {p.mu.shape}"
        )
    q, kappa = p.q, p.kappa
    if kappa == 0.0:
        return uniform_log_density(q)
    log_c = (
        (q / 2.0 - 1.0) * math.log(kappa)
        - (q / 2.0) * math.log(2.0 * math.pi)
        - log_bessel_i(q / 2.0 - 1.0, kappa)
    )
    return float(log_c + kappa * np.dot(p.mu, x))


def mean_resultant_length(samples: np.ndarray) -> float:
    """R_bar = ||sum x_i|| / N over unit vectors, clamped into [0, 1]."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError("samples must be a non-empty (n, q) array")
    resultant = np.add.reduce(arr, axis=0)
    r = float(np.sqrt(np.sum(resultant * resultant))) / arr.shape[0]
    return min(max(r, 0.0), 1.0)


def estimate_kappa(r_bar: float, q: int) -> float:
    """Concentration whose Bessel ratio matches the observed R_bar.

    Starts from kappa0 = R(q - R^2)/(1 - R^2) and Newton-refines
    A(kappa) - R_bar to below 1e-9 (interior iterations push further).
    """
    if q < 2:
        raise ValidationError("q must be >= 2")
    if r_bar < 0:
        raise ValidationError("R_bar must be >= 0")
    if r_bar >= 1:
        raise ValidationError("degenerate concentration: R_bar >= 1 implies kappa = inf")
    if r_bar == 0.0:
        return 0.0
    kappa = r_bar * (q - r_bar * r_bar) / (1.0 - r_bar * r_bar)
    for _ in range(_KAPPA_NEWTON_MAX_ITER):
        a = bessel_ratio_A(q, kappa)
        err = a - r_bar
        if abs(err) < _KAPPA_NEWTON_TOL:
            return kappa
        deriv = _bessel_ratio_derivative(q, kappa, a)
        if deriv <= 0:
            break
        step = err / deriv
        kappa = max(kappa - step, kappa / 2.0)
    if abs(bessel_ratio_A(q, kappa) - r_bar) > 1e-9:
        raise NumericError(
            f"kappa estimation did not converge for R_bar={r_bar}, q={q}"
        )
    return kappa


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _sample_cos_angles(kappa: float, q: int, n: int, rng: np.random.Generator):
    """Rejection-sample the cosine of the angle to mu (tangent-normal W)."""
    # rationalized form of (-2k + sqrt(4k^2 + (q-1)^2)) / (q-1): the naive
    # expression cancels to 0 once 4k^2 absorbs (q-1)^2, around kappa ~ 1e8
    b = (q - 1.0) / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + (q - 1.0) ** 2))
    x0 = (1.0 - b) / (1.0 + b)
    # log(1 - x0^2) via its factors; 1 - x0 = 2b / (1 + b)
    log_1m_x0sq = math.log(2.0 * b) - math.log1p(b) + math.log1p(x0)
    c = kappa * x0 + (q - 1.0) * log_1m_x0sq
    out = np.empty(n)
    have = 0
    while have < n:
        need = n - have
        z = rng.beta((q - 1.0) / 2.0, (q - 1.0) / 2.0, size=need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(need)
        keep = kappa * w + (q - 1.0) * np.log1p(-x0 * w) - c >= np.log(u)
        accepted = w[keep]
        out[have : have + accepted.size] = accepted
        have += accepted.size
    return out


def sample_vmf(p: VmfParams, n: int, seed) -> np.ndarray:
    """n draws from vMF(mu, kappa); deterministic given seed (int or rng)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = _as_rng(seed)
    q = p.q
    if p.kappa == 0.0:
        return project_rows(rng.standard_normal((n, q)))
    w = _sample_cos_angles(p.kappa, q, n, rng)
    tangent = project_rows(rng.standard_normal((n, q - 1))) if q > 2 else None
    if tangent is None:
        # S^0 tangent: just a sign
        tangent = np.where(rng.random((n, 1)) < 0.5, -1.0, 1.0)
    radial = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    samples = np.concatenate([w[:, None], radial[:, None] * tangent], axis=1)
    # Householder reflection mapping e1 onto mu keeps samples on the sphere.
    e1 = np.zeros(q)
    e1[0] = 1.0
    u = e1 - p.mu
    u_norm = np.sqrt(np.sum(u * u))
    if u_norm > UNIT_NORM_ATOL:
        u /= u_norm
        samples = samples - 2.0 * np.outer(samples @ u, u)
    return project_rows(samples)


@dataclass(frozen=True)
class ClassVmfSummary:
    class_id: int
    r_bar: float
    kappa: float
    count: int


@dataclass(frozen=True)
class VmfStats:
    """Hypersphere-utilization statistics over a labeled descriptor set."""

    r_intra: float
    r_inter: float
    rho: float
    per_class: list[ClassVmfSummary] = field(default_factory=list)
    class_count: int = 0
    random_tests: int = 0
    inter_mode: str = "random_tests"
    skipped_classes: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        def _num(v: float):
            return None if not math.isfinite(v) else v

        return {
            "r_intra": _num(self.r_intra),
            "r_inter": _num(self.r_inter),
            "rho": _num(self.rho),
            "per_class": [
                {
                    "class_id": c.class_id,
                    "r_bar": _num(c.r_bar),
                    "kappa": _num(c.kappa),
                    "count": c.count,
                }
                for c in self.per_class
            ],
            "protocol": {
                "class_count": self.class_count,
                "random_tests": self.random_tests,
                "inter_mode": self.inter_mode,
                "skipped_classes": self.skipped_classes,
                "seed": self.seed,
            },
        }


INTER_MODES = ("random_tests", "direct_mean")


def hypersphere_stats(
    descriptors: np.ndarray,
    labels: np.ndarray,
    random_tests: int = 10000,
    seed: int = 0,
    inter_mode: str = "random_tests",
) -> VmfStats:
    """R_intra / R_inter / rho over a labeled set of unit descriptors.

    R_intra averages per-class mean resultant lengths (classes with < 2
    samples are skipped and counted). R_inter defaults to the random-test
    protocol: each test draws one descriptor per class uniformly and takes
    the mean resultant length of the draw; the direct-mean mode instead
    takes (1/M)||sum of normalized class means||. Permutation-invariant:
    classes are processed in ascending label order and rows in a canonical
    lexicographic order, so the result depends only on the multiset.
    """
    if inter_mode not in INTER_MODES:
        raise ValidationError(f"inter_mode must be one of {INTER_MODES}")
    if random_tests < 1:
        raise ValidationError("random_tests must be >= 1")
    vectors = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if vectors.ndim != 2 or labels.shape != (vectors.shape[0],):
        raise ValidationError("descriptors must be (n, q) with matching labels")
    class_ids = np.unique(labels)
    if class_ids.size < 2:
        raise ValidationError("need at least 2 classes")

    # Canonical per-class row blocks: lexicographic order within each class.
    blocks: list[np.ndarray] = []
    for cid in class_ids:
        rows = vectors[labels == cid]
        order = np.lexsort(rows.T[::-1])
        blocks.append(np.ascontiguousarray(rows[order]))

    per_class: list[ClassVmfSummary] = []
    skipped = 0
    intra_sum = 0.0
    for cid, block in zip(class_ids, blocks):
        if block.shape[0] < 2:
            skipped += 1
            continue
        r_bar = mean_resultant_length(block)
        if r_bar >= 1.0:
            kappa = math.inf
        else:
            kappa = estimate_kappa(r_bar, vectors.shape[1])
        per_class.append(
            ClassVmfSummary(
                class_id=int(cid), r_bar=r_bar, kappa=kappa, count=block.shape[0]
            )
        )
        intra_sum += r_bar
    if not per_class:
        raise ValidationError("no class has >= 2 samples; R_intra undefined")
    r_intra = intra_sum / len(per_class)

    m = class_ids.size
    if inter_mode == "direct_mean":
        centers = np.stack([np.add.reduce(b, axis=0) for b in blocks])
        centers = project_rows(centers)
        r_inter = mean_resultant_length(centers)
        tests_used = 0
    else:
        rng = np.random.default_rng(seed)
        counts = np.array([b.shape[0] for b in blocks])
        draws = (rng.random((random_tests, m)) * counts).astype(np.int64)
        acc = np.zeros((random_tests, vectors.shape[1]))
        for c, block in enumerate(blocks):
            acc += block[draws[:, c]]
        r_inter = float(np.mean(np.sqrt(np.sum(acc * acc, axis=1)) / m))
        r_inter = min(max(r_inter, 0.0), 1.0)
        tests_used = random_tests

    rho = math.inf if r_intra == 0.0 else r_inter / r_intra
    return VmfStats(
        r_intra=r_intra,
        r_inter=r_inter,
        rho=rho,
        per_class=per_class,
        class_count=m,
        random_tests=tests_used,
        inter_mode=inter_mode,
        skipped_classes=skipped,
        seed=seed,
    )
