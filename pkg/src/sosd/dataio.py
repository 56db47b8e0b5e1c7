"""Descriptor file persistence and synthetic vMF-mixture generation.

Binary format: 24-byte little-endian header (magic "SOSD", version u32,
count u64, dim u32, flags u32 with bit0 = unit-normalized) followed by
count*dim float32 values, row-major. Labels, optional per-row split tags,
and a provenance string live in a JSON sidecar at <path>.json. Disk is
32-bit; memory is 64-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LabeledDescriptorSet, project_rows
from .errors import DescriptorFileError, ValidationError
from .vmf import VmfParams, sample_vmf

MAGIC = b"SOSD"
VERSION = 1
FLAG_UNIT_NORM = 1
_HEADER = struct.Struct("<4sIQII")
_NORM_ATOL = 1e-5


def _sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _rows_unit(vectors: np.ndarray) -> bool:
    norms = np.sqrt(np.sum(vectors * vectors, axis=1))
    return bool(np.all(np.abs(norms - 1.0) <= _NORM_ATOL))


def save_descriptors(ds: LabeledDescriptorSet, path) -> None:
    """Write the binary file and its JSON sidecar; f32 on disk."""
    quantized = np.ascontiguousarray(ds.vectors, dtype="<f4")
    flags = FLAG_UNIT_NORM if _rows_unit(quantized.astype(np.float64)) else 0
    header = _HEADER.pack(MAGIC, VERSION, quantized.shape[0], quantized.shape[1], flags)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes(order="C"))
    sidecar = {
        "labels": [int(v) for v in ds.labels],
        "provenance": ds.provenance,
    }
    if ds.tags is not None:
        sidecar["tags"] = list(ds.tags)
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_descriptors(path, normalize: bool = False) -> LabeledDescriptorSet:
    """Read a descriptor file; validates header, sidecar, and norm flag.

    normalize=True re-projects rows to unit norm after load (for ingesting
    third-party descriptors saved with the unit-norm flag clear).
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DescriptorFileError("truncated-payload", f"{path}: too short for header")
    magic, version, count, dim, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DescriptorFileError("bad-magic", f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise DescriptorFileError("bad-version", f"{path}: version {version}")
    if count < 1 or dim < 2:
        raise DescriptorFileError(
            "bad-header", f"{path}: count={count}, dim={dim} out of range"
        )
    expected = _HEADER.size + count * dim * 4
    if len(raw) != expected:
        raise DescriptorFileError(
            "truncated-payload",
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
            f"expected {count * dim * 4}",
        )
    vectors = (
        np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        .reshape(count, dim)
        .astype(np.float64)
    )

    sidecar_path = _sidecar_path(path)
    if not sidecar_path.exists():
        raise DescriptorFileError("missing-sidecar", f"{sidecar_path} not found")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise DescriptorFileError("bad-sidecar", f"{sidecar_path}: {exc}") from exc
    labels = sidecar.get("labels")
    if not isinstance(labels, list):
        raise DescriptorFileError("bad-sidecar", f"{sidecar_path}: labels missing")
    if len(labels) != count:
        raise DescriptorFileError(
            "label-count-mismatch",
            f"{path}: header count {count}, sidecar has {len(labels)} labels",
        )
    tags = sidecar.get("tags")
    if tags is not None and (
        not isinstance(tags, list) or len(tags) != count
    ):
        raise DescriptorFileError("bad-sidecar", f"{sidecar_path}: bad tags field")

    if flags & FLAG_UNIT_NORM and not _rows_unit(vectors):
        raise DescriptorFileError(
            "norm-violation",
            f"{path}: unit-norm flag set but a row deviates beyond {_NORM_ATOL}",
        )
    if normalize:
        vectors = project_rows(vectors)
    return LabeledDescriptorSet(
        vectors=vectors,
        labels=np.asarray(labels, dtype=np.int64),
        tags=tags,
        provenance=sidecar.get("provenance", ""),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Two-level vMF mixture: class centers around the first canonical
    axis at kappa_inter, samples around each center at kappa_intra."""

    classes: int
    samples_per_class: int
    dim: int
    kappa_intra: float
    kappa_inter: float
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValidationError("classes must be >= 2")
        if self.samples_per_class < 2:
            raise ValidationError("samples_per_class must be >= 2")
        if self.dim < 2:
            raise ValidationError("dim must be >= 2")
        if self.kappa_intra < 0 or self.kappa_inter < 0:
            raise ValidationError("concentrations must be >= 0")

    def provenance(self) -> str:
        return (
            f"synthetic vmf mixture: classes={self.classes} "
            f"per_class={self.samples_per_class} dim={self.dim} "
            f"kappa_intra={self.kappa_intra} kappa_inter={self.kappa_inter} "
            f"seed={self.seed}"
        )


def generate_synthetic(spec: SyntheticSpec) -> LabeledDescriptorSet:
    """Draw the mixture with a single sequential stream; reproducible."""
    rng = np.random.default_rng(spec.seed)
    nu = np.zeros(spec.dim)
    nu[0] = 1.0
    centers = sample_vmf(VmfParams(mu=nu, kappa=spec.kappa_inter), spec.classes, rng)
    blocks = [
        sample_vmf(
            VmfParams(mu=centers[i], kappa=spec.kappa_intra),
            spec.samples_per_class,
            rng,
        )
        for i in range(spec.classes)
    ]
    vectors = np.concatenate(blocks, axis=0)
    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.samples_per_class)
    return LabeledDescriptorSet(
        vectors=vectors, labels=labels, provenance=spec.provenance()
    )
