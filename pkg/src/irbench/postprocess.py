"""Descriptor post-processing: L2 normalization, PCA-whitening (fit/apply),
the L2 -> whiten -> L2 chain, and multi-model ensembling by concatenation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor_io import (
    BadMagicError,
    DescriptorSet,
    FORMAT_VERSION,
    VersionMismatchError,
    _open_sink,
    _open_source,
    _read_exact,
)

WHTN_MAGIC = b"WHTN"

DEFAULT_PCA_DIM = 512
DEFAULT_EPS = 1e-10


@dataclass(frozen=True)
class WhiteningModel:
    """PCA-whitening transform: x -> diag(1/sqrt(eig+eps)) P (x - mean).

    Projection rows are the leading covariance eigenvectors, sorted by
    descending eigenvalue, with each row's largest-magnitude entry positive.
    """

    mean: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        projection = np.ascontiguousarray(self.projection, dtype=np.float64)
        eigenvalues = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        if mean.ndim != 1 or projection.ndim != 2 or eigenvalues.ndim != 1:
            raise ValueError("whitening model arrays have wrong ranks")
        d, input_dim = projection.shape
        if input_dim != mean.shape[0] or eigenvalues.shape[0] != d or d > input_dim:
            raise ValueError(
                f"inconsistent whitening shapes: projection {projection.shape}, "
                f"mean {mean.shape}, eigenvalues {eigenvalues.shape}"
            )
        if np.any(eigenvalues < 0):
            raise ValueError("eigenvalues must be non-negative")
        if np.any(np.diff(eigenvalues) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        for arr in (mean, projection, eigenvalues):
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "projection", projection)
        object.__setattr__(self, "eigenvalues", eigenvalues)
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def input_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[0]


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||; zero vectors pass through unchanged."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0.0 else v.copy()


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return matrix / safe


def fit_whitening(
    train: DescriptorSet | np.ndarray,
    d: int,
    eps: float = DEFAULT_EPS,
) -> WhiteningModel:
    """Fit PCA-whitening to dimension d on the given descriptors.

    Covariance uses the 1/n convention; eigenpairs come from a symmetric
    eigensolver on the dim x dim covariance; eigenvector signs are fixed so
    each row's largest-magnitude entry is positive.
    """
    matrix = train.matrix if isinstance(train, DescriptorSet) else train
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("training data must be a 2-D matrix")
    n, dim = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 training descriptors, got {n}")
    if not 1 <= d <= dim:
        raise ValueError(f"whitening dimension {d} not in [1, {dim}]")
    if not np.isfinite(x).all():
        raise ValueError("training data contains non-finite values")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    # eigh returns ascending order; keep the top-d pairs descending
    evals = evals[::-1][:d]
    projection = evecs[:, ::-1][:, :d].T.copy()
    evals = np.maximum(evals, 0.0)
    lead = np.argmax(np.abs(projection), axis=1)
    signs = np.sign(projection[np.arange(d), lead])
    signs[signs == 0] = 1.0
    projection *= signs[:, None]
    return WhiteningModel(mean=mean, projection=projection, eigenvalues=evals, eps=eps)


def apply_whitening(model: WhiteningModel, v: np.ndarray) -> np.ndarray:
    """Apply the whitening transform to one vector or to a row matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.input_dim:
        raise ValueError(
            f"descriptor dim {v.shape[-1]} does not match model input dim {model.input_dim}"
        )
    scale = 1.0 / np.sqrt(model.eigenvalues + model.eps)
    return (v - model.mean) @ model.projection.T * scale


def post_process(dset: DescriptorSet, model: WhiteningModel | None) -> DescriptorSet:
    """Row-wise L2 -> whiten -> L2; with model=None a single L2 pass-through
    (the true-dimension mode). Provenance records each step."""
    rows = l2_normalize_rows(dset.matrix)
    if model is None:
        return dset.with_matrix(rows, ("l2",))
    whitened = apply_whitening(model, rows)
    final = l2_normalize_rows(whitened)
    return dset.with_matrix(final, ("l2", f"whiten-{model.output_dim}", "l2"))


def ensemble_concat(a: DescriptorSet, b: DescriptorSet) -> DescriptorSet:
    """Concatenate two descriptor sets per name (rows aligned to a's order)."""
    if set(a.names) != set(b.names):
        missing = sorted(set(a.names) ^ set(b.names))
        raise ValueError(
            f"ensemble name sets differ; first mismatches: {missing[:5]}"
        )
    index_b = b.name_index()
    order = [index_b[name] for name in a.names]
    matrix = np.hstack([np.asarray(a.matrix, dtype=np.float64), np.asarray(b.matrix, dtype=np.float64)[order]])
    return DescriptorSet(a.names, matrix, a.provenance + b.provenance + ("concat",))


# ---------------------------------------------------------------------------
# WHTN container
# ---------------------------------------------------------------------------

def write_whitening(model: WhiteningModel, destination) -> None:
    """Persist a WhiteningModel (little-endian f64 payload, round-trip exact)."""
    stream, owned = _open_sink(destination)
    try:
        stream.write(WHTN_MAGIC)
        stream.write(
            struct.pack("<IIId", FORMAT_VERSION, model.input_dim, model.output_dim, model.eps)
        )
        stream.write(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        stream.write(np.ascontiguousarray(model.eigenvalues, dtype="<f8").tobytes())
        stream.write(np.ascontiguousarray(model.projection, dtype="<f8").tobytes())
    finally:
        if owned:
            stream.close()


def read_whitening(source) -> WhiteningModel:
    stream, owned = _open_source(source)
    try:
        magic = _read_exact(stream, 4, "magic")
        if magic != WHTN_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {WHTN_MAGIC!r}")
        version, input_dim, d, eps = struct.unpack("<IIId", _read_exact(stream, 20, "header"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported WHTN version {version}")
        mean = np.frombuffer(_read_exact(stream, input_dim * 8, "mean"), dtype="<f8")
        eigenvalues = np.frombuffer(_read_exact(stream, d * 8, "eigenvalues"), dtype="<f8")
        projection = np.frombuffer(
            _read_exact(stream, d * input_dim * 8, "projection"), dtype="<f8"
        ).reshape(d, input_dim)
    finally:
        if owned:
            stream.close()
    return WhiteningModel(mean=mean, projection=projection, eigenvalues=eigenvalues, eps=eps)
