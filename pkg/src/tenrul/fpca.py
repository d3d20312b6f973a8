"""Mean-intensity principal-component baseline.

Each image stream is collapsed to a per-frame mean-intensity signal; the
signals' sample covariance is eigendecomposed, scores on the leading
components (chosen by fraction of variance explained) become a vector
covariate, and the same location-scale likelihood machinery regresses them
against the failure times.  On an equally spaced time grid this coincides
with basis-expansion functional PCA up to quadrature weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio
from .cp import fit_cp

BASIS_MAGIC = b"FPCA1"


def to_intensity(stream):
    """Per-frame spatial mean of an image stream (trailing time axis)."""
    stream = np.asarray(stream, dtype=float)
    if stream.ndim != 3:
        raise ValueError(
            f"expected an image-by-time stream, got {stream.ndim} dims")
    return stream.mean(axis=(0, 1))


@dataclass
class FpcaBasis:
    """Principal-component basis for fixed-length intensity signals.

    ``components`` holds orthonormal columns; ``eigenvalues`` are the
    matching covariance eigenvalues, descending and non-negative.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    fve_threshold: float

    @property
    def signal_length(self):
        return self.mean.shape[0]

    @property
    def n_components(self):
        return self.components.shape[1]


def fit_fpca(signals, fve_threshold=0.95):
    """Eigendecompose the signals' sample covariance and keep q by FVE.

    Parameters
    ----------
    signals : ndarray (N, n)
        One fixed-length signal per row; N >= 2.
    fve_threshold : float in (0, 1]
        Smallest leading eigenvalue mass to retain (clamped to the
        covariance's numerical rank).
    """
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 2 or signals.shape[0] < 2:
        raise ValueError("need at least two equal-length signals")
    if not 0.0 < fve_threshold <= 1.0:
        raise ValueError(f"fve threshold must be in (0, 1], got {fve_threshold}")
    mean = signals.mean(axis=0)
    centered = signals - mean
    cov = centered.T @ centered / (signals.shape[0] - 1)
    if not np.any(cov):
        raise ValueError("signals have no variance to decompose")
    w, v = np.linalg.eigh(cov)
    w = np.clip(w[::-1], 0.0, None)
    v = v[:, ::-1]
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("signals have no variance to decompose")
    cums = np.cumsum(w)
    keep = int(np.searchsorted(cums, fve_threshold * total * (1 - 1e-12))) + 1
    rank = int(np.count_nonzero(w > w[0] * 1e-12))
    keep = max(1, min(keep, rank))
    components = v[:, :keep].copy()
    for j in range(keep):
        pivot = int(np.argmax(np.abs(components[:, j])))
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    return FpcaBasis(
        mean=mean,
        components=components,
        eigenvalues=w[:keep].copy(),
        fve_threshold=float(fve_threshold),
    )


def score(signals, basis):
    """Project signals onto the basis: centered rows times the components."""
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 2 or signals.shape[1] != basis.signal_length:
        raise ValueError(
            f"signals of length {basis.signal_length} expected, "
            f"got shape {signals.shape}")
    return (signals - basis.mean) @ basis.components


def reconstruct(scores, basis):
    """Signals represented by the given scores (inverse of :func:`score`)."""
    scores = np.asarray(scores, dtype=float)
    return basis.mean + scores @ basis.components.T


def fit_fpca_lls(scores, ttf, family, penalty=0.0, restarts=10, tol=1e-6,
                 seed=0):
    """Location-scale regression of failure times on component scores.

    Reuses the rank-one tensor solver with the score matrix as a single
    vector-valued covariate mode; unpenalized by default.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ValueError("scores must form a (samples, components) matrix")
    return fit_cp(scores, ttf, 1, family, penalties=float(penalty),
                  restarts=restarts, tol=tol, seed=seed)


def save_basis(path, basis):
    """Write a basis to the binary ``.fpca`` format."""
    with open(path, "wb") as f:
        fileio.write_magic(f, BASIS_MAGIC)
        fileio.write_u32(f, [basis.signal_length, basis.n_components])
        fileio.write_f64(f, np.array([basis.fve_threshold]))
        fileio.write_f64(f, basis.mean)
        fileio.write_f64(f, basis.eigenvalues)
        fileio.write_f64(f, basis.components)


def load_basis(path):
    """Read a basis written by :func:`save_basis`."""
    with open(path, "rb") as f:
        fileio.expect_magic(f, BASIS_MAGIC, path)
        n, q = fileio.read_u32(f, 2)
        fve = float(fileio.read_f64(f, (1,))[0])
        mean = fileio.read_f64(f, (n,))
        eigenvalues = fileio.read_f64(f, (q,))
        components = fileio.read_f64(f, (n, q))
    return FpcaBasis(mean=mean, components=components,
                     eigenvalues=eigenvalues, fve_threshold=fve)
