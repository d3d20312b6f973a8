"""Multilinear PCA: a per-mode orthonormal subspace for image-stream samples.

Samples are centered, each mode's projection map is initialized from the
eigenvectors of that mode's scatter matrix, and the maps are then refined by
alternating optimization of the captured variance ``psi = sum_i ||projected
X_i||_F^2``, which is non-decreasing by construction.  Projection maps are
stored as ``P_d x I_d`` matrices with orthonormal rows, so projecting applies
``U_d`` and expanding applies ``U_d^T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh

from . import fileio
from .tensor_ops import inner, mode_product

SUBSPACE_MAGIC = b"MPCA1"


@dataclass
class TensorSubspace:
    """Fitted multilinear subspace.

    Attributes
    ----------
    factors : list of ndarray
        Projection maps ``U_d`` of shape ``(P_d, I_d)`` with orthonormal rows.
    mean : ndarray
        Mean sample tensor, shape ``(I_1, ..., I_D)``.
    captured_variance : float
        Final value of ``psi``.
    fve_threshold : float
        Fraction-of-variance-explained rule that chose the ``P_d``.
    psi_history : ndarray
        ``psi`` after initialization and after each refinement sweep.
    """

    factors: list
    mean: np.ndarray
    captured_variance: float
    fve_threshold: float
    psi_history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def input_dims(self):
        return self.mean.shape

    @property
    def output_dims(self):
        return tuple(u.shape[0] for u in self.factors)


def _fix_signs(vectors):
    """Flip eigenvector columns so the first non-negligible entry is positive."""
    vectors = np.array(vectors)
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        big = np.abs(col) > 1e-12 * max(np.abs(col).max(), 1e-300)
        if big.any() and col[np.argmax(big)] < 0:
            vectors[:, j] = -col
    return vectors


def _descending_eigh(gram):
    """Eigenpairs of a symmetric matrix, eigenvalues descending, stable ties."""
    vals, vecs = eigh(gram)
    order = np.argsort(-vals, kind="stable")
    return vals[order], _fix_signs(vecs[:, order])


def _stack_unfold(x, mode):
    """Unfold every sample in the (N, I_1, ..., I_D) stack along ``mode``.

    Column order within each sample is irrelevant here: the result feeds
    Gram-matrix accumulation only.
    """
    moved = np.moveaxis(x, mode + 1, 1)
    return moved.reshape(x.shape[0], x.shape[mode + 1], -1)


def _project_stack(x, factors, skip=None):
    """Apply every projection map (except ``skip``) across a sample stack."""
    out = x
    for d, u in enumerate(factors):
        if d == skip:
            continue
        out = np.moveaxis(np.tensordot(u, out, axes=(1, d + 1)), 0, d + 1)
    return out


def _mode_rank(eigenvalues, fve_threshold, floor=0.0):
    """Smallest leading-eigenvalue count capturing ``fve_threshold`` of the mass."""
    w = np.clip(eigenvalues, 0.0, None)
    w[w < max(1e-12 * w.max(initial=0.0), floor, 1e-300)] = 0.0
    total = w.sum()
    if total <= 0.0:
        return 1
    mass = np.cumsum(w) / total
    return int(np.searchsorted(mass, fve_threshold - 1e-12) + 1)


def fit_mpca(samples, fve_threshold=0.95, max_iters=30, tol=1e-6):
    """Fit the multilinear subspace of a list of equally shaped tensors.

    Parameters
    ----------
    samples : sequence of ndarray
        At least two tensors of identical shape.
    fve_threshold : float
        Per-mode fraction of scatter retained when sizing the subspace.
    max_iters : int
        Refinement sweep cap.
    tol : float
        Relative improvement in ``psi`` below which refinement stops.

    Returns
    -------
    TensorSubspace
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not 0.0 < fve_threshold <= 1.0:
        raise ValueError("fve_threshold must lie in (0, 1]")
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    shapes = {np.asarray(s).shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"samples have mixed shapes: {sorted(shapes)}")

    x = np.stack([np.asarray(s, dtype=float) for s in samples])
    mean = x.mean(axis=0)
    # scatter below rounding noise of the centering step counts as zero
    scatter_floor = 1e-26 * float(np.sum(x * x))
    x = x - mean
    ndim = x.ndim - 1

    # initialization: per-mode scatter of the raw centered samples
    factors = []
    for d in range(ndim):
        unfolded = _stack_unfold(x, d)
        gram = np.einsum("nip,njp->ij", unfolded, unfolded)
        vals, vecs = _descending_eigh(gram)
        p_d = _mode_rank(vals, fve_threshold, floor=scatter_floor)
        factors.append(vecs[:, :p_d].T)

    def captured(fs):
        proj = _project_stack(x, fs)
        return float(np.sum(proj**2))

    psi = captured(factors)
    history = [psi]
    for _ in range(max_iters):
        for d in range(ndim):
            partial = _project_stack(x, factors, skip=d)
            unfolded = _stack_unfold(partial, d)
            gram = np.einsum("nip,njp->ij", unfolded, unfolded)
            _, vecs = _descending_eigh(gram)
            factors[d] = vecs[:, : factors[d].shape[0]].T
        psi_new = captured(factors)
        assert psi_new >= psi * (1.0 - 1e-9) - 1e-12, "captured variance decreased"
        improved = psi_new - psi
        psi = psi_new
        history.append(psi)
        if improved < tol * max(psi, 1e-300):
            break

    return TensorSubspace(
        factors=factors,
        mean=mean,
        captured_variance=psi,
        fve_threshold=float(fve_threshold),
        psi_history=np.array(history),
    )


def project(sub, tensor):
    """Center a tensor and map it into the subspace coordinates ``(P_d)``."""
    tensor = np.asarray(tensor, dtype=float)
    if tensor.shape != sub.input_dims:
        raise ValueError(f"expected dims {sub.input_dims}, got {tensor.shape}")
    out = tensor - sub.mean
    for d, u in enumerate(sub.factors):
        out = mode_product(out, u, d)
    return out


def project_many(sub, tensors):
    """Project a sequence of tensors; returns an ``(N, P_1, ..., P_D)`` stack."""
    x = np.stack([np.asarray(t, dtype=float) for t in tensors])
    if x.shape[1:] != sub.input_dims:
        raise ValueError(f"expected dims {sub.input_dims}, got {x.shape[1:]}")
    return _project_stack(x - sub.mean, sub.factors)


def reconstruct(sub, projected):
    """Expand subspace coordinates back to the ambient space and re-add the mean."""
    projected = np.asarray(projected, dtype=float)
    if projected.shape != sub.output_dims:
        raise ValueError(f"expected dims {sub.output_dims}, got {projected.shape}")
    out = projected
    for d, u in enumerate(sub.factors):
        out = mode_product(out, u.T, d)
    return out + sub.mean


def verify_projection_invariance(sub, b_full, s_full):
    """Inner products before and after projecting both tensors (no centering).

    When ``s_full`` lies exactly in the subspace, the two returned values
    agree; their gap otherwise equals the inner product of the two residuals.
    Diagnostic helper backing the dimension-reduction step of the regression.
    """

    def chain(t):
        out = np.asarray(t, dtype=float)
        for d, u in enumerate(sub.factors):
            out = mode_product(out, u, d)
        return out

    return inner(b_full, s_full), inner(chain(b_full), chain(s_full))


def save_subspace(path, sub):
    """Write a fitted subspace to an ``.mpca`` file (bit-exact round-trip)."""
    dims = sub.input_dims
    with open(path, "wb") as f:
        fileio.write_magic(f, SUBSPACE_MAGIC)
        fileio.write_u32(f, [len(dims)])
        fileio.write_u32(f, dims)
        fileio.write_u32(f, sub.output_dims)
        fileio.write_f64(f, [sub.captured_variance, sub.fve_threshold])
        fileio.write_f64(f, sub.mean)
        for u in sub.factors:
            fileio.write_f64(f, u)


def load_subspace(path):
    """Read a subspace written by :func:`save_subspace`."""
    with open(path, "rb") as f:
        fileio.expect_magic(f, SUBSPACE_MAGIC, path)
        (order,) = fileio.read_u32(f, 1)
        dims = fileio.read_u32(f, order)
        out_dims = fileio.read_u32(f, order)
        psi, fve = fileio.read_f64(f, (2,))
        mean = fileio.read_f64(f, tuple(dims))
        factors = [fileio.read_f64(f, (p, i)) for p, i in zip(out_dims, dims)]
    return TensorSubspace(
        factors=factors,
        mean=mean,
        captured_variance=float(psi),
        fve_threshold=float(fve),
        psi_history=np.array([float(psi)]),
    )
