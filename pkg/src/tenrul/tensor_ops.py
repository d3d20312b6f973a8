"""Dense tensor algebra with column-major (Fortran) vectorization conventions.

All operations treat a tensor of shape ``(I_1, ..., I_D)`` as a multilinear
array whose vectorization stacks entries with the *first* index varying
fastest, i.e. ``vec(T)[i_1 + I_1*i_2 + I_1*I_2*i_3 + ...] = T[i_1, i_2, ...]``.
Mode-``d`` matricization places the mode-``d`` fibers as columns, ordered
lexicographically over the remaining indices with the lowest-numbered mode
varying fastest.  Kronecker / Khatri-Rao chains used by the low-rank
reconstructions run over modes in descending order ``(D, D-1, ..., 1)`` so
that ``vec`` identities hold exactly.
"""

from __future__ import annotations

from functools import reduce

import numpy as np


def vec(tensor):
    """Vectorize a tensor in column-major (first index fastest) order.

    Parameters
    ----------
    tensor : ndarray
        Input array of any order.

    Returns
    -------
    ndarray
        1-D array of length ``prod(tensor.shape)``.
    """
    return np.asarray(tensor).reshape(-1, order="F")


def unvec(v, shape):
    """Inverse of :func:`vec`: reshape a flat vector back to ``shape``."""
    v = np.asarray(v)
    if v.size != int(np.prod(shape)):
        raise ValueError(f"cannot reshape {v.size} values into {tuple(shape)}")
    return v.reshape(shape, order="F")


def matricize(tensor, mode):
    """Mode-``mode`` matricization (unfolding) of a tensor.

    Columns are the mode-``mode`` fibers, ordered lexicographically over the
    remaining indices with the lowest remaining mode varying fastest.

    Parameters
    ----------
    tensor : ndarray
        Input tensor of shape ``(I_1, ..., I_D)``.
    mode : int
        Zero-based mode index.

    Returns
    -------
    ndarray
        Matrix of shape ``(I_mode, prod of the other dims)``.
    """
    tensor = np.asarray(tensor)
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1, order="F")


def dematricize(matrix, mode, shape):
    """Fold a mode-``mode`` matricization back into a tensor of ``shape``."""
    shape = tuple(shape)
    rest = shape[:mode] + shape[mode + 1:]
    folded = np.asarray(matrix).reshape((shape[mode],) + rest, order="F")
    return np.moveaxis(folded, 0, mode)


def mode_product(tensor, matrix, mode):
    """Mode-``mode`` product ``T x_mode M`` of a tensor with a matrix.

    ``matrix`` has shape ``(J, I_mode)``; entry ``[..., j, ...]`` of the
    result is ``sum_i matrix[j, i] * tensor[..., i, ...]`` along ``mode``.
    """
    out = np.tensordot(matrix, tensor, axes=(1, mode))
    return np.moveaxis(out, 0, mode)


def inner(a, b):
    """Sum of elementwise products of two equally shaped tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.reshape(-1), b.reshape(-1)))


def kron_chain(matrices):
    """Kronecker product of a sequence of matrices, left to right."""
    return reduce(np.kron, matrices)


def khatri_rao(a, b):
    """Column-wise Kronecker (Khatri-Rao) product of two matrices.

    Parameters
    ----------
    a, b : ndarray
        Matrices with the same number of columns, shapes ``(m, R)``/``(n, R)``.

    Returns
    -------
    ndarray
        Matrix of shape ``(m * n, R)`` whose column ``r`` is
        ``kron(a[:, r], b[:, r])``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible shapes: {a.shape} vs {b.shape}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def khatri_rao_chain(matrices):
    """Khatri-Rao product of a sequence of matrices, left to right."""
    return reduce(khatri_rao, matrices)


def descending_omit(matrices, omit):
    """Matrices ordered by descending mode with one mode left out.

    Helper for the unfolded low-rank identities, which pair the mode-``d``
    matricization with a chain over modes ``(D, ..., d+1, d-1, ..., 1)``.
    """
    return [matrices[k] for k in reversed(range(len(matrices))) if k != omit]


def cp_reconstruct(factors):
    """Tensor represented by CP factor matrices.

    Parameters
    ----------
    factors : sequence of ndarray
        Matrices ``F_d`` of shape ``(P_d, R)`` sharing the column count
        ``R``.  The result is ``sum_r F_1[:, r] o F_2[:, r] o ...`` where
        ``o`` is the outer product.

    Returns
    -------
    ndarray
        Tensor of shape ``(P_1, ..., P_D)``.
    """
    shape = tuple(f.shape[0] for f in factors)
    if len(factors) == 1:
        return factors[0].sum(axis=1)
    chain = khatri_rao_chain(list(reversed(factors)))
    return unvec(chain.sum(axis=1), shape)


def tucker_reconstruct(core, factors):
    """Tensor represented by a Tucker core and factor matrices.

    Parameters
    ----------
    core : ndarray
        Core tensor of shape ``(R_1, ..., R_D)``.
    factors : sequence of ndarray
        Matrices ``F_d`` of shape ``(P_d, R_d)``.

    Returns
    -------
    ndarray
        Tensor of shape ``(P_1, ..., P_D)``.
    """
    out = np.asarray(core)
    for d, f in enumerate(factors):
        out = mode_product(out, f, d)
    return out


def hosvd_truncate(tensor, ranks):
    """Best-effort Tucker approximation by truncated per-mode SVD.

    Parameters
    ----------
    tensor : ndarray
        Dense tensor of shape ``(P_1, ..., P_D)``.
    ranks : sequence of int
        Target rank per mode, each within ``1..P_d``.

    Returns
    -------
    (core, factors)
        ``factors[d]`` is ``(P_d, R_d)`` with orthonormal columns and
        ``core`` is ``tensor`` contracted with their transposes.
    """
    tensor = np.asarray(tensor, dtype=float)
    if len(ranks) != tensor.ndim:
        raise ValueError("one rank per mode is required")
    factors = []
    for d, r in enumerate(ranks):
        if not 1 <= r <= tensor.shape[d]:
            raise ValueError(f"mode {d} rank {r} outside 1..{tensor.shape[d]}")
        u, _, _ = np.linalg.svd(matricize(tensor, d), full_matrices=False)
        factors.append(u[:, :r])
    core = tensor
    for d, u in enumerate(factors):
        core = mode_product(core, u.T, d)
    return core, factors


def cp_approximate(tensor, rank, iters=50):
    """Best-effort rank-``rank`` CP approximation of a dense tensor.

    Plain alternating least squares started from the truncated per-mode
    SVD; deterministic.  Used to compress a dense coefficient estimate
    into factor matrices (e.g. as a starting point for a factorized fit),
    so a locally optimal approximation is sufficient.

    Returns
    -------
    list of ndarray
        Factor matrices ``(P_d, rank)``.
    """
    tensor = np.asarray(tensor, dtype=float)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    dims = tensor.shape
    if len(dims) == 1:
        # a vector is "rank 1" exactly; spread it over the first column
        out = np.zeros((dims[0], rank))
        out[:, 0] = tensor
        return [out]
    scale = np.linalg.norm(tensor) ** (1.0 / len(dims)) or 1.0
    factors = []
    for d in range(len(dims)):
        u, _, _ = np.linalg.svd(matricize(tensor, d), full_matrices=False)
        k = min(rank, u.shape[1])
        f = u[:, :k]
        if k < rank:
            # more components than singular directions: pad with a flat
            # column; ALS reshapes it against the residual immediately
            f = np.hstack([f, np.ones((dims[d], rank - k)) / np.sqrt(dims[d])])
        factors.append(f * scale)
    unfoldings = [matricize(tensor, d) for d in range(len(dims))]
    for _ in range(iters):
        for d in range(len(dims)):
            kr = khatri_rao_chain(descending_omit(factors, d))
            factors[d] = unfoldings[d] @ kr @ np.linalg.pinv(kr.T @ kr)
    return factors
