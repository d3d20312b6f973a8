"""Tucker-form penalized location-scale tensor regression.

The coefficient tensor is a core of shape ``(R_1, ..., R_D)`` multiplied
along each mode by a ``P_d x R_d`` factor matrix.  Fitting cycles over the
factor matrices and then the core: with the other pieces fixed, each update
collapses to a linear location-scale model (`solver.solve_block`) whose
predictors come from partially projecting the sample tensors.  The reported
objective is the scale-invariant penalized log-likelihood with every L1 term
divided by sigma:

    ell = -N ln(sigma) + sum_i ln f((y_i - alpha - <B, S_i>) / sigma)
          - lam_core * ||G||_1 / sigma - sum_d lam_d * ||B_d||_1 / sigma
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .cp import (
    _objective,
    _stack_matricize,
    default_penalty,
    relaxation_coefficient,
)
from .distributions import (
    apply_response_transform,
    get_family,
    response_log_jacobian,
)
from .solver import solve_block
from .tensor_ops import (
    hosvd_truncate,
    matricize,
    mode_product,
    tucker_reconstruct,
)

MODEL_MAGIC = b"TKM1"


@dataclass
class TuckerModel:
    """Fitted Tucker-form regression model."""

    alpha: float
    sigma: float
    core: np.ndarray
    factors: list
    family: object
    penalties: np.ndarray
    core_penalty: float
    log_likelihood: float
    n_samples: int
    iterations: int
    restart: int
    kkt: float
    ll_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ranks(self):
        return tuple(self.core.shape)

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)

    def coefficient(self):
        """Dense coefficient tensor."""
        return tucker_reconstruct(self.core, self.factors)

    def location(self, tensors):
        """Model location ``alpha + <B, S_i>`` for a stack of tensors."""
        x = np.asarray(tensors, dtype=float)
        return self.alpha + np.tensordot(x, self.coefficient(), axes=x.ndim - 1)


def _stack_vec(z):
    """Per-sample column-major vectorization of an ``(N, ...)`` stack."""
    rev = z.transpose(0, *range(z.ndim - 1, 0, -1))
    return rev.reshape(z.shape[0], -1)


def _stack_mode_product(z, mat, mode):
    """Mode product with ``mat.T`` applied to every sample of a stack."""
    out = np.tensordot(z, mat, axes=([mode + 1], [0]))
    return np.moveaxis(out, -1, mode + 1)


def tucker_core_predictor(s_tilde, factors):
    """Core-update predictor vector: projects a sample into the rank space.

    Satisfies ``<vec(core), result> == <tucker_reconstruct(core, factors),
    s_tilde>``.
    """
    s = np.asarray(s_tilde, dtype=float)
    if s.ndim != len(factors) or any(
        f.shape[0] != p for f, p in zip(factors, s.shape)
    ):
        raise ValueError("factor shapes do not match the sample tensor")
    z = s
    for d, f in enumerate(factors):
        z = mode_product(z, f.T, d)
    return z.reshape(-1, order="F")


def tucker_factor_predictor(s_tilde, core, factors, mode):
    """Factor-update predictor matrix for one sample and one mode.

    Satisfies ``<factors[mode], result> == <tucker_reconstruct(core,
    factors), s_tilde>``.
    """
    s = np.asarray(s_tilde, dtype=float)
    if s.ndim != len(factors) or any(
        f.shape[0] != p for f, p in zip(factors, s.shape)
    ):
        raise ValueError("factor shapes do not match the sample tensor")
    if tuple(core.shape) != tuple(f.shape[1] for f in factors):
        raise ValueError("core shape does not match factor ranks")
    z = s
    for d, f in enumerate(factors):
        if d != mode:
            z = mode_product(z, f.T, d)
    return matricize(z, mode) @ matricize(core, mode).T


def _balance_scales(core, factors, lam, lam_core):
    """Move magnitude between the core and factors to minimize the penalty.

    One scalar per mode (factor scaled up, core scaled down by the product)
    leaves the coefficient tensor unchanged; the optimum equalizes all D+1
    penalty terms, countering unbounded norm drift between blocks.
    """
    if lam_core <= 0 or not np.all(lam > 0):
        return core, factors
    c_fac = np.array([l * float(np.abs(f).sum()) for l, f in zip(lam, factors)])
    c_core = lam_core * float(np.abs(core).sum())
    if c_core == 0.0 or np.any(c_fac == 0.0):
        return core, factors
    ndim = len(factors)
    target = float(np.exp(
        (np.log(c_core) + np.sum(np.log(c_fac))) / (ndim + 1)
    ))
    scales = target / c_fac
    new_factors = [f * s for f, s in zip(factors, scales)]
    new_core = core / np.prod(scales)
    return new_core, new_factors


def fit_tucker(
    tensors,
    ttf,
    ranks,
    family,
    penalties=None,
    core_penalty=None,
    restarts=10,
    tol=1e-6,
    max_sweeps=200,
    seed=0,
    kkt_tol=1e-6,
    init=None,
):
    """Fit the rank-``(R_1..R_D)`` model by block relaxation with restarts.

    Parameters mirror :func:`tenrul.cp.fit_cp`; ``penalties`` weights the
    factor matrices per mode and ``core_penalty`` the core tensor.  When
    ``init`` is given as ``(core, factors)`` the first restart starts from it
    (the remaining restarts stay random).
    """
    family = get_family(family)
    x = np.asarray(tensors, dtype=float)
    if x.ndim < 2:
        raise ValueError("tensors must be a stack of at least 1-order samples")
    n = x.shape[0]
    dims = x.shape[1:]
    ndim = len(dims)
    ranks = tuple(int(r) for r in np.atleast_1d(ranks))
    if len(ranks) != ndim:
        raise ValueError("one rank per tensor mode is required")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks must all be >= 1")
    if any(r > p for r, p in zip(ranks, dims)):
        raise ValueError("ranks cannot exceed the tensor dimensions")
    y_full = apply_response_transform(family, ttf)
    if y_full.shape != (n,):
        raise ValueError("response length does not match sample count")
    if n < 3:
        raise ValueError("need at least 3 samples to fit location and scale")
    if float(np.std(y_full)) == 0.0:
        raise ValueError("responses are constant; scale is not identifiable")

    if penalties is None:
        penalties = default_penalty(n)
    lam = np.broadcast_to(np.asarray(penalties, dtype=float), (ndim,)).copy()
    lam_core = default_penalty(n) if core_penalty is None else float(core_penalty)
    if np.any(lam < 0) or lam_core < 0:
        raise ValueError("penalties must be non-negative")
    if init is not None:
        init_core = np.asarray(init[0], dtype=float)
        init_factors = [np.asarray(f, dtype=float) for f in init[1]]
        if tuple(init_core.shape) != ranks or any(
            f.shape != (p, r) for f, p, r in zip(init_factors, dims, ranks)
        ):
            raise ValueError("init shapes do not match the requested ranks")

    y_center = float(np.mean(y_full))
    y = y_full - y_center
    y_scale = max(float(np.std(y)), 1e-12)

    # center the predictors too: the block designs lose their dominant
    # common-mean direction (which couples every coefficient to the
    # intercept), and the intercept absorbs <B, mean tensor> exactly
    x_mean = x.mean(axis=0)
    x = x - x_mean

    best = None
    for r_idx, child in enumerate(np.random.SeedSequence(seed).spawn(max(1, restarts))):
        rng = np.random.default_rng(child)
        if init is not None and r_idx == 0:
            core = init_core.copy()
            bfac = [f.copy() for f in init_factors]
        else:
            core = rng.standard_normal(ranks)
            bfac = [np.zeros((dims[0], ranks[0]))]
            bfac += [rng.standard_normal((p, r)) for p, r in zip(dims[1:], ranks[1:])]
        rho = 1.0 / y_scale
        alpha0 = 0.0
        trace = []
        prev_ll = -np.inf
        prev_state = None
        sweeps = 0
        kkt = np.inf
        inner_tol = 1e-2

        def canonical_ll(core_t, factors_t):
            terms = [(lam_core, core_t)] + list(zip(lam, factors_t))
            return _objective(
                y, x, family, alpha0 / rho, 1.0 / rho,
                tucker_reconstruct(core_t, factors_t), terms,
            )

        def block_step(xd, lam_block, warm_flat, carry):
            return solve_block(
                y, xd, family.working, lam_block,
                (warm_flat, rho, alpha0),
                rho_linear=carry, kkt_tol=inner_tol,
            )

        for sweeps in range(1, max_sweeps + 1):
            for d in range(ndim):
                z = x
                for k in range(ndim):
                    if k != d:
                        z = _stack_mode_product(z, bfac[k], k)
                xd = (_stack_matricize(z, d) @ matricize(core, d).T).reshape(n, -1)
                carry = lam_core * float(np.abs(core).sum()) + sum(
                    lam[k] * float(np.abs(bfac[k]).sum()) for k in range(ndim) if k != d
                )
                a, rho, alpha0, info = block_step(
                    xd, lam[d], (rho * bfac[d]).reshape(-1), carry)
                bfac[d] = (a / rho).reshape(bfac[d].shape)
                kkt = info["kkt"]
                ll = info["objective"]
                if trace:
                    slack = 1e-9 * (1.0 + abs(trace[-1])) + 1e-14 * rho * n
                    assert ll >= trace[-1] - slack, (
                        "objective decreased across a block update"
                    )
                trace.append(ll)

            z = x
            for k in range(ndim):
                z = _stack_mode_product(z, bfac[k], k)
            xd = _stack_vec(z)
            carry = sum(lam[k] * float(np.abs(bfac[k]).sum()) for k in range(ndim))
            a, rho, alpha0, info = block_step(
                xd, lam_core, rho * core.reshape(-1, order="F"), carry)
            core = (a / rho).reshape(core.shape, order="F")
            kkt = info["kkt"]
            ll = info["objective"]
            slack = 1e-9 * (1.0 + abs(trace[-1])) + 1e-14 * rho * n
            assert ll >= trace[-1] - slack, (
                "objective decreased across a block update"
            )
            trace.append(ll)
            if not np.isfinite(trace[-1]):
                raise FloatingPointError("objective became non-finite")

            new_core, new_fac = _balance_scales(core, bfac, lam, lam_core)
            if new_core is not core:
                core, bfac = new_core, new_fac
                trace.append(canonical_ll(core, bfac))
            if prev_state is not None:
                d_core = core - prev_state[0]
                d_fac = [bf - pf for bf, pf in zip(bfac, prev_state[1])]
                if d_core.any() or any(dd.any() for dd in d_fac):
                    for beta in (8.0, 4.0, 2.0, 1.0):
                        cand_core = core + beta * d_core
                        cand_fac = [bf + beta * dd for bf, dd in zip(bfac, d_fac)]
                        ll_c = canonical_ll(cand_core, cand_fac)
                        if ll_c > trace[-1] + 1e-12 * (1.0 + abs(trace[-1])):
                            core, bfac = cand_core, cand_fac
                            trace.append(ll_c)
                            break
            prev_state = (core.copy(), [bf.copy() for bf in bfac])
            improved = trace[-1] - prev_ll
            prev_ll = trace[-1]
            if improved < tol and inner_tol <= kkt_tol:
                break
            inner_tol = min(inner_tol, max(kkt_tol, 0.05 * improved))

        candidate = (prev_ll, -r_idx, core, bfac, rho, alpha0, sweeps, kkt, trace)
        if best is None or candidate[:2] > best[:2]:
            best = candidate

    ll, neg_r, core, bfac, rho, alpha0, sweeps, kkt, trace = best
    # report the objective on the observed lifetime scale so values are
    # comparable across identity- and log-scale families
    ll = float(ll) + response_log_jacobian(family, ttf)
    alpha = (alpha0 / rho + y_center
             - float(np.tensordot(tucker_reconstruct(core, bfac), x_mean,
                                  axes=ndim)))
    return TuckerModel(
        alpha=float(alpha),
        sigma=float(1.0 / rho),
        core=core,
        factors=bfac,
        family=family,
        penalties=lam,
        core_penalty=float(lam_core),
        log_likelihood=float(ll),
        n_samples=n,
        iterations=int(sweeps),
        restart=int(-neg_r),
        kkt=float(kkt),
        ll_trace=np.array(trace),
    )


def tucker_log_likelihood(tensors, ttf, model):
    """Re-evaluate the stored objective of a model on raw training data.

    Includes the lifetime-scale change-of-variables term for log families,
    matching ``model.log_likelihood``.
    """
    x = np.asarray(tensors, dtype=float)
    y = apply_response_transform(model.family, ttf)
    terms = [(model.core_penalty, model.core)] + list(
        zip(model.penalties, model.factors))
    value = _objective(y, x, model.family, model.alpha, model.sigma,
                       model.coefficient(), terms)
    return value + response_log_jacobian(model.family, ttf)


def tucker_parameter_count(dims, ranks):
    """Effective parameter count: factor and core entries minus the per-mode
    nonsingular-transformation indeterminacy."""
    dims = tuple(dims)
    ranks = tuple(ranks)
    return (
        sum(p * r for p, r in zip(dims, ranks))
        + int(np.prod(ranks))
        - sum(r * r for r in ranks)
    )


def tucker_bic(model, n_samples=None):
    """Bayesian information criterion ``-2 ell + P_eff ln N``."""
    n = model.n_samples if n_samples is None else int(n_samples)
    p_eff = tucker_parameter_count(model.dims, model.ranks)
    return -2.0 * model.log_likelihood + p_eff * np.log(n)


def entrywise_slopes(tensors, ttf, family):
    """Slope of a single-covariate location-scale fit for every tensor entry."""
    family = get_family(family)
    x = np.asarray(tensors, dtype=float)
    y = apply_response_transform(family, ttf)
    n = x.shape[0]
    if float(np.std(y)) == 0.0:
        raise ValueError("responses are constant; scale is not identifiable")
    yc = y - y.mean()
    flat = x.reshape(n, -1)
    slopes = np.empty(flat.shape[1])
    if family.working == "normal":
        xc = flat - flat.mean(axis=0)
        var = np.einsum("ij,ij->j", xc, xc)
        var[var == 0.0] = np.inf
        slopes = (xc.T @ yc) / var
    else:
        rho0 = 1.0 / max(float(np.std(yc)), 1e-12)
        for j in range(flat.shape[1]):
            col = flat[:, j:j + 1]
            if float(np.std(col)) == 0.0:
                slopes[j] = 0.0
                continue
            a, rho, _, _ = solve_block(
                yc, col, family.working, 0.0, (np.zeros(1), rho0, 0.0))
            slopes[j] = a[0] / rho
    return slopes.reshape(x.shape[1:])


def truncated_hosvd(coefficient, fve_threshold):
    """Per-mode SVD truncation of a coefficient tensor.

    Returns (ranks, core, factors) with orthonormal factor columns; each
    mode keeps the smallest rank whose squared singular values reach the
    threshold fraction of that mode's total.
    """
    b0 = np.asarray(coefficient, dtype=float)
    if not 0.0 < fve_threshold <= 1.0:
        raise ValueError("fve threshold must be in (0, 1]")
    if not np.any(b0):
        raise ValueError("coefficient tensor is identically zero")
    factors = []
    ranks = []
    for d in range(b0.ndim):
        u, s, _ = np.linalg.svd(matricize(b0, d), full_matrices=False)
        mass = np.cumsum(s**2)
        keep = int(np.searchsorted(mass, fve_threshold * mass[-1] * (1 - 1e-12)) + 1)
        keep = min(keep, int(np.sum(s > s[0] * 1e-13)))
        ranks.append(max(keep, 1))
        factors.append(u[:, :ranks[-1]])
    core = b0
    for d, u in enumerate(factors):
        core = mode_product(core, u.T, d)
    return tuple(ranks), core, factors


def hosvd_init(tensors, ttf, family, fve_threshold=0.95):
    """Heuristic ranks and starting point from an entrywise regression field.

    Regresses every tensor entry against the (transformed) response, then
    truncates the resulting coefficient tensor mode by mode.
    """
    slopes = entrywise_slopes(tensors, ttf, family)
    return truncated_hosvd(slopes, fve_threshold)


def select_tucker(
    tensors,
    ttf,
    families,
    ranks="auto",
    penalties=None,
    core_penalty=None,
    restarts=10,
    tol=1e-6,
    seed=0,
    fve_threshold=0.95,
    kkt_tol=1e-6,
    max_sweeps=200,
    init="relaxation",
):
    """Pick (family, ranks) by BIC over a rank grid or the HOSVD heuristic.

    ``ranks`` is either an iterable of rank tuples (grid mode) or the string
    ``"auto"`` (one HOSVD-initialized fit per family).  In grid mode,
    ``init="relaxation"`` (default) seeds each cell's first restart from the
    rank-truncated unfactorized estimate (computed once per family);
    ``init="random"`` keeps purely random restarts.

    Returns
    -------
    best_family : str
    best_ranks : tuple
    table : list of dict
    """
    families = list(families)
    if not families:
        raise ValueError("family grid must be non-empty")
    auto = isinstance(ranks, str)
    if auto and ranks != "auto":
        raise ValueError(f"unknown rank mode {ranks!r}")
    if not auto:
        ranks = [tuple(int(r) for r in rk) for rk in ranks]
        if not ranks:
            raise ValueError("rank grid must be non-empty")
    if init not in ("relaxation", "random"):
        raise ValueError("init must be 'relaxation' or 'random'")

    table = []
    best = None
    for fam in families:
        fam_name = get_family(fam).name
        if auto:
            try:
                cell_ranks, core0, factors0 = hosvd_init(
                    tensors, ttf, fam, fve_threshold)
                cells = [(cell_ranks, (core0, factors0))]
            except (ValueError, FloatingPointError) as exc:
                table.append({"family": fam_name, "ranks": None,
                              "seed": int(seed), "error": str(exc)})
                continue
        else:
            relaxed = None
            if init == "relaxation":
                try:
                    relaxed = relaxation_coefficient(tensors, ttf, fam)
                except (ValueError, FloatingPointError):
                    relaxed = None
            cells = []
            for rk in ranks:
                cell_init = None
                if relaxed is not None:
                    try:
                        cell_init = hosvd_truncate(relaxed, rk)
                    except ValueError:
                        # out-of-range tuple: let fit_tucker report it
                        cell_init = None
                cells.append((rk, cell_init))
        for cell_ranks, cell_init in cells:
            row = {"family": fam_name, "ranks": tuple(cell_ranks),
                   "seed": int(seed)}
            try:
                model = fit_tucker(
                    tensors, ttf, cell_ranks, fam,
                    penalties=penalties, core_penalty=core_penalty,
                    restarts=restarts, tol=tol, seed=seed, init=cell_init,
                    kkt_tol=kkt_tol, max_sweeps=max_sweeps,
                )
                row.update(
                    bic=float(tucker_bic(model)),
                    ll=float(model.log_likelihood),
                    iters=int(model.iterations),
                )
            except (ValueError, FloatingPointError) as exc:
                row["error"] = str(exc)
                table.append(row)
                continue
            table.append(row)
            if best is None or row["bic"] < best[0]:
                best = (row["bic"], fam_name, tuple(cell_ranks))
    if best is None:
        raise ValueError("every selection cell failed; see table for reasons")
    return best[1], best[2], table


def rank_grid(per_mode, ndim):
    """All rank tuples with each entry in ``per_mode`` (e.g. {1..3}^D)."""
    return list(itertools.product(sorted(int(r) for r in per_mode), repeat=ndim))


def save_tucker(path, model):
    """Write the model to a ``.tkm`` file plus a JSON diagnostics sidecar."""
    name = model.family.name.encode()
    with open(path, "wb") as f:
        fileio.write_magic(f, MODEL_MAGIC)
        fileio.write_u32(f, [len(name)])
        f.write(name)
        fileio.write_f64(f, [model.alpha, model.sigma])
        fileio.write_u32(f, [len(model.dims)])
        fileio.write_u32(f, model.dims)
        fileio.write_u32(f, model.ranks)
        fileio.write_f64(f, model.penalties)
        fileio.write_f64(f, [model.core_penalty])
        fileio.write_f64(f, model.core)
        for fac in model.factors:
            fileio.write_f64(f, fac)
    sidecar = {
        "log_likelihood": model.log_likelihood,
        "bic": tucker_bic(model),
        "iterations": model.iterations,
        "restart": model.restart,
        "kkt": model.kkt,
        "n_samples": model.n_samples,
        "family": model.family.name,
        "ranks": list(model.ranks),
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_tucker(path):
    """Read a model written by :func:`save_tucker`."""
    with open(path, "rb") as f:
        fileio.expect_magic(f, MODEL_MAGIC, path)
        (name_len,) = fileio.read_u32(f, 1)
        family = get_family(f.read(name_len).decode())
        alpha, sigma = fileio.read_f64(f, (2,))
        (order,) = fileio.read_u32(f, 1)
        dims = fileio.read_u32(f, order)
        ranks = fileio.read_u32(f, order)
        lam = fileio.read_f64(f, (order,))
        (lam_core,) = fileio.read_f64(f, (1,))
        core = fileio.read_f64(f, tuple(ranks))
        factors = [fileio.read_f64(f, (p, r)) for p, r in zip(dims, ranks)]
    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    return TuckerModel(
        alpha=float(alpha),
        sigma=float(sigma),
        core=core,
        factors=factors,
        family=family,
        penalties=lam,
        core_penalty=float(lam_core),
        log_likelihood=float(sidecar["log_likelihood"]),
        n_samples=int(sidecar["n_samples"]),
        iterations=int(sidecar["iterations"]),
        restart=int(sidecar["restart"]),
        kkt=float(sidecar["kkt"]),
        ll_trace=np.zeros(0),
    )
