"""CP-form penalized location-scale tensor regression.

The coefficient tensor is constrained to rank ``R`` (sum of R outer
products).  Fitting cycles over the factor matrices: with all but one factor
fixed, the regression collapses to a linear location-scale model whose
predictor matrix pairs the sample's mode-``d`` matricization with the
Khatri-Rao product of the other factors, solved in the concave scaled
parameterization (`solver.solve_block`).  The objective reported everywhere
is the scale-invariant penalized log-likelihood

    ell = -N ln(sigma) + sum_i ln f((y_i - alpha - <B, S_i>) / sigma)
          - sum_d lam_d * ||B_d||_1 / sigma
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .distributions import (
    apply_response_transform,
    get_family,
    log_density,
    response_log_jacobian,
)
from .solver import solve_block
from .tensor_ops import (
    cp_approximate,
    cp_reconstruct,
    descending_omit,
    khatri_rao_chain,
    matricize,
)

MODEL_MAGIC = b"CPM1"

BIC_TABLE_COLUMNS = ["family", "rank_tuple", "bic", "ll", "iters", "seed"]


@dataclass
class CpModel:
    """Fitted rank-``R`` regression model.

    ``factors[d]`` has shape ``(P_d, R)``; the coefficient tensor is their
    CP reconstruction.  ``log_likelihood`` is the penalized objective on the
    fitting scale (log scale for lifetime families).
    """

    alpha: float
    sigma: float
    factors: list
    rank: int
    family: object
    penalties: np.ndarray
    log_likelihood: float
    n_samples: int
    iterations: int
    restart: int
    kkt: float
    ll_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)

    def coefficient(self):
        """Dense coefficient tensor."""
        return cp_reconstruct(self.factors)

    def location(self, tensors):
        """Model location ``alpha + <B, S_i>`` for a stack of tensors."""
        x = np.asarray(tensors, dtype=float)
        return self.alpha + np.tensordot(x, self.coefficient(), axes=x.ndim - 1)


def _khatri_rao_omit(factors, mode):
    """Khatri-Rao chain of all factors but ``mode`` (ones row if none remain)."""
    rest = descending_omit(factors, mode)
    if not rest:
        return np.ones((1, factors[mode].shape[1]))
    return khatri_rao_chain(rest)


def cp_predictor_matrix(s_tilde, factors, mode):
    """Predictor matrix of one sample for the mode-``mode`` factor update.

    Satisfies ``<B_mode, result> == <cp_reconstruct(factors), s_tilde>``.
    """
    cols = {f.shape[1] for f in factors}
    if len(cols) != 1:
        raise ValueError("factor matrices must share the column count")
    return matricize(s_tilde, mode) @ _khatri_rao_omit(factors, mode)


def _stack_matricize(x, mode):
    """Per-sample mode matricization of an ``(N, P_1, ..., P_D)`` stack."""
    moved = np.moveaxis(x, mode + 1, 1)
    # column-major flatten of the remaining axes == C-order flatten reversed
    rev = moved.transpose(0, 1, *range(moved.ndim - 1, 1, -1))
    return rev.reshape(moved.shape[0], moved.shape[1], -1)


def _objective(y, x, family, alpha, sigma, coefficient, penalty_terms):
    n = y.size
    loc = np.tensordot(x, coefficient, axes=x.ndim - 1)
    eps = (y - alpha - loc) / sigma
    value = -n * np.log(sigma) + float(np.sum(log_density(family.working, eps)))
    value -= sum(lam * float(np.abs(block).sum()) for lam, block in penalty_terms) / sigma
    return value


def cp_log_likelihood(tensors, ttf, model):
    """Re-evaluate the stored objective of a model on raw training data.

    Includes the lifetime-scale change-of-variables term for log families,
    matching ``model.log_likelihood``.
    """
    x = np.asarray(tensors, dtype=float)
    y = apply_response_transform(model.family, ttf)
    terms = list(zip(model.penalties, model.factors))
    value = _objective(y, x, model.family, model.alpha, model.sigma,
                       model.coefficient(), terms)
    return value + response_log_jacobian(model.family, ttf)


def default_penalty(n_samples):
    """Per-mode L1 weight used when none is given."""
    return 0.01 * n_samples


def relaxation_coefficient(
    tensors,
    ttf,
    family,
    penalty=0.03,
    kkt_tol=1e-3,
    max_iter=1000,
):
    """Coefficient tensor of the unfactorized penalized regression.

    Dropping the low-rank constraint makes the scaled-parameter problem
    jointly concave, so this estimate is basin-free: a fixed-budget proximal
    solve from zero always lands near the same point.  Compressing it with
    :func:`tenrul.tensor_ops.cp_approximate` (or an SVD truncation) gives a
    deterministic starting point for the factorized fits, whose random
    restarts alone are easily trapped when the noise scale is small relative
    to the location spread.

    The L1 ``penalty`` must be positive: with more parameters than samples
    the unpenalized likelihood is unbounded (any interpolating coefficient
    sends the scale to zero).

    Returns
    -------
    ndarray
        Dense coefficient tensor with the sample dimensions.
    """
    family = get_family(family)
    if penalty <= 0.0:
        raise ValueError("relaxation penalty must be positive")
    x = np.asarray(tensors, dtype=float)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    flat = flat - flat.mean(axis=0)
    y = apply_response_transform(family, ttf)
    y = y - y.mean()
    warm = (np.zeros(flat.shape[1]), 1.0 / max(float(np.std(y)), 1e-12), 0.0)
    a, rho, _, _ = solve_block(
        y, flat, family.working, penalty, warm,
        kkt_tol=kkt_tol, max_iter=max_iter,
    )
    return (a / rho).reshape(x.shape[1:])


def _balance_components(factors, lam):
    """Rescale each component across modes to minimize the L1 penalty.

    The coefficient tensor is unchanged (scales multiply to one per
    component), so the likelihood is unchanged while the penalty can only
    shrink; components with an all-zero mode vector contribute nothing and
    are zeroed outright.  This counteracts the degenerate drift where
    components grow in magnitude while cancelling each other.
    """
    if not np.all(lam > 0):
        return factors
    ndim = len(factors)
    rank = factors[0].shape[1]
    norms = np.array([[lam[d] * np.abs(factors[d][:, r]).sum() for r in range(rank)]
                      for d in range(ndim)])
    out = [f.copy() for f in factors]
    for r in range(rank):
        col = norms[:, r]
        if np.any(col == 0.0):
            for d in range(ndim):
                out[d][:, r] = 0.0
            continue
        target = float(np.exp(np.mean(np.log(col))))
        for d in range(ndim):
            out[d][:, r] *= target / col[d]
    return out


def fit_cp(
    tensors,
    ttf,
    rank,
    family,
    penalties=None,
    restarts=10,
    tol=1e-6,
    max_sweeps=200,
    seed=0,
    kkt_tol=1e-6,
    init_factors=None,
):
    """Fit the rank-``rank`` model by block relaxation with random restarts.

    Parameters
    ----------
    tensors : ndarray (N, P_1, ..., P_D) or sequence of tensors
        Projected predictor samples.
    ttf : ndarray (N,)
        Raw time-to-failure responses (transformed internally per family).
    rank : int
        CP rank, >= 1.
    family : str or Family
        Error distribution.
    penalties : float or sequence of D floats, optional
        L1 weights per mode; default ``0.01 * N`` shared.
    restarts : int
        Random initializations; the best final objective wins
        (ties broken toward the lower restart index).
    tol : float
        Stop a restart when a full sweep improves the objective by less.
    init_factors : optional
        Explicit starting factors: either one list of D arrays (P_d, rank)
        used for the first restart, or a sequence of such lists consumed by
        the first restarts in order; remaining restarts are random as usual.

    Returns
    -------
    CpModel
    """
    family = get_family(family)
    x = np.asarray(tensors, dtype=float)
    if x.ndim < 2:
        raise ValueError("tensors must be a stack of at least 1-order samples")
    n = x.shape[0]
    dims = x.shape[1:]
    ndim = len(dims)
    if rank < 1:
        raise ValueError("rank must be >= 1")
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
    if np.any(lam < 0):
        raise ValueError("penalties must be non-negative")

    # center the response: the intercept absorbs the shift exactly and the
    # scaled-parameter subproblems start far better conditioned
    y_center = float(np.mean(y_full))
    y = y_full - y_center
    y_scale = max(float(np.std(y)), 1e-12)

    # center the predictors too: the block designs lose their dominant
    # common-mean direction (which couples every coefficient to the
    # intercept), and the intercept absorbs <B, mean tensor> exactly
    x_mean = x.mean(axis=0)
    x = x - x_mean

    mats = [_stack_matricize(x, d) for d in range(ndim)]

    inits = []
    if init_factors is not None:
        pool = [init_factors] if isinstance(init_factors[0], np.ndarray) else init_factors
        for cand in pool:
            cand = [np.asarray(f, dtype=float) for f in cand]
            if len(cand) != ndim or any(
                f.shape != (p, rank) for f, p in zip(cand, dims)
            ):
                raise ValueError("init_factors shapes do not match data dims/rank")
            inits.append(cand)

    best = None
    n_starts = max(1, restarts, len(inits))
    for r_idx, child in enumerate(np.random.SeedSequence(seed).spawn(n_starts)):
        rng = np.random.default_rng(child)
        if r_idx < len(inits):
            bfac = [f.copy() for f in inits[r_idx]]
        else:
            bfac = [np.zeros((dims[0], rank))]
            bfac += [rng.standard_normal((p, rank)) for p in dims[1:]]
        rho = 1.0 / y_scale
        alpha0 = 0.0
        trace = []
        prev_ll = -np.inf
        sweeps = 0
        kkt = np.inf
        prev_factors = None
        # early sweeps solve the blocks loosely; convergence is only declared
        # after a sweep run at the full tolerance (each solve still starts at
        # the previous point and only ascends, so the trace stays monotone)
        inner_tol = 1e-2
        for sweeps in range(1, max_sweeps + 1):
            for d in range(ndim):
                xd = (mats[d] @ _khatri_rao_omit(bfac, d)).reshape(n, -1)
                carry = sum(
                    lam[k] * float(np.abs(bfac[k]).sum()) for k in range(ndim) if k != d
                )
                warm = ((rho * bfac[d]).reshape(-1), rho, alpha0)
                a, rho, alpha0, info = solve_block(
                    y, xd, family.working, lam[d], warm,
                    rho_linear=carry, kkt_tol=inner_tol,
                )
                bfac[d] = (a / rho).reshape(bfac[d].shape)
                kkt = info["kkt"]
                # full objective: the block subproblem equals it exactly
                ll = info["objective"]
                if trace:
                    # the rho term covers rounding between equal-value
                    # evaluation routes, which grows with 1/sigma
                    slack = 1e-9 * (1.0 + abs(trace[-1])) + 1e-14 * rho * n
                    assert ll >= trace[-1] - slack, (
                        "objective decreased across a block update"
                    )
                trace.append(ll)
            if not np.isfinite(trace[-1]):
                raise FloatingPointError("objective became non-finite")
            balanced = _balance_components(bfac, lam)
            if any((bf != nf).any() for bf, nf in zip(bfac, balanced)):
                bfac = balanced
                trace.append(_objective(
                    y, x, family, alpha0 / rho, 1.0 / rho,
                    cp_reconstruct(bfac), zip(lam, bfac),
                ))
            # sweep-to-sweep extrapolation, accepted only when the exact
            # objective improves; this cuts through the slow nearly-collinear
            # regime of alternating updates while preserving monotone ascent
            if prev_factors is not None:
                delta = [bf - pf for bf, pf in zip(bfac, prev_factors)]
                if any(dd.any() for dd in delta):
                    for beta in (8.0, 4.0, 2.0, 1.0):
                        cand = [bf + beta * dd for bf, dd in zip(bfac, delta)]
                        ll_c = _objective(
                            y, x, family, alpha0 / rho, 1.0 / rho,
                            cp_reconstruct(cand), zip(lam, cand),
                        )
                        if ll_c > trace[-1] + 1e-12 * (1.0 + abs(trace[-1])):
                            bfac = cand
                            trace.append(ll_c)
                            break
            prev_factors = [bf.copy() for bf in bfac]
            improved = trace[-1] - prev_ll
            prev_ll = trace[-1]
            if improved < tol and inner_tol <= kkt_tol:
                break
            inner_tol = min(inner_tol, max(kkt_tol, 0.05 * improved))
        candidate = (prev_ll, -r_idx, bfac, rho, alpha0, sweeps, kkt, trace)
        if best is None or candidate[:2] > best[:2]:
            best = candidate

    ll, neg_r, bfac, rho, alpha0, sweeps, kkt, trace = best
    sigma = 1.0 / rho
    alpha = (alpha0 / rho + y_center
             - float(np.tensordot(cp_reconstruct(bfac), x_mean, axes=ndim)))
    # report the objective on the observed lifetime scale so values are
    # comparable across identity- and log-scale families
    ll = float(ll) + response_log_jacobian(family, ttf)
    model = CpModel(
        alpha=float(alpha),
        sigma=float(sigma),
        factors=bfac,
        rank=int(rank),
        family=family,
        penalties=lam,
        log_likelihood=float(ll),
        n_samples=n,
        iterations=int(sweeps),
        restart=int(-neg_r),
        kkt=float(kkt),
        ll_trace=np.array(trace),
    )
    return model


def cp_parameter_count(dims, rank):
    """Effective parameter count: factor entries minus scaling indeterminacy."""
    dims = tuple(dims)
    if rank == 0:
        return 0
    if len(dims) == 2:
        return rank * (dims[0] + dims[1]) - rank**2
    return rank * (sum(dims) - len(dims) + 1)


def cp_bic(model, n_samples=None):
    """Bayesian information criterion ``-2 ell + P_eff ln N``."""
    n = model.n_samples if n_samples is None else int(n_samples)
    return -2.0 * model.log_likelihood + cp_parameter_count(model.dims, model.rank) * np.log(n)


def _truncation_inits(factors, rank, cap=6):
    """Column-subset truncations of a fitted higher-rank factor set."""
    from itertools import combinations, islice

    higher = factors[0].shape[1]
    subsets = islice(combinations(range(higher), rank), cap)
    return [[f[:, list(keep)].copy() for f in factors] for keep in subsets]


def _lift_init(factors, rank, rng):
    """Pad a fitted lower-rank factor set with small random extra columns."""
    out = []
    for f in factors:
        extra = rank - f.shape[1]
        scale = 0.1 * (np.linalg.norm(f) / np.sqrt(f.size) + 1e-12)
        out.append(np.hstack([f, scale * rng.standard_normal((f.shape[0], extra))]))
    return out


def cp_init_pool(tensors, ttf, rank, family, penalties=None, restarts=2,
                 tol=1e-6, seed=0, kkt_tol=1e-6, max_sweeps=200):
    """Structured starting points for a single rank-``rank`` fit.

    The block-relaxation objective has spurious stationary points that trap
    most random (and even oracle) starts, so a single-rank fit benefits from
    the same pool :func:`select_cp_rank` uses: the rank-truncated
    unfactorized estimate plus column subsets of a one-rank-higher fit.
    Returns a (possibly empty) list suitable for ``fit_cp(init_factors=...)``;
    failures of either pool source are silently skipped.
    """
    try:
        relaxed = relaxation_coefficient(tensors, ttf, family)
    except (ValueError, FloatingPointError):
        return []
    pool = [cp_approximate(relaxed, rank)]
    try:
        higher = fit_cp(
            tensors, ttf, rank + 1, family, penalties=penalties,
            restarts=restarts, tol=tol, seed=seed, kkt_tol=kkt_tol,
            max_sweeps=max_sweeps,
            init_factors=cp_approximate(relaxed, rank + 1))
        pool.extend(_truncation_inits(higher.factors, rank))
    except (ValueError, FloatingPointError):
        pass
    return pool


def select_cp_rank(
    tensors,
    ttf,
    families,
    ranks,
    penalties=None,
    restarts=10,
    tol=1e-6,
    seed=0,
    kkt_tol=1e-6,
    max_sweeps=200,
    init="relaxation",
):
    """Fit every (family, rank) cell and pick the smallest BIC.

    The block-relaxation objective has spurious stationary points, so with
    ``init="relaxation"`` (default) each cell is fitted from a pool of
    structured starts and the best final objective wins:

    * the rank-truncated unfactorized estimate
      (:func:`relaxation_coefficient`, computed once per family);
    * column subsets of the already-fitted next-higher rank in the same
      family (ranks are fitted in descending order);
    * the same-rank factors from the first family fitted, which transfer
      across error distributions;
    * random restarts to fill the requested ``restarts`` budget (always at
      least one).

    A final ascending pass refits any rank whose objective fell below the
    rank nested inside it, starting from that lower rank's factors padded
    with small random columns.  ``init="random"`` uses purely random
    restarts.

    Returns
    -------
    best_family : str
    best_rank : int
    table : list of dict
        One row per requested cell: family, rank, bic, ll, iters, seed,
        and an ``error`` message for cells that failed to fit.
    """
    families = list(families)
    ranks = sorted(set(int(r) for r in ranks), reverse=True)
    if not families or not ranks:
        raise ValueError("family and rank grids must be non-empty")
    if init not in ("relaxation", "random"):
        raise ValueError("init must be 'relaxation' or 'random'")
    table = []
    best = None
    shared = {}  # rank -> factors from the first family that fitted it
    lift_rng = np.random.default_rng(np.random.SeedSequence((int(seed), 97)))

    def fit_cell(fam, rank, pool, n_starts, row):
        try:
            model = fit_cp(
                tensors, ttf, rank, fam,
                penalties=penalties, restarts=n_starts, tol=tol, seed=seed,
                kkt_tol=kkt_tol, max_sweeps=max_sweeps, init_factors=pool or None,
            )
        except (ValueError, FloatingPointError) as exc:
            row["error"] = str(exc)
            return None
        row.pop("error", None)
        row.update(
            bic=float(cp_bic(model)),
            ll=float(model.log_likelihood),
            iters=int(model.iterations),
        )
        return model

    for fam in families:
        fam_name = get_family(fam).name
        relaxed = None
        if init == "relaxation":
            try:
                relaxed = relaxation_coefficient(tensors, ttf, fam)
            except (ValueError, FloatingPointError):
                relaxed = None
        fits = {}
        rows = {}
        for rank in ranks:
            row = {"family": fam_name, "rank": int(rank), "seed": int(seed)}
            rows[rank] = row
            pool = []
            if relaxed is not None:
                pool.append(cp_approximate(relaxed, rank))
            higher = min((r for r in fits if r > rank), default=None)
            if higher is not None:
                pool.extend(_truncation_inits(fits[higher].factors, rank))
            if rank in shared:
                pool.append([f.copy() for f in shared[rank]])
            model = fit_cell(fam, rank, pool, max(restarts, len(pool) + 1), row)
            if model is not None:
                fits[rank] = model
        # nested ranks can only raise the optimum, so a lower objective at a
        # higher rank means that cell stalled; lift the nested solution into it
        fitted = sorted(fits)
        for lo, hi in zip(fitted, fitted[1:]):
            if fits[hi].log_likelihood >= fits[lo].log_likelihood - 1e-9:
                continue
            lift = _lift_init(fits[lo].factors, hi, lift_rng)
            model = fit_cell(fam, hi, [lift], 1, dict(rows[hi]))
            if model is not None and model.log_likelihood > fits[hi].log_likelihood:
                fits[hi] = model
                rows[hi].update(
                    bic=float(cp_bic(model)),
                    ll=float(model.log_likelihood),
                    iters=int(model.iterations),
                )
        table.extend(rows[r] for r in sorted(rows))
        for rank in fitted:
            shared.setdefault(rank, fits[rank].factors)
            row = rows[rank]
            if best is None or row["bic"] < best[0]:
                best = (row["bic"], fam_name, int(rank))
    if best is None:
        raise ValueError("every selection cell failed; see table for reasons")
    return best[1], best[2], table


def bic_table_rows(table):
    """Rows for the shared selection-table CSV schema."""
    rows = []
    for row in table:
        rank = row.get("rank", row.get("ranks"))
        rank_str = str(tuple(rank)) if isinstance(rank, (list, tuple)) else str(rank)
        rows.append([
            row["family"],
            rank_str,
            fileio.format_float(row["bic"]) if "bic" in row else "",
            fileio.format_float(row["ll"]) if "ll" in row else "",
            row.get("iters", ""),
            row.get("seed", ""),
        ])
    return rows


def save_cp(path, model):
    """Write the model to a ``.cpm`` file plus a JSON diagnostics sidecar."""
    name = model.family.name.encode()
    with open(path, "wb") as f:
        fileio.write_magic(f, MODEL_MAGIC)
        fileio.write_u32(f, [len(name)])
        f.write(name)
        fileio.write_f64(f, [model.alpha, model.sigma])
        fileio.write_u32(f, [model.rank, len(model.dims)])
        fileio.write_u32(f, model.dims)
        fileio.write_f64(f, model.penalties)
        for fac in model.factors:
            fileio.write_f64(f, fac)
    sidecar = {
        "log_likelihood": model.log_likelihood,
        "bic": cp_bic(model),
        "iterations": model.iterations,
        "restart": model.restart,
        "kkt": model.kkt,
        "n_samples": model.n_samples,
        "family": model.family.name,
        "rank": model.rank,
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_cp(path):
    """Read a model written by :func:`save_cp`."""
    with open(path, "rb") as f:
        fileio.expect_magic(f, MODEL_MAGIC, path)
        (name_len,) = fileio.read_u32(f, 1)
        family = get_family(f.read(name_len).decode())
        alpha, sigma = fileio.read_f64(f, (2,))
        rank, order = fileio.read_u32(f, 2)
        dims = fileio.read_u32(f, order)
        lam = fileio.read_f64(f, (order,))
        factors = [fileio.read_f64(f, (p, rank)) for p in dims]
    with open(str(path) + ".json") as f:
        sidecar = json.load(f)
    return CpModel(
        alpha=float(alpha),
        sigma=float(sigma),
        factors=factors,
        rank=int(rank),
        family=family,
        penalties=lam,
        log_likelihood=float(sidecar["log_likelihood"]),
        n_samples=int(sidecar["n_samples"]),
        iterations=int(sidecar["iterations"]),
        restart=int(sidecar["restart"]),
        kkt=float(sidecar["kkt"]),
        ll_trace=np.zeros(0),
    )
