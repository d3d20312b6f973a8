"""Time-varying remaining-useful-life pipeline.

Training streams are truncated at every feasible observation epoch; each
epoch gets its own multilinear subspace and regression model fitted on the
systems still alive at that epoch.  A fielded system's stream prefix is
projected with the matching epoch's subspace and its lifetime read off the
fitted location, giving the remaining life as predicted lifetime minus the
current epoch.  Evaluation groups the relative errors by observed life
percentile.
"""

from __future__ import annotations

import json
import math
import pathlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import cp as cp_mod
from . import fileio
from . import fpca as fpca_mod
from . import mpca
from . import parallel
from . import tensor_ops
from . import tucker as tucker_mod
from .distributions import get_family, invert_response_transform


@dataclass
class Dataset:
    """Degradation streams with their failure times.

    ``streams[i]`` has the shared spatial dims plus a trailing time axis of
    length ``T_i``; frame ``k`` (1-based) is observed at epoch ``t = k``.
    """

    streams: list
    ttf: np.ndarray
    ids: list

    def __len__(self):
        return len(self.streams)

    @property
    def spatial_dims(self):
        return self.streams[0].shape[:-1]

    def max_epoch(self):
        return max(s.shape[-1] for s in self.streams)

    def subset(self, indices):
        return Dataset(
            streams=[self.streams[i] for i in indices],
            ttf=self.ttf[list(indices)],
            ids=[self.ids[i] for i in indices],
        )


def make_dataset(streams, ttf, ids=None):
    """Validated :class:`Dataset` from raw streams and failure times."""
    streams = [np.asarray(s, dtype=float) for s in streams]
    ttf = np.asarray(ttf, dtype=float)
    if not streams:
        raise ValueError("dataset needs at least one system")
    if ttf.shape != (len(streams),):
        raise ValueError("one failure time per system is required")
    if ids is None:
        ids = list(range(len(streams)))
    ids = list(ids)
    if len(set(ids)) != len(streams):
        raise ValueError("system ids must be unique and match the stream count")
    spatial = streams[0].shape[:-1]
    for s, y in zip(streams, ttf):
        if s.ndim < 2:
            raise ValueError("streams need spatial dims plus a time axis")
        if s.shape[:-1] != spatial:
            raise ValueError("spatial dims differ across systems")
        if y <= 0:
            raise ValueError("failure times must be positive")
        if y < s.shape[-1]:
            raise ValueError(
                "a system cannot be observed past its failure time")
    return Dataset(streams=streams, ttf=ttf, ids=ids)


@dataclass
class EpochModel:
    """Subspace plus fitted regression for one observation epoch."""

    epoch: int
    ids: list
    subspace: mpca.TensorSubspace
    model: object
    kind: str

    @property
    def family(self):
        return self.model.family.name


@dataclass
class PredictionRecord:
    """One lifetime prediction for one system at one epoch."""

    system_id: object
    epoch: int
    pred_ttf: float
    rul: float
    negative_rul: bool
    rel_error: float = math.nan
    percentile: float = math.nan
    percentile_bin: str = ""


def build_truncated_dataset(data, epoch):
    """Systems still alive strictly after ``epoch``, cut to its first frames."""
    if epoch < 2:
        raise ValueError("need at least two frames to truncate at")
    keep = [i for i, s in enumerate(data.streams)
            if data.ttf[i] > epoch and s.shape[-1] >= epoch]
    if len(keep) < 2:
        raise ValueError(
            f"only {len(keep)} systems survive past epoch {epoch}")
    if len(keep) < 10:
        warnings.warn(
            f"only {len(keep)} systems survive past epoch {epoch}; "
            "models may be unstable", stacklevel=2)
    return Dataset(
        streams=[data.streams[i][..., :epoch] for i in keep],
        ttf=data.ttf[keep],
        ids=[data.ids[i] for i in keep],
    )


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence((seed, epoch)).generate_state(1)[0])


def _cp_pool(proj, ttf, family, rank, penalties, restarts, tol, seed):
    """Structured starting factors for one cp fit, or None if unavailable."""
    pool = cp_mod.cp_init_pool(proj, ttf, int(rank), family,
                               penalties=penalties, restarts=restarts,
                               tol=tol, seed=seed)
    return pool or None


def _tucker_start(proj, ttf, family, ranks):
    """Starting (core, factors) from the unfactorized penalized fit."""
    try:
        relaxed = cp_mod.relaxation_coefficient(proj, ttf, family)
        return tensor_ops.hosvd_truncate(relaxed, tuple(ranks))
    except (ValueError, FloatingPointError):
        return None


def fit_projected(proj, ttf, method, family="sev", rank=None, rank_grid=None,
                  families=None, penalties=None, core_penalty=None,
                  restarts=10, tol=1e-6, seed=0):
    """Fit one lifetime regression of the requested kind on covariates.

    ``rank`` fixes the decomposition size (int for ``cp``; tuple or
    ``"auto"`` for ``tucker``, which defaults to the entrywise-SVD
    heuristic; ignored for ``fpca``).  Passing ``rank_grid`` (and
    optionally ``families``) selects a cell by BIC instead.
    """
    families = list(families) if families is not None else [family]
    if method == "cp":
        if rank_grid is not None:
            fam, best_rank, _ = cp_mod.select_cp_rank(
                proj, ttf, families, rank_grid, penalties=penalties,
                restarts=restarts, tol=tol, seed=seed)
            pool = _cp_pool(proj, ttf, fam, best_rank,
                            penalties, restarts, tol, seed)
            starts = max(restarts, len(pool or ()) + 1)
            return cp_mod.fit_cp(proj, ttf, best_rank, fam,
                                 penalties=penalties, restarts=starts,
                                 tol=tol, seed=seed, init_factors=pool)
        fixed = 2 if rank is None else int(rank)
        pool = _cp_pool(proj, ttf, family, fixed,
                        penalties, restarts, tol, seed)
        starts = max(restarts, len(pool or ()) + 1)
        return cp_mod.fit_cp(proj, ttf, fixed, family, penalties=penalties,
                             restarts=starts, tol=tol, seed=seed,
                             init_factors=pool)
    if method == "tucker":
        kwargs = dict(penalties=penalties, core_penalty=core_penalty,
                      restarts=restarts, tol=tol, seed=seed)
        if rank_grid is not None:
            fam, best_ranks, _ = tucker_mod.select_tucker(
                proj, ttf, families, ranks=list(rank_grid), **kwargs)
            return tucker_mod.fit_tucker(
                proj, ttf, best_ranks, fam,
                init=_tucker_start(proj, ttf, fam, best_ranks), **kwargs)
        if rank in (None, "auto"):
            if len(families) > 1:
                fam, best_ranks, _ = tucker_mod.select_tucker(
                    proj, ttf, families, ranks="auto", **kwargs)
            else:
                fam = families[0]
                best_ranks = None
            ranks0, core0, factors0 = tucker_mod.hosvd_init(proj, ttf, fam)
            init = (core0, factors0) if best_ranks in (None, ranks0) else None
            return tucker_mod.fit_tucker(
                proj, ttf, best_ranks or ranks0, fam, init=init, **kwargs)
        return tucker_mod.fit_tucker(
            proj, ttf, tuple(rank), family,
            init=_tucker_start(proj, ttf, family, tuple(rank)), **kwargs)
    if method == "fpca":
        penalty = 0.0 if penalties is None else penalties
        return fpca_mod.fit_fpca_lls(proj, ttf, family, penalty=penalty,
                                     restarts=restarts, tol=tol, seed=seed)
    raise ValueError(f"unknown method {method!r}")


def _build_epoch_model(truncated, epoch, method, family, rank, rank_grid,
                       families, fve, penalties, core_penalty, restarts,
                       tol, seed):
    try:
        if method == "fpca":
            signals = np.stack(
                [fpca_mod.to_intensity(s) for s in truncated.streams])
            sub = fpca_mod.fit_fpca(signals, fve_threshold=fve)
            proj = fpca_mod.score(signals, sub)
        else:
            sub = mpca.fit_mpca(truncated.streams, fve_threshold=fve)
            proj = mpca.project_many(sub, truncated.streams)
        model = fit_projected(
            proj, truncated.ttf, method, family=family, rank=rank,
            rank_grid=rank_grid, families=families, penalties=penalties,
            core_penalty=core_penalty, restarts=restarts, tol=tol, seed=seed)
    except (ValueError, FloatingPointError) as exc:
        return "err", str(exc)
    return "ok", EpochModel(epoch=epoch, ids=list(truncated.ids),
                            subspace=sub, model=model, kind=method)


def build_model_library(
    data,
    method="cp",
    family="sev",
    rank=None,
    rank_grid=None,
    families=None,
    fve=0.95,
    penalties=None,
    core_penalty=None,
    restarts=10,
    tol=1e-6,
    seed=0,
    min_epoch=2,
    jobs=1,
):
    """Fit one epoch model per feasible truncation epoch.

    Decomposition size and selection grids are passed through to
    :func:`fit_projected`.  Epoch fits are independent (each draws its own
    derived seed), so ``jobs > 1`` fans them out to worker processes
    without changing any result.

    Returns
    -------
    library : dict epoch -> EpochModel
    failures : dict epoch -> diagnostic string for skipped epochs
    """
    failures = {}
    tasks = []
    epochs = []
    for epoch in range(min_epoch, data.max_epoch() + 1):
        try:
            truncated = build_truncated_dataset(data, epoch)
        except ValueError as exc:
            failures[epoch] = str(exc)
            continue
        tasks.append((truncated, epoch, method, family, rank, rank_grid,
                      families, fve, penalties, core_penalty, restarts, tol,
                      _epoch_seed(seed, epoch)))
        epochs.append(epoch)
    library = {}
    for epoch, (status, payload) in zip(
            epochs, parallel.starmap(_build_epoch_model, tasks, jobs)):
        if status == "ok":
            library[epoch] = payload
        else:
            failures[epoch] = payload
    return library, failures


def predict_rul(library, prefix, system_id=None):
    """Remaining-life prediction from a stream prefix.

    The prefix's trailing axis length picks the epoch model; its projection
    feeds the fitted location, back-transformed to the lifetime scale when
    the family models log-lifetimes.
    """
    prefix = np.asarray(prefix, dtype=float)
    epoch = prefix.shape[-1]
    if epoch not in library:
        raise ValueError(f"no epoch model for a {epoch}-frame prefix")
    em = library[epoch]
    if em.kind == "fpca":
        signal = fpca_mod.to_intensity(prefix)
        projected = fpca_mod.score(signal[np.newaxis], em.subspace)[0]
    else:
        if prefix.shape != em.subspace.input_dims:
            raise ValueError(
                f"prefix dims {prefix.shape} do not match the epoch model's "
                f"{em.subspace.input_dims}")
        projected = mpca.project(em.subspace, prefix)
    location = float(em.model.location(projected[np.newaxis])[0])
    pred_ttf = float(invert_response_transform(em.model.family, location))
    rul = pred_ttf - epoch
    return PredictionRecord(
        system_id=system_id, epoch=epoch, pred_ttf=pred_ttf,
        rul=float(rul), negative_rul=bool(rul < 0))


def percentile_bin(percentile):
    """Nearest-decile label with intervals like (5%, 15%] -> \"10%\"."""
    if not np.isfinite(percentile) or percentile < 0:
        raise ValueError(f"invalid life percentile {percentile!r}")
    k = max(0, math.ceil(round((percentile - 0.05) / 0.1, 12)))
    return f"{10 * k}%"


def evaluate(library, test_data, min_count=1):
    """Score a library on held-out systems, grouped by life percentile.

    Every test system is predicted at every library epoch it survives past
    (strictly), using only its stream prefix.  Relative error follows
    ``|predicted - real| / real``.

    Returns
    -------
    records : list of PredictionRecord
    summary : dict bin label -> dict(count, mean, variance)
        Bins ordered by percentile; ``variance`` is the population variance.
    """
    records = []
    for i, system_id in enumerate(test_data.ids):
        stream = test_data.streams[i]
        real = float(test_data.ttf[i])
        for epoch in sorted(library):
            if not (real > epoch and stream.shape[-1] >= epoch):
                continue
            rec = predict_rul(library, stream[..., :epoch], system_id)
            rec.rel_error = abs(rec.pred_ttf - real) / real
            rec.percentile = epoch / real
            rec.percentile_bin = percentile_bin(rec.percentile)
            records.append(rec)
    summary = {label: cell for label, cell in _summarize(records).items()
               if cell["count"] >= min_count}
    return records, summary


def evaluate_loo(data, **build_kwargs):
    """Leave-one-out evaluation with a training-leakage audit.

    Builds one library per held-out system on the remaining systems and
    predicts the held-out stream; every epoch model's training ids are
    checked against the held-out id before use.

    Returns
    -------
    records, summary : as :func:`evaluate`
    audit : dict with total epoch models checked and leaks found
    """
    if len(data) < 2:
        raise ValueError("leave-one-out needs at least two systems")
    if len(data) < 10:
        warnings.warn(
            f"leave-one-out on only {len(data)} systems", stacklevel=2)
    records = []
    checked = 0
    leaks = 0
    for i, held_id in enumerate(data.ids):
        rest = data.subset([j for j in range(len(data)) if j != i])
        library, _ = build_model_library(rest, **build_kwargs)
        for em in library.values():
            checked += 1
            if held_id in em.ids:
                leaks += 1
        holdout = data.subset([i])
        recs, _ = evaluate(library, holdout)
        records.extend(recs)
    if leaks:
        raise AssertionError(
            f"held-out systems leaked into {leaks} epoch models")
    summary = _summarize(records)
    return records, summary, {"epoch_models": checked, "leaks": leaks}


def _summarize(records):
    summary = {}
    labels = sorted({r.percentile_bin for r in records},
                    key=lambda s: int(s.rstrip("%")))
    for label in labels:
        errs = np.array([r.rel_error for r in records
                         if r.percentile_bin == label])
        summary[label] = {
            "count": int(errs.size),
            "mean": float(np.mean(errs)),
            "variance": float(np.var(errs)),
        }
    return summary


EVALUATION_COLUMNS = ["system", "epoch", "percentile_bin", "pred_ttf",
                      "rul", "rel_error"]


def write_evaluation_csv(path, records):
    """Write prediction records to the shared evaluation CSV schema."""
    rows = [[r.system_id, r.epoch, r.percentile_bin,
             float(r.pred_ttf), float(r.rul), float(r.rel_error)]
            for r in records]
    fileio.write_csv(path, EVALUATION_COLUMNS, rows)


def save_library(out_dir, library, failures=None, config_hash=None):
    """Write a model library directory: per-epoch artifacts plus manifest."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = sorted(library)
    manifest = {
        "epochs": epochs,
        "ids": {str(n): list(library[n].ids) for n in epochs},
        "kinds": {str(n): library[n].kind for n in epochs},
        "families": {str(n): library[n].family for n in epochs},
        "failures": {str(n): msg for n, msg in (failures or {}).items()},
        "config_hash": config_hash,
    }
    for n in epochs:
        em = library[n]
        if em.kind == "fpca":
            fpca_mod.save_basis(out / f"epoch_{n}.fpca", em.subspace)
            cp_mod.save_cp(out / f"epoch_{n}.cpm", em.model)
        elif em.kind == "cp":
            mpca.save_subspace(out / f"epoch_{n}.mpca", em.subspace)
            cp_mod.save_cp(out / f"epoch_{n}.cpm", em.model)
        else:
            mpca.save_subspace(out / f"epoch_{n}.mpca", em.subspace)
            tucker_mod.save_tucker(out / f"epoch_{n}.tkm", em.model)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_library(out_dir):
    """Read a library directory written by :func:`save_library`."""
    out = pathlib.Path(out_dir)
    with open(out / "manifest.json") as f:
        manifest = json.load(f)
    library = {}
    for n in manifest["epochs"]:
        kind = manifest["kinds"][str(n)]
        if kind == "fpca":
            sub = fpca_mod.load_basis(out / f"epoch_{n}.fpca")
            model = cp_mod.load_cp(out / f"epoch_{n}.cpm")
        elif kind == "cp":
            sub = mpca.load_subspace(out / f"epoch_{n}.mpca")
            model = cp_mod.load_cp(out / f"epoch_{n}.cpm")
        else:
            sub = mpca.load_subspace(out / f"epoch_{n}.mpca")
            model = tucker_mod.load_tucker(out / f"epoch_{n}.tkm")
        library[n] = EpochModel(
            epoch=int(n), ids=manifest["ids"][str(n)], subspace=sub,
            model=model, kind=kind)
    failures = {int(k): v for k, v in manifest.get("failures", {}).items()}
    return library, failures
