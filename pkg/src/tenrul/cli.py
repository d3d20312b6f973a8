"""Batch driver for the degradation image-stream lifetime pipeline.

Subcommands cover the full workflow: ``simulate`` writes a synthetic study,
``fit``/``select`` train or choose a single model on complete streams,
``build-library`` trains one model per observation epoch, ``predict`` scores
a stream prefix, and ``evaluate`` writes per-bin error tables, matching plot
files, and figures for a held-out study.

Flat JSON config files and command-line flags carry the same keys; flags
win.  Every command is deterministic under a fixed (config, seed) pair —
rerunning produces byte-identical artifacts, whatever ``--jobs`` says — and
records the resolved config's hash in its outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import pathlib
import sys
from dataclasses import dataclass

import numpy as np

from . import cp as cp_mod
from . import fileio
from . import fpca as fpca_mod
from . import mpca
from . import prognosis
from . import simulate as sim_mod
from . import tucker as tucker_mod
from .distributions import get_family


class ConfigError(Exception):
    """Invalid or inconsistent run configuration (exit code 2)."""


class DataError(Exception):
    """Missing or malformed input data (exit code 3)."""


REQUIRED = object()


@dataclass(frozen=True)
class KeySpec:
    default: object
    kind: str
    help: str


def _c(default, kind, help):
    return KeySpec(default, kind, help)


_COMMON = {
    "seed": _c(0, "int", "master seed for all derived random streams"),
    "jobs": _c(1, "int",
               "worker processes for independent tasks (results do not "
               "depend on this)"),
}

_MODEL_KEYS = {
    "method": _c("cp", "str", "model kind: cp, tucker, or fpca"),
    "family": _c("sev", "str", "lifetime distribution family"),
    "penalty": _c(None, "float",
                  "factor sparsity penalty (default: per-method policy)"),
    "core_penalty": _c(None, "float",
                       "tucker core sparsity penalty (default: matches the "
                       "factor policy)"),
    "fve": _c(0.95, "float",
              "fraction of variance kept by the feature subspace"),
    "restarts": _c(10, "int", "random restarts per fit"),
    "tol": _c(1e-6, "float", "relative convergence tolerance"),
}

SCHEMAS = {
    "simulate": {
        **_COMMON,
        "output_dir": _c(REQUIRED, "str",
                         "directory for streams, responses, and the "
                         "generator record"),
        "kind": _c("cp", "str",
                   "generating coefficient structure: cp or tucker"),
        "systems": _c(1000, "int", "number of simulated systems"),
        "grid": _c(21, "int", "interior pixels per image side"),
        "frames": _c(10, "int", "frames per stream (unit-spaced epochs)"),
        "side": _c(0.05, "float", "plate side length"),
        "diffusivity_low": _c(0.5e-5, "float",
                              "lower bound of the per-system diffusivity"),
        "diffusivity_high": _c(1.5e-5, "float",
                               "upper bound of the per-system diffusivity"),
        "noise_var": _c(0.01, "float", "pixel noise variance"),
        "ttf_offset": _c("auto", "offset",
                         "constant added to every lifetime, or 'auto' to "
                         "float the smallest location to twice the spread"),
        "refine": _c(12, "int", "internal solver grid refinement factor"),
    },
    "fit": {
        **_COMMON,
        **_MODEL_KEYS,
        "output_dir": _c(REQUIRED, "str",
                         "directory for the fitted model artifacts"),
        "data_dir": _c(REQUIRED, "str",
                       "study directory written by the simulate command"),
        "rank": _c(None, "rank",
                   "decomposition size: integer for cp; per-mode list or "
                   "'auto' for tucker"),
    },
    "select": {
        **_COMMON,
        **_MODEL_KEYS,
        "output_dir": _c(REQUIRED, "str",
                         "directory for the selection table and choice"),
        "data_dir": _c(REQUIRED, "str",
                       "study directory written by the simulate command"),
        "families": _c(None, "strs",
                       "candidate families (default: just --family)"),
        "rank_grid": _c(None, "ints",
                        "candidate cp ranks, or per-mode sizes expanded to "
                        "a tucker grid (defaults: 1,2,3 and 1,2)"),
        "rank": _c(None, "rank",
                   "pass 'auto' to use heuristic tucker ranks instead of "
                   "a grid"),
    },
    "build-library": {
        **_COMMON,
        **_MODEL_KEYS,
        "output_dir": _c(REQUIRED, "str",
                         "directory for the per-epoch model library"),
        "data_dir": _c(REQUIRED, "str",
                       "study directory written by the simulate command"),
        "rank": _c(None, "rank",
                   "decomposition size: integer for cp; per-mode list or "
                   "'auto' for tucker"),
        "families": _c(None, "strs",
                       "candidate families for per-epoch selection"),
        "rank_grid": _c(None, "ints",
                        "candidate cp ranks, or per-mode sizes expanded to "
                        "a tucker grid"),
        "min_epoch": _c(2, "int", "first truncation epoch to model"),
    },
    "predict": {
        **_COMMON,
        "output_dir": _c(None, "str",
                         "optional directory for prediction.json"),
        "library_dir": _c(REQUIRED, "str",
                          "directory written by build-library"),
        "stream": _c(REQUIRED, "str",
                     "tensor file holding the observed stream prefix"),
        "system_id": _c(None, "str",
                        "identifier for the record (default: file stem)"),
    },
    "evaluate": {
        **_COMMON,
        "output_dir": _c(REQUIRED, "str",
                         "directory for evaluation tables, plot data, and "
                         "figures"),
        "library_dir": _c(REQUIRED, "str",
                          "directory written by build-library"),
        "data_dir": _c(REQUIRED, "str", "held-out test study directory"),
        "min_count": _c(1, "int",
                        "smallest bin size kept in the summary"),
    },
}

_COMMAND_HELP = {
    "simulate": "generate a synthetic degradation study",
    "fit": "fit one model on complete streams",
    "select": "choose (family, rank) by BIC on complete streams",
    "build-library": "fit one model per observation epoch",
    "predict": "predict lifetime and remaining life from a stream prefix",
    "evaluate": "score an epoch library on a held-out study",
}


def _parse_rank(text):
    if text == "auto":
        return "auto"
    if "," in text:
        return [int(part) for part in text.split(",")]
    return int(text)


def _parse_offset(text):
    return "auto" if text == "auto" else float(text)


def _parse_ints(text):
    return [int(part) for part in text.split(",")]


def _parse_strs(text):
    parts = [part.strip() for part in text.split(",") if part.strip()]
    if not parts:
        raise ValueError("empty list")
    return parts


_CLI_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "rank": _parse_rank,
    "offset": _parse_offset,
    "ints": _parse_ints,
    "strs": _parse_strs,
}


def _coerce(key, spec, value):
    if value is None:
        return None
    kind = spec.kind
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if kind == "rank":
        if value == "auto":
            return "auto"
        if isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, a list, or 'auto'")
        if isinstance(value, int):
            return value
        if (isinstance(value, list) and value
                and all(isinstance(v, int) and not isinstance(v, bool)
                        for v in value)):
            return list(value)
        raise ConfigError(f"{key} must be an integer, a list, or 'auto'")
    if kind == "offset":
        if value == "auto":
            return "auto"
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number or 'auto'")
        return float(value)
    if kind == "ints":
        if (isinstance(value, list) and value
                and all(isinstance(v, int) and not isinstance(v, bool)
                        for v in value)):
            return list(value)
        raise ConfigError(f"{key} must be a non-empty integer list")
    if kind == "strs":
        if (isinstance(value, list) and value
                and all(isinstance(v, str) for v in value)):
            return list(value)
        raise ConfigError(f"{key} must be a non-empty string list")
    raise ConfigError(f"unhandled config kind {kind!r} for {key}")


def _validate(command, cfg):
    positive = {"jobs": 1, "restarts": 1, "min_count": 1, "systems": 1,
                "frames": 1, "grid": 2, "refine": 1, "min_epoch": 2}
    for key, lowest in positive.items():
        if key in cfg and cfg[key] < lowest:
            raise ConfigError(f"{key} must be >= {lowest}")
    if "tol" in cfg and not cfg["tol"] > 0:
        raise ConfigError("tol must be positive")
    if "fve" in cfg and not 0.0 < cfg["fve"] <= 1.0:
        raise ConfigError("fve must be in (0, 1]")
    for key in ("penalty", "core_penalty"):
        if cfg.get(key) is not None and cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    if command == "simulate" and cfg["kind"] not in ("cp", "tucker"):
        raise ConfigError(f"kind must be cp or tucker, got {cfg['kind']!r}")
    allowed_methods = {"fit": ("cp", "tucker", "fpca"),
                       "build-library": ("cp", "tucker", "fpca"),
                       "select": ("cp", "tucker")}
    if command in allowed_methods:
        if cfg["method"] not in allowed_methods[command]:
            raise ConfigError(
                f"method must be one of {allowed_methods[command]} for "
                f"{command}, got {cfg['method']!r}")
    for value in [cfg.get("family")] + list(cfg.get("families") or []):
        if value is not None:
            try:
                get_family(value)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
    if command in ("fit", "build-library") and cfg.get("rank") is not None:
        _rank_for(cfg["method"], cfg["rank"])


def resolve_config(command, args):
    """Merge defaults, config-file keys, and flags; reject unknown keys."""
    schema = SCHEMAS[command]
    cfg = {key: (None if spec.default is REQUIRED else spec.default)
           for key, spec in schema.items()}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            loaded = json.loads(pathlib.Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in loaded.items():
            cfg[key] = _coerce(key, schema[key], value)
    for key, spec in schema.items():
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, spec, value)
    missing = [key for key, spec in schema.items()
               if spec.default is REQUIRED and cfg[key] is None]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    _validate(command, cfg)
    # the hash covers every key that can change a result; the worker count
    # and the output location cannot, so artifacts embedding the hash stay
    # byte-identical across --jobs settings and destination moves
    hashed = {key: value for key, value in cfg.items()
              if key not in ("jobs", "output_dir")}
    payload = json.dumps({"command": command, **hashed},
                         sort_keys=True, separators=(",", ":"))
    cfg_hash = hashlib.sha256(payload.encode()).hexdigest()[:16]
    return cfg, cfg_hash


def _write_run_record(out_dir, command, cfg, cfg_hash):
    record = {"command": command, "config": cfg, "config_hash": cfg_hash}
    with open(pathlib.Path(out_dir) / "run.json", "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_dataset(data_dir):
    try:
        streams, ttf = sim_mod.load_simulation(data_dir)
        return prognosis.make_dataset(streams, ttf)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load study from {data_dir}: {exc}") from exc


def _load_library(library_dir):
    try:
        return prognosis.load_library(library_dir)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(
            f"cannot load model library from {library_dir}: {exc}") from exc


def _rank_for(method, rank):
    if rank is None:
        return None
    if method == "cp":
        if not isinstance(rank, int):
            raise ConfigError("cp rank must be a single integer")
        return rank
    if method == "tucker":
        if rank == "auto":
            return "auto"
        if isinstance(rank, list):
            return tuple(rank)
        raise ConfigError(
            "tucker rank must be 'auto' or a per-mode integer list")
    return None


def _project_full(data, method, fve):
    if method == "fpca":
        signals = np.stack([fpca_mod.to_intensity(s) for s in data.streams])
        sub = fpca_mod.fit_fpca(signals, fve_threshold=fve)
        return sub, fpca_mod.score(signals, sub)
    sub = mpca.fit_mpca(data.streams, fve_threshold=fve)
    return sub, mpca.project_many(sub, data.streams)


def cmd_simulate(cfg, cfg_hash):
    try:
        heat = sim_mod.HeatSimConfig(
            grid=cfg["grid"], frames=cfg["frames"], side=cfg["side"],
            diffusivity=(cfg["diffusivity_low"], cfg["diffusivity_high"]),
            noise_var=cfg["noise_var"], systems=cfg["systems"],
            seed=cfg["seed"], ttf_offset=cfg["ttf_offset"],
            refine=cfg["refine"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = pathlib.Path(cfg["output_dir"])
    sim_mod.run_simulation(heat, cfg["kind"], out, jobs=cfg["jobs"])
    _write_run_record(out, "simulate", cfg, cfg_hash)
    print(f"wrote {cfg['systems']} systems to {out}")


def cmd_fit(cfg, cfg_hash):
    data = _load_dataset(cfg["data_dir"])
    method = cfg["method"]
    out = pathlib.Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    sub, proj = _project_full(data, method, cfg["fve"])
    model = prognosis.fit_projected(
        proj, data.ttf, method, family=cfg["family"],
        rank=_rank_for(method, cfg["rank"]), penalties=cfg["penalty"],
        core_penalty=cfg["core_penalty"], restarts=cfg["restarts"],
        tol=cfg["tol"], seed=cfg["seed"])
    if method == "fpca":
        fpca_mod.save_basis(out / "basis.fpca", sub)
    else:
        mpca.save_subspace(out / "subspace.mpca", sub)
    if method == "tucker":
        tucker_mod.save_tucker(out / "model.tkm", model)
        bic = float(tucker_mod.tucker_bic(model))
        rank_desc = list(model.ranks)
    else:
        cp_mod.save_cp(out / "model.cpm", model)
        bic = float(cp_mod.cp_bic(model))
        rank_desc = int(model.factors[0].shape[1])
    summary = {
        "method": method,
        "family": model.family.name,
        "rank": rank_desc,
        "alpha": float(model.alpha),
        "sigma": float(model.sigma),
        "log_likelihood": float(model.log_likelihood),
        "bic": bic,
        "samples": len(data),
        "iterations": int(model.iterations),
        "config_hash": cfg_hash,
    }
    with open(out / "fit.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_record(out, "fit", cfg, cfg_hash)
    print(f"fit {method}/{summary['family']} rank {rank_desc}: "
          f"bic {bic:.3f} -> {out}")


def cmd_select(cfg, cfg_hash):
    data = _load_dataset(cfg["data_dir"])
    out = pathlib.Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _, proj = _project_full(data, cfg["method"], cfg["fve"])
    families = cfg["families"] or [cfg["family"]]
    if cfg["method"] == "cp":
        grid = cfg["rank_grid"] or [1, 2, 3]
        fam, best, table = cp_mod.select_cp_rank(
            proj, data.ttf, families, grid, penalties=cfg["penalty"],
            restarts=cfg["restarts"], tol=cfg["tol"], seed=cfg["seed"])
        chosen_rank = int(best)
    else:
        if cfg["rank"] == "auto":
            ranks = "auto"
        else:
            per_mode = cfg["rank_grid"] or [1, 2]
            ranks = tucker_mod.rank_grid(per_mode, data.streams[0].ndim)
        fam, best, table = tucker_mod.select_tucker(
            proj, data.ttf, families, ranks=ranks, penalties=cfg["penalty"],
            core_penalty=cfg["core_penalty"], restarts=cfg["restarts"],
            tol=cfg["tol"], seed=cfg["seed"], fve_threshold=cfg["fve"])
        chosen_rank = list(best)
    fileio.write_csv(out / "bic_table.csv", cp_mod.BIC_TABLE_COLUMNS,
                     cp_mod.bic_table_rows(table))
    chosen = {
        "family": fam,
        "rank": chosen_rank,
        "bic": min(row["bic"] for row in table if "bic" in row),
        "config_hash": cfg_hash,
    }
    with open(out / "chosen.json", "w") as f:
        json.dump(chosen, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_record(out, "select", cfg, cfg_hash)
    print(f"selected {fam} rank {chosen_rank} "
          f"(bic {chosen['bic']:.3f}) -> {out}")


def cmd_build_library(cfg, cfg_hash):
    data = _load_dataset(cfg["data_dir"])
    method = cfg["method"]
    rank_grid = None
    if cfg["rank_grid"]:
        if method == "cp":
            rank_grid = list(cfg["rank_grid"])
        elif method == "tucker":
            rank_grid = tucker_mod.rank_grid(
                cfg["rank_grid"], data.streams[0].ndim)
        else:
            raise ConfigError("fpca takes no rank grid")
    library, failures = prognosis.build_model_library(
        data, method=method, family=cfg["family"],
        rank=_rank_for(method, cfg["rank"]), rank_grid=rank_grid,
        families=cfg["families"], fve=cfg["fve"], penalties=cfg["penalty"],
        core_penalty=cfg["core_penalty"], restarts=cfg["restarts"],
        tol=cfg["tol"], seed=cfg["seed"], min_epoch=cfg["min_epoch"],
        jobs=cfg["jobs"])
    if not library:
        detail = "; ".join(f"epoch {n}: {msg}"
                           for n, msg in sorted(failures.items()))
        raise DataError(f"no epoch model could be built ({detail})")
    out = pathlib.Path(cfg["output_dir"])
    prognosis.save_library(out, library, failures, config_hash=cfg_hash)
    _write_run_record(out, "build-library", cfg, cfg_hash)
    skipped = f", {len(failures)} epochs skipped" if failures else ""
    print(f"built {len(library)} epoch models{skipped} -> {out}")


def cmd_predict(cfg, cfg_hash):
    library, _ = _load_library(cfg["library_dir"])
    try:
        prefix = fileio.load_tensor(cfg["stream"])
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load stream {cfg['stream']}: {exc}") from exc
    system = cfg["system_id"] or pathlib.Path(cfg["stream"]).stem
    record = prognosis.predict_rul(library, prefix, system_id=system)
    payload = {
        "system": record.system_id,
        "epoch": record.epoch,
        "pred_ttf": record.pred_ttf,
        "rul": record.rul,
        "negative_rul": record.negative_rul,
        "config_hash": cfg_hash,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if cfg["output_dir"] is not None:
        out = pathlib.Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.json").write_text(text + "\n")
        _write_run_record(out, "predict", cfg, cfg_hash)


def _render_series(path, labels, values, ylabel):
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(range(len(labels)), values, marker="o", color="#1f6f8b")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("observed life percentile")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "tenrul"})
    plt.close(fig)


def cmd_evaluate(cfg, cfg_hash):
    library, _ = _load_library(cfg["library_dir"])
    test = _load_dataset(cfg["data_dir"])
    records, summary = prognosis.evaluate(
        library, test, min_count=cfg["min_count"])
    if not records:
        raise DataError("no test system is predictable with this library")
    out = pathlib.Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    prognosis.write_evaluation_csv(out / "evaluation.csv", records)
    labels = list(summary)
    counts = [summary[label]["count"] for label in labels]
    means = [summary[label]["mean"] for label in labels]
    variances = [summary[label]["variance"] for label in labels]
    fileio.write_csv(
        out / "summary.csv",
        ["percentile_bin", "count", "mean_rel_error", "error_variance"],
        [[label, count, mean, var]
         for label, count, mean, var in zip(labels, counts, means, variances)])
    percents = [int(label.rstrip("%")) for label in labels]
    fileio.write_csv(out / "plot_mean_error.csv",
                     ["percentile", "mean_rel_error"],
                     [[p, m] for p, m in zip(percents, means)])
    fileio.write_csv(out / "plot_error_variance.csv",
                     ["percentile", "error_variance"],
                     [[p, v] for p, v in zip(percents, variances)])
    _render_series(out / "mean_error.png", labels, means,
                   "mean relative prediction error")
    _render_series(out / "error_variance.png", labels, variances,
                   "prediction error variance")
    _write_run_record(out, "evaluate", cfg, cfg_hash)
    print(f"wrote {len(records)} predictions in {len(labels)} bins -> {out}")


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "build-library": cmd_build_library,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tenrul",
        description="Degradation image-stream lifetime modeling pipeline.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for command, schema in SCHEMAS.items():
        sp = sub.add_parser(command, help=_COMMAND_HELP[command],
                            description=_COMMAND_HELP[command])
        sp.add_argument("--config", metavar="FILE",
                        help="JSON config file; flags override its keys")
        sp.add_argument("--print-effective-config", action="store_true",
                        help="print the fully resolved config before running")
        for key, spec in schema.items():
            if spec.default is REQUIRED:
                suffix = " (required)"
            elif spec.default is not None:
                suffix = f" (default: {spec.default})"
            else:
                suffix = ""
            sp.add_argument(
                "--" + key.replace("_", "-"), dest=key,
                metavar=spec.kind.upper(), type=_CLI_PARSERS[spec.kind],
                default=None, help=spec.help + suffix)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg, cfg_hash = resolve_config(args.command, args)
        if args.print_effective_config:
            print(json.dumps({"command": args.command, **cfg,
                              "config_hash": cfg_hash},
                             indent=2, sort_keys=True))
        _COMMANDS[args.command](cfg, cfg_hash)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
