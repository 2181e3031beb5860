"""Command-line driver: ``weightextrap <command> --config run.toml --out dir``.

Each stage reads the previous stage's files from the output directory, writes
its own artifacts and a ``manifest_<command>.json`` with config hash, input
and output checksums and library versions.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import data as D
from .evalharness import grouped_rmse, run_ensemble
from .experiments import (ConfigError, Prepared, RunConfig, collect, config_from_dict, evaluate, fit_variant,
                          mask_key, predict_children, prepare, resolve_mask, train_parent, tipping_pipeline)
from .netcore import fmt_float, load_checkpoint, save_checkpoint
from .sensitivity import SensitivityMatrix
from .weightreg import WeightRegressionModel


try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("weightextrap")

COMMANDS = ("generate", "train-parent", "collect", "fit", "predict-eval", "ensemble", "run-all")
CHILDREN_EXPORT_LIMIT = 5_000_000  # values; larger child tables are not written


class StageError(RuntimeError):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_config(path, seed_overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("--config", f"no such file {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("--config", f"TOML parse error: {exc}") from None
    for item in seed_overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError("--seed-override", f"expected k=v, got {item!r}")
        try:
            seed = int(val)
        except ValueError:
            raise ConfigError(f"seeds.{key}", f"seed must be an integer, got {val!r}") from None
        if key == "ensemble":
            raw.setdefault("ensemble", {})["seed"] = seed
        else:
            raw.setdefault("seeds", {})[key] = seed
    return config_from_dict(raw)


class Stage:
    """Bookkeeping for one command: tracks inputs/outputs and writes the manifest."""

    def __init__(self, name: str, cfg: RunConfig, out: Path):
        self.name, self.cfg, self.out = name, cfg, out
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def need(self, fname: str) -> Path:
        p = self.out / fname
        if not p.exists():
            raise StageError(f"{self.name}: missing input {p}; run the previous stage first")
        self.inputs[fname] = sha256_file(p)
        return p

    def path(self, fname: str) -> Path:
        return self.out / fname

    def wrote(self, fname: str) -> None:
        self.outputs[fname] = sha256_file(self.out / fname)

    def finish(self) -> dict:
        cfg_dict = self.cfg.to_dict()
        man = {
            "command": self.name,
            "config_sha256": hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest(),
            "config": cfg_dict,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": {"weightextrap": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            **self.extra,
        }
        p = self.out / f"manifest_{self.name}.json"
        p.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
        return man


# dataset persistence -----------------------------------------------------------

def _write_dataset(stage: Stage, ds: D.Dataset) -> None:
    D.write_csv(stage.path("dataset.csv"), ds)
    schema = {"feature_names": list(ds.feature_names), "target_names": list(ds.target_names),
              "key_name": ds.key_name, "aux": list(ds.aux), "ordered": ds.ordered}
    stage.path("dataset.json").write_text(json.dumps(schema, indent=1) + "\n")
    stage.wrote("dataset.csv")
    stage.wrote("dataset.json")


def _read_dataset(stage: Stage) -> D.Dataset:
    schema = json.loads(stage.need("dataset.json").read_text())
    return D.load_csv(stage.need("dataset.csv"), schema["feature_names"], schema["target_names"],
                      schema["key_name"], schema["aux"], schema["ordered"])


def _prepared(stage: Stage) -> Prepared:
    return prepare(stage.cfg, _read_dataset(stage))


# commands ----------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out: Path) -> dict:
    st = Stage("generate", cfg, out)
    from .experiments import load_dataset
    ds = load_dataset(cfg)
    _write_dataset(st, ds)
    st.path("config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    st.wrote("config.json")
    st.extra["n_rows"] = len(ds)
    return st.finish()


def cmd_train_parent(cfg: RunConfig, out: Path) -> dict:
    st = Stage("train-parent", cfg, out)
    prep = _prepared(st)
    parent, res = train_parent(cfg, prep)
    extra = {"eot": prep.eot, "target_mean": fmt_float(prep.target_mean),
             "target_scale": fmt_float(prep.target_scale)}
    if prep.basis is not None:
        st.path("eof_basis.json").write_text(prep.basis.to_json() + "\n")
        st.wrote("eof_basis.json")
    if prep.input_scaler is not None:
        extra["input_scaler"] = prep.input_scaler.to_dict()
    save_checkpoint(st.path("parent.json"), parent, cfg.parent.optimizer,
                    dataclasses.asdict(cfg.seeds), extra)
    st.wrote("parent.json")
    rmse = float(np.sqrt(res.final_mse)) * prep.target_scale
    st.extra["final_training_rmse"] = rmse
    log.info("parent trained: training RMSE %.6g", rmse)
    return st.finish()


def _variant_masks(cfg, parent):
    seen = {}
    for v in cfg.regression:
        seen.setdefault(mask_key(v.mask), resolve_mask(parent.spec, v.mask))
    return seen

SENS_BINARY_LIMIT = 2_000_000  # values; larger tables use the binary container


def save_sensitivity(sens: SensitivityMatrix, path: Path) -> Path:
    """JSON for small tables; otherwise a JSON header line plus raw little-endian float64 rows."""
    if sens.W.size <= SENS_BINARY_LIMIT:
        sens.save_json(path)
        return path
    path = path.with_suffix(".bin")
    head = sens.to_dict()
    head.pop("W")
    head.update({"format": "float64-le", "rows": sens.W.shape[0], "cols": sens.W.shape[1]})
    with path.open("wb") as fh:
        fh.write((json.dumps(head) + "\n").encode())
        fh.write(np.ascontiguousarray(sens.W, dtype="<f8").tobytes())
    return path


def load_sensitivity(path: Path) -> SensitivityMatrix:
    if path.suffix == ".json":
        return SensitivityMatrix.load_json(path)
    with path.open("rb") as fh:
        head = json.loads(fh.readline())
        W = np.frombuffer(fh.read(), dtype="<f8").reshape(head["rows"], head["cols"])
    head["W"] = W.tolist()
    return SensitivityMatrix.from_dict(head)


def _sens_file(stage: Stage, key: str) -> str:
    for suffix in (".json", ".bin"):
        if (stage.out / f"sensitivity_{key}{suffix}").exists():
            return f"sensitivity_{key}{suffix}"
    return f"sensitivity_{key}.json"


def cmd_collect(cfg: RunConfig, out: Path) -> dict:
    st = Stage("collect", cfg, out)
    prep = _prepared(st)
    parent, _ = load_checkpoint(st.need("parent.json"))
    headers = {}
    for key, mask in _variant_masks(cfg, parent).items():
        sens = collect(cfg, prep, parent, None if key == "all" else mask)
        p = save_sensitivity(sens, st.path(f"sensitivity_{key}.json"))
        st.wrote(p.name)
        headers[key] = {"mode": sens.mode, "rows": sens.n_episodes, "missing": len(sens.missing),
                        "store_anomalies": sens.store_anomalies}
    st.extra["sensitivity"] = headers
    return st.finish()


def cmd_fit(cfg: RunConfig, out: Path) -> dict:
    st = Stage("fit", cfg, out)
    prep = _prepared(st)
    parent, _ = load_checkpoint(st.need("parent.json"))
    fitted = {}
    for v in cfg.regression:
        key = mask_key(v.mask)
        sens = load_sensitivity(st.need(_sens_file(st, key)))
        model = fit_variant(v, prep, sens, resolve_mask(parent.spec, v.mask), cfg.seeds.regression)
        fname = f"regression_{v.name}.json"
        model.save(st.path(fname))
        st.wrote(fname)
        fitted[v.name] = {"family": v.family, "degree": v.degree, "mask": key, **model.info}
    st.extra["variants"] = fitted
    return st.finish()


def cmd_predict_eval(cfg: RunConfig, out: Path) -> dict:
    st = Stage("predict-eval", cfg, out)
    prep = _prepared(st)
    parent, _ = load_checkpoint(st.need("parent.json"))
    summary = {}
    for v in cfg.regression:
        fname = f"regression_{v.name}.json"
        model = WeightRegressionModel.load(st.need(fname), parent.params)
        children = predict_children(model, prep)
        preds, report = evaluate(prep, parent, children,
                                 {"eot": prep.eot, "variant": v.name, "degree": v.degree, "family": v.family})
        if children.size <= CHILDREN_EXPORT_LIMIT:
            cname = f"children_{v.name}.csv"
            D.write_table(st.path(cname), [f"p{k}" for k in range(children.shape[1])], children)
            st.wrote(cname)
        else:
            log.info("children table for %s has %d values; not written", v.name, children.size)
        header, table = preds.to_table()
        table = np.column_stack([table, np.abs(preds.parent - preds.target) - np.abs(preds.child - preds.target)])
        D.write_table(st.path(f"series_{v.name}.csv"), [*header, "abs_err_diff"], table)
        st.wrote(f"series_{v.name}.csv")
        report.save_json(st.path(f"report_{v.name}.json"))
        report.save_csv(st.path(f"report_{v.name}.csv"))
        st.wrote(f"report_{v.name}.json")
        st.wrote(f"report_{v.name}.csv")
        if cfg.experiment == "toy_eos":
            _write_profiles(st, v.name, prep, preds)
        summary[v.name] = report.to_dict()["windows"]
    st.extra["reports"] = summary
    return st.finish()


def _write_profiles(st: Stage, name: str, prep: Prepared, preds) -> None:
    """Depth profiles grouped by depth with latitude / longitude breakdowns."""
    ds = prep.ds
    for group in ("lat", "lon"):
        rows = []
        for z in np.unique(ds.keys):
            sel = ds.keys == z
            gp = grouped_rmse(preds.parent[sel], preds.target[sel], ds.aux[group][sel])
            gc = grouped_rmse(preds.child[sel], preds.target[sel], ds.aux[group][sel])
            rows += [[z, g, gp["rmse"][j], gc["rmse"][j], gp["rmse"][j] - gc["rmse"][j]]
                     for j, g in enumerate(gp["groups"])]
        fname = f"profile_{name}_depth_{group}.csv"
        D.write_table(st.path(fname), ["z", group, "parent_rmse", "child_rmse", "diff"], np.array(rows))
        st.wrote(fname)


def cmd_ensemble(cfg: RunConfig, out: Path) -> dict:
    st = Stage("ensemble", cfg, out)
    e = cfg.ensemble
    if cfg.experiment != "tipping":
        raise StageError("ensemble is defined for the tipping experiment (random end-of-training years)")
    results = run_ensemble(cfg, e.n_runs, (e.eot_lo, e.eot_hi), e.seed, tipping_pipeline, e.bucket_width)
    summary = {}
    for name, res in results.items():
        res.save_csv(st.path(f"ensemble_{name}_runs.csv"))
        res.save_box_csv(st.path(f"ensemble_{name}_box.csv"))
        st.wrote(f"ensemble_{name}_runs.csv")
        st.wrote(f"ensemble_{name}_box.csv")
        summary[name] = {"n_runs": len(res.reports), "failures": len(res.failures),
                         "median_diff": {w: b.median for w, b in res.boxes.get("diff", {}).items()}}
    st.extra["ensemble"] = summary
    return st.finish()


def cmd_run_all(cfg: RunConfig, out: Path) -> dict:
    mans = {}
    for name, fn in (("generate", cmd_generate), ("train-parent", cmd_train_parent), ("collect", cmd_collect),
                     ("fit", cmd_fit), ("predict-eval", cmd_predict_eval)):
        mans[name] = fn(cfg, out)
    st = Stage("run-all", cfg, out)
    st.extra["stages"] = {k: m["outputs"] for k, m in mans.items()}
    return st.finish()


DISPATCH = {"generate": cmd_generate, "train-parent": cmd_train_parent, "collect": cmd_collect,
            "fit": cmd_fit, "predict-eval": cmd_predict_eval, "ensemble": cmd_ensemble, "run-all": cmd_run_all}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weightextrap", description="Neural-network weight extrapolation pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML run configuration (defaults used when omitted)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed-override", action="append", default=[], metavar="K=V",
                        help="override seeds.K (data, parent, sensitivity, regression) or ensemble")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed_override)
        out = Path(args.out or cfg.output_dir)
        man = DISPATCH[args.command](cfg, out)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "path": exc.path, "message": str(exc)}), file=sys.stderr)
        return 2
    except (StageError, D.CsvSchemaError, FileNotFoundError) as exc:
        print(json.dumps({"error": "input", "message": str(exc)}), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - reported as JSON for callers
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(out), "outputs": man["outputs"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
