"""Command-line harness: layered configuration, subcommands and artifact emission.

Configuration is built from per-experiment defaults, then a JSON file
(``--config``), then dot-path flags (``--lfvi.batch_size 64``). The fully
resolved configuration is written to ``<out>/resolved_config.json``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import difflib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import experiments as ex
from .abc import AbcConfig, AbcError, write_abc_outputs
from .diagnostics import REGIMES, write_metrics_csv
from .lfvi import LfviConfig
from .models import LinearRegressionModel, LotkaVolterraConfig, NormalNormalModel, Series, lv_simulate
from .ndcore import RngStream
from .variational import write_posterior_samples

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
EXPERIMENTS = ("simulate", "infer", "classify", "seq", "diagnose")
MODELS = ("normal-normal", "linear-regression", "lotka-volterra")
METHODS = ("lfvi", "rejection-abc", "mcmc-abc", "smc-abc")

# declared types for keys whose default is null
NULLABLE = {
    "data.true_beta": list,
    "data.path": str,
    "lfvi.seed": int,
    "lfvi.ratio_batch_size": int,
    "lfvi.clip_norm": float,
    "abc.schedule": list,
    "classify.train_path": str,
    "classify.test_path": str,
}
CHOICES = {
    "experiment": EXPERIMENTS,
    "model": MODELS,
    "method": METHODS,
    "classify.model": ("gan", "bnn"),
    "classify.inference": ("vi", "map"),
    "diagnose.mode": ("stability", "noise-inversion"),
    "diagnose.regime": ("all",) + REGIMES,
}
DATA_SIZE = {"normal-normal": 100, "linear-regression": 50, "lotka-volterra": 1}


class ConfigError(ValueError):
    pass


def _lists(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def default_config(experiment: str, model: str) -> dict:
    """Every configurable key with its default for this experiment and model."""
    lv = _lists(asdict(LotkaVolterraConfig()))
    prior = ex.lv_model().prior
    preset = {"classify": "classify", "seq": "seq", "diagnose": "stability"}.get(experiment, model)
    return {
        "experiment": experiment,
        "model": model,
        "method": "lfvi",
        "seed": 0,
        "out": "himvi-out",
        "data": {"n": DATA_SIZE[model], "true_beta": None, "path": None},
        "lotka_volterra": {**lv, "prior_loc": list(prior.loc), "prior_scale": list(prior.scale)},
        "lfvi": _lists(ex.lfvi_config(preset, 0).to_dict()) | {"seed": None},
        "abc": _lists(asdict(AbcConfig())),
        "posterior": {"n_samples": 1000},
        "classify": {
            "dataset": "pima",
            "model": "gan",
            "inference": "vi",
            "hidden": 16,
            "layer_norm": True,
            "n_predictive": 20,
            "train_path": None,
            "test_path": None,
        },
        "seq": {"n_train": 1000, "n_samples": 500, "hidden_dim": 16, "noise_z": 4, "noise_x": 4, "max_len": 15, "corpus_seed": 42},
        "diagnose": {
            "mode": "stability",
            "regime": "all",
            "checkpoint_every": 100,
            "n_draws": 32,
            "n": 50,
            "data_seed": 0,
            "n_problems": 20,
            "dim": 3,
            "width": 32,
            "bias_shift": 1.0,
            "max_iters": 20000,
            "tol": 1e-6,
        },
    }


def _check_type(path, default, value):
    expected = NULLABLE.get(path, type(default) if default is not None else None)
    if value is None:
        if default is None or path in NULLABLE:
            return value
        raise ConfigError(f"{path}: expected {type(default).__name__}, got null")
    if expected is None:
        return value
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is float and isinstance(value, str) and value.lower() in ("inf", "infinity", "-inf", "nan"):
        return float(value)
    if expected is int and isinstance(value, bool) or expected is float and isinstance(value, bool):
        raise ConfigError(f"{path}: expected {expected.__name__}, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{path}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")
    if path in CHOICES and value not in CHOICES[path]:
        raise ConfigError(f"{path}: {value!r} is not one of {list(CHOICES[path])}")
    return value


def _unknown(path, key, known):
    near = difflib.get_close_matches(key, list(known), n=1, cutoff=0.0)
    hint = f"; nearest known key is {'.'.join([*path, near[0]])!r}" if near else ""
    return ConfigError(f"unknown key {'.'.join([*path, key])!r}{hint}")


def merge(defaults: dict, overrides: dict, path=()) -> dict:
    """Overlay ``overrides`` on ``defaults``, rejecting unknown keys and wrong types."""
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise _unknown(path, key, defaults)
        dotted = ".".join([*path, key])
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected an object, got {type(value).__name__}")
            out[key] = merge(defaults[key], value, (*path, key))
        else:
            out[key] = _check_type(dotted, defaults[key], value)
    return out


def _set_path(tree: dict, dotted: str, value):
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[leaf] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_args(argv) -> dict:
    """Raw overrides from the command line: the JSON file first, then every flag."""
    argv = list(argv)
    command = argv.pop(0) if argv and not argv[0].startswith("-") else None
    if command is not None and command not in EXPERIMENTS:
        raise ConfigError(f"unknown subcommand {command!r}; expected one of {list(EXPERIMENTS)}")
    parser = argparse.ArgumentParser(
        prog="himvi",
        usage="himvi {simulate,infer,classify,seq,diagnose} [--config FILE] [--section.key VALUE ...]",
        description="Likelihood-free variational inference experiments",
    )
    parser.add_argument("--experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--model")
    parser.add_argument("--method")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)

    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be a JSON object")
    if command and args.experiment and command != args.experiment:
        raise ConfigError(f"conflicting experiments {command!r} and {args.experiment!r}")
    for key in ("model", "method", "seed", "out"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if command or args.experiment:
        raw["experiment"] = command or args.experiment

    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise ConfigError(f"unexpected argument {flag!r}")
        if "=" in flag:
            key, text = flag[2:].split("=", 1)
            i += 1
        elif i + 1 < len(rest):
            key, text = flag[2:], rest[i + 1]
            i += 2
        else:
            raise ConfigError(f"{flag} needs a value")
        _set_path(raw, key, _parse_value(text))
    raw["_verbose"] = args.verbose
    return raw


def resolve(raw: dict) -> dict:
    """Materialize defaults for the chosen experiment and model, then apply overrides."""
    raw = {k: v for k, v in raw.items() if k != "_verbose"}
    experiment = raw.get("experiment")
    if experiment is None:
        raise ConfigError("no experiment given; use a subcommand or --experiment")
    model = raw.get("model", "normal-normal")
    for key, value in (("experiment", experiment), ("model", model)):
        if value not in CHOICES[key]:
            near = difflib.get_close_matches(str(value), CHOICES[key], n=1, cutoff=0.0)
            raise ConfigError(f"{key}: {value!r} is not one of {list(CHOICES[key])}; did you mean {near[0]!r}?")
    cfg = merge(default_config(experiment, model), raw)
    if cfg["lfvi"]["seed"] is None:
        cfg["lfvi"]["seed"] = cfg["seed"]
    for key in ("data.path", "classify.train_path", "classify.test_path"):
        section, leaf = key.split(".")
        if cfg[section][leaf] is not None and not Path(cfg[section][leaf]).is_file():
            raise ConfigError(f"{key}: no such file {cfg[section][leaf]!r}")
    if (cfg["classify"]["train_path"] is None) != (cfg["classify"]["test_path"] is None):
        raise ConfigError("classify.train_path and classify.test_path must be given together")
    # construct every typed section once so value errors surface before any output
    try:
        lfvi_cfg(cfg)
        abc_cfg(cfg)
        model = build_model(cfg)
        n_rows = DATA_SIZE["lotka-volterra"] if cfg_is_lv(model) else cfg["data"]["n"]
        if cfg["data"]["path"] is not None:
            rows = _load_rows(model, cfg["data"]["path"])
            if rows.shape[1] != model.data_dim:
                raise ValueError(f"data.path: rows have {rows.shape[1]} columns, model {model.name!r} expects {model.data_dim}")
            n_rows = len(rows)
        if experiment == "infer" and cfg["method"] == "lfvi" and cfg["lfvi"]["batch_size"] > n_rows:
            raise ValueError(f"lfvi.batch_size {cfg['lfvi']['batch_size']} exceeds the {n_rows} data rows")
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def lfvi_cfg(cfg) -> LfviConfig:
    names = set(LfviConfig.field_names())
    return LfviConfig(**{k: v for k, v in cfg["lfvi"].items() if k in names})


def abc_cfg(cfg) -> AbcConfig:
    values = dict(cfg["abc"])
    if values["schedule"] is not None:
        values["schedule"] = tuple(values["schedule"])
    return AbcConfig(**values)


def build_model(cfg):
    name = cfg["model"]
    if name == "normal-normal":
        return NormalNormalModel()
    if name == "linear-regression":
        return LinearRegressionModel()
    lv = dict(cfg["lotka_volterra"])
    return ex.lv_model(
        beta=lv.pop("beta"), prior_loc=lv.pop("prior_loc"), prior_scale=lv.pop("prior_scale"), **lv
    )


# ------------------------------------------------------------ subcommands


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_rows(model, path):
    text = Path(path).read_text()
    if cfg_is_lv(model):
        return Series.from_csv(text).as_row()[None]
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def cfg_is_lv(model) -> bool:
    return model.name == "lotka-volterra"


def _write_rows(path, rows):
    rows = np.atleast_2d(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(rows.shape[1])])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def run_simulate(cfg, out: Path) -> int:
    model = build_model(cfg)
    if cfg_is_lv(model):
        series = lv_simulate(model.config, RngStream(cfg["seed"]))
        (out / "series.csv").write_text(series.to_csv())
        return EXIT_DIVERGED if series.diverged else EXIT_OK
    rows, beta = ex.observed_data(model, cfg["seed"], cfg["data"]["n"], cfg["data"]["true_beta"])
    _write_rows(out / "data.csv", rows)
    _write_json(out / "truth.json", {"beta": [float(b) for b in np.atleast_1d(beta)]})
    return EXIT_OK


def run_infer(cfg, out: Path) -> int:
    model = build_model(cfg)
    seed = cfg["seed"]
    if cfg["data"]["path"] is not None:
        data = _load_rows(model, cfg["data"]["path"])
        true_beta = cfg["data"]["true_beta"]
    else:
        data, true_beta = ex.observed_data(model, seed, cfg["data"]["n"], cfg["data"]["true_beta"])
    metrics = {"method": cfg["method"], "n_data": len(data)}
    if cfg["method"] == "lfvi":
        res = ex.infer_lfvi(model, data, true_beta, lfvi_cfg(cfg), cfg["posterior"]["n_samples"], run_log=out / "run_log.jsonl")
        write_posterior_samples(out / "posterior.jsonl", res["samples"], res["log_q"])
        mean, std = res["fit"].q_global.mean_std()
        metrics |= {"posterior_mean": mean.tolist(), "posterior_std": std.tolist(), "diverged": res["diverged"]}
    else:
        try:
            res = ex.infer_abc(model, data, true_beta, cfg["method"], abc_cfg(cfg), seed)
        except AbcError as err:
            log.error("%s", err)
            return EXIT_DIVERGED
        abc = res["result"]
        write_abc_outputs(out, abc)
        with open(out / "run_log.jsonl", "w") as fh:
            for g, pop in enumerate(abc.populations or [{"weights": abc.weights}], start=1):
                fh.write(json.dumps({"generation": g, "population": len(pop["weights"])}) + "\n")
        w = abc.weights / abc.weights.sum()
        mean = w @ abc.samples
        metrics |= {
            "posterior_mean": mean.tolist(),
            "posterior_std": np.sqrt(w @ (abc.samples - mean) ** 2).tolist(),
            "acceptance_rate": abc.rate,
            "aborted": bool(abc.aborted),
            "diverged": False,
        }
    if true_beta is not None:
        metrics["true_beta"] = [float(b) for b in np.atleast_1d(true_beta)]
        # too few accepted draws for a density estimate gives nulls
        metrics |= res.get("metrics") or {"nlp_true": None, "ci95_contains": None}
    metrics["seconds"] = res["seconds"]
    _write_json(out / "metrics.json", metrics)
    return EXIT_DIVERGED if metrics["diverged"] else EXIT_OK


def run_classify(cfg, out: Path) -> int:
    c = cfg["classify"]
    # the inference choice fixes the variational family
    lfvi = {k: v for k, v in cfg["lfvi"].items() if k not in ("seed", "global_family")}
    res = ex.classify(
        None if c["train_path"] else c["dataset"],
        c["model"],
        c["inference"],
        seed=cfg["seed"],
        hidden=c["hidden"],
        layer_norm=c["layer_norm"],
        n_predictive=c["n_predictive"],
        train_path=c["train_path"],
        test_path=c["test_path"],
        **lfvi,
    )
    _write_json(out / "test_error.json", {**res, "dataset": c["dataset"] if not c["train_path"] else c["train_path"],
                                          "model": c["model"], "inference": c["inference"]})
    return EXIT_DIVERGED if res["diverged"] else EXIT_OK


def run_seq(cfg, out: Path) -> int:
    lfvi = {k: v for k, v in cfg["lfvi"].items() if k != "seed"}
    res = ex.sequence_experiment(seed=cfg["seed"], **cfg["seq"], **lfvi)
    (out / "sequences.txt").write_text("".join(s + "\n" for s in res.pop("samples")))
    res["most_common"] = [list(p) for p in res["most_common"]]
    _write_json(out / "validity.json", res)
    return EXIT_DIVERGED if res["diverged"] else EXIT_OK


def run_diagnose(cfg, out: Path) -> int:
    d = cfg["diagnose"]
    if d["mode"] == "noise-inversion":
        rows = ex.noise_inversion_experiment(
            cfg["seed"], d["n_problems"], d["dim"], d["width"], d["bias_shift"], d["max_iters"], d["tol"]
        )
        write_metrics_csv(out / "noise_inversion.csv", rows)
        return EXIT_OK
    lfvi = {k: v for k, v in cfg["lfvi"].items() if k not in ("seed", "batch_size")}
    regimes = REGIMES if d["regime"] == "all" else (d["regime"],)
    for regime in regimes:
        trace = ex.stability_experiment(
            regime, seed=cfg["seed"], checkpoint_every=d["checkpoint_every"], n_draws=d["n_draws"],
            n=d["n"], data_seed=d["data_seed"], **lfvi,
        )
        trace.to_csv(out / f"stability_{regime}.csv")
    return EXIT_OK


RUNNERS = {"simulate": run_simulate, "infer": run_infer, "classify": run_classify, "seq": run_seq, "diagnose": run_diagnose}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        raw = parse_args(argv)
        verbose = raw.get("_verbose", False)
        cfg = resolve(raw)
    except ConfigError as err:
        print(f"himvi: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    with np.errstate(over="ignore", invalid="ignore"):
        code = RUNNERS[cfg["experiment"]](cfg, out)
    if code == EXIT_DIVERGED:
        print("himvi: numerical divergence; see logs", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
