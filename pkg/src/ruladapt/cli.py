"""Command-line entry point: wire config files to experiments.

Subcommands: ``train-dann``, ``train-baseline``, ``predict``, ``synth``,
``evaluate``. Experiments are described by an INI-style config (flat keys in
sections, documented in the README); every run writes a manifest with the
resolved configuration, seed and content hashes of the input files, so it can
be reproduced exactly. Metrics are averaged over ``trials`` runs seeded
seed..seed+trials-1 and written as JSON; per-trial artifacts (checkpoint and
training-report CSV) land in trial subdirectories. Output files are written
atomically and nothing is written until the inputs have validated.
"""

import argparse
import configparser
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, dann
from .baselines import BASELINE_T_W, BaselineSpec, train_coral_nn, train_single_domain
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dann import PAIR_HYPERPARAMS, DannHyperParams
from .data import (
    DataError,
    DomainDataset,
    SyntheticConfig,
    SyntheticShift,
    fit_transform_minmax,
    fit_transform_zscore,
    format_cmapss,
    format_rul_sidecar,
    gen_synthetic,
    label_rul,
    parse_cmapss,
    parse_rul_truth,
)

BASELINE_MODES = ("source-only", "target-only", "coral-nn", "coral-dnn")
EVAL_MODES = ("last_window_per_unit", "all_windows", "auto")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    seed: int = 0
    trials: int = 1
    out_dir: str = "runs/out"
    source_train: str | None = None
    source_test: str | None = None
    source_truth: str | None = None
    target_train: str | None = None
    target_test: str | None = None
    target_truth: str | None = None
    normalization: str = "minmax"
    r_e: float = 125.0
    eval_at: str = "auto"
    dann_hp: DannHyperParams = field(default_factory=DannHyperParams)
    pair: str | None = None
    baseline_mode: str = "source-only"
    baseline_spec: BaselineSpec = field(default_factory=BaselineSpec)
    coral_depth: str = "shallow"
    coral_align_means: bool = True
    coral_epochs: int = 100
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)

    def resolved_eval_at(self, truth_path) -> str:
        if self.eval_at != "auto":
            return self.eval_at
        return "last_window_per_unit" if truth_path else "all_windows"


def _parse_typed(section: str, key: str, raw: str, kind: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind == "float_list":
            return [float(v) for v in raw.replace(",", " ").split()]
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


_DATA_KEYS = {
    "source_train": "str", "source_test": "str", "source_truth": "str",
    "target_train": "str", "target_test": "str", "target_truth": "str",
    "normalization": "str", "r_e": "float", "t_w": "int", "eval_at": "str",
}
_EXPERIMENT_KEYS = {"seed": "int", "trials": "int", "out_dir": "str"}
_DANN_KEYS = {
    "pair": "str", "lstm_layers": "int_list", "lstm_dropout": "float", "f_units": "int",
    "reg_layers": "int_list", "reg_dropout": "float", "dom_layers": "int_list",
    "dom_dropout": "float", "alpha": "float", "batch_size": "int", "lr_reg": "float",
    "lr_dom": "float", "optimizer": "str", "l2": "float", "p": "int",
    "max_epochs": "int", "patience": "int", "val_fraction": "float", "t_w": "int",
}
_BASELINE_KEYS = {
    "mode": "str", "lstm_layers": "int_list", "lstm_dropout": "float",
    "dense_layers": "int_list", "dense_dropouts": "float_list", "epochs": "int",
    "lr": "float", "batch_size": "int", "t_w": "int", "dataset": "str",
    "depth": "str", "align_means": "bool", "coral_epochs": "int",
}
_SYNTH_KEYS = {
    "n_units": "int", "t_min": "int", "t_max": "int", "q": "int", "knee": "float",
    "noise": "float", "feature_offset": "float", "feature_scale": "float",
    "target_noise": "float",
}


def _section(parser: configparser.ConfigParser, name: str, allowed: dict) -> dict:
    if name not in parser:
        return {}
    out = {}
    for key, raw in parser[name].items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        out[key] = _parse_typed(name, key, raw, allowed[key])
    return out


def parse_config(path, overrides=()) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    parser.read_string(text)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in parser:
            parser.add_section(section)
        parser[section][key] = value

    known = {"experiment", "data", "dann", "baseline", "synth"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    cfg = ExperimentConfig()
    exp = _section(parser, "experiment", _EXPERIMENT_KEYS)
    cfg.seed = exp.get("seed", cfg.seed)
    cfg.trials = exp.get("trials", cfg.trials)
    cfg.out_dir = exp.get("out_dir", cfg.out_dir)
    if cfg.trials < 1:
        raise ConfigError("trials must be >= 1")

    datac = _section(parser, "data", _DATA_KEYS)
    for key in ("source_train", "source_test", "source_truth",
                "target_train", "target_test", "target_truth"):
        setattr(cfg, key, datac.get(key, getattr(cfg, key)))
    cfg.normalization = datac.get("normalization", cfg.normalization)
    if cfg.normalization not in ("minmax", "zscore"):
        raise ConfigError(f"normalization must be minmax or zscore, got {cfg.normalization!r}")
    cfg.r_e = datac.get("r_e", cfg.r_e)
    cfg.eval_at = datac.get("eval_at", cfg.eval_at)
    if cfg.eval_at not in EVAL_MODES:
        raise ConfigError(f"eval_at must be one of {EVAL_MODES}")

    dannc = _section(parser, "dann", _DANN_KEYS)
    cfg.pair = dannc.pop("pair", None)
    if cfg.pair is not None:
        key = tuple(cfg.pair.replace("->", "-").split("-"))
        if key not in PAIR_HYPERPARAMS:
            raise ConfigError(f"unknown experiment pair {cfg.pair!r}")
        cfg.dann_hp = replace(PAIR_HYPERPARAMS[key])
    if "t_w" in datac and "t_w" not in dannc:
        dannc["t_w"] = datac["t_w"]
    if dannc:
        cfg.dann_hp = replace(cfg.dann_hp, **dannc)

    basec = _section(parser, "baseline", _BASELINE_KEYS)
    cfg.baseline_mode = basec.pop("mode", cfg.baseline_mode)
    if cfg.baseline_mode not in BASELINE_MODES:
        raise ConfigError(f"mode must be one of {BASELINE_MODES}, got {cfg.baseline_mode!r}")
    cfg.coral_depth = basec.pop("depth", cfg.coral_depth)
    cfg.coral_align_means = basec.pop("align_means", cfg.coral_align_means)
    cfg.coral_epochs = basec.pop("coral_epochs", cfg.coral_epochs)
    dataset = basec.pop("dataset", None)
    if "t_w" not in basec:
        if dataset is not None and dataset in BASELINE_T_W:
            basec["t_w"] = BASELINE_T_W[dataset]
        elif "t_w" in datac:
            basec["t_w"] = datac["t_w"]
    if basec:
        cfg.baseline_spec = replace(cfg.baseline_spec, **basec)

    synthc = _section(parser, "synth", _SYNTH_KEYS)
    if synthc:
        shift = SyntheticShift(
            feature_offset=synthc.pop("feature_offset", 0.0),
            feature_scale=synthc.pop("feature_scale", 1.0),
            noise=synthc.pop("target_noise", None),
        )
        t_lo = synthc.pop("t_min", cfg.synth.t_range[0])
        t_hi = synthc.pop("t_max", cfg.synth.t_range[1])
        cfg.synth = SyntheticConfig(t_range=(t_lo, t_hi), shift=shift, **synthc)
    return cfg


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------


def _fit_scaler(runs, normalization: str, r_e: float):
    fit = fit_transform_minmax if normalization == "minmax" else fit_transform_zscore
    return fit(runs, include_rul=True, rul_max=r_e)


def load_training_domain(path, name: str, r_e: float, normalization: str,
                         labeled: bool = True) -> DomainDataset:
    """Run-to-failure training file: parse, label (optional), fit scaler, transform."""
    runs = parse_cmapss(Path(path).read_text())
    if labeled:
        runs = [label_rul(r, r_e) for r in runs]
    runs_n, scaler = _fit_scaler(runs, normalization, r_e)
    return DomainDataset(name, runs_n, scaler)


def load_test_domain(path, truth_path, scaler, name: str, r_e: float) -> DomainDataset:
    """Test file normalized with the training scaler of the same dataset.

    With a truth file the i-th engine's labels are truth_i + (T - t), capped
    at r_e like the training targets; without one the runs are assumed to be
    run-to-failure and labelled by the piecewise rule.
    """
    runs = parse_cmapss(Path(path).read_text())
    if truth_path is not None:
        truth = parse_rul_truth(Path(truth_path).read_text())
        if len(truth) != len(runs):
            raise DataError(
                f"truth file has {len(truth)} entries but test file has {len(runs)} engines"
            )
        labelled = []
        for run, final_rul in zip(runs, truth):
            t = np.arange(1, run.length + 1)
            rul = np.minimum(float(r_e), final_rul + (run.length - t).astype(np.float64))
            labelled.append(replace(run, rul=rul))
        runs = labelled
    else:
        runs = [label_rul(r, r_e) for r in runs]
    return DomainDataset(name, scaler.transform_runs(runs, include_rul=True), scaler)


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require_files(paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"input file not found: {p}")


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = asdict(cfg)
    echo["synth"]["t_range"] = list(echo["synth"]["t_range"])
    return echo


def write_manifest(out_dir: Path, cfg: ExperimentConfig, inputs):
    manifest = {
        "config": _config_echo(cfg),
        "seed": cfg.seed,
        "trials": cfg.trials,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
    }
    _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _aggregate_metrics(per_trial) -> dict:
    rmses = np.array([m["rmse"] for m in per_trial])
    scores = np.array([m["nasa_score"] for m in per_trial])
    return {
        "rmse_mean": float(rmses.mean()),
        "rmse_std": float(rmses.std()),
        "score_mean": float(scores.mean()),
        "score_std": float(scores.std()),
    }


# ---------------------------------------------------------------------------
# Experiment drivers (importable; the CLI wraps these)
# ---------------------------------------------------------------------------


def run_dann_experiment(cfg: ExperimentConfig) -> dict:
    if cfg.source_train is None or cfg.target_train is None:
        raise ConfigError("train-dann needs source_train and target_train")
    inputs = [cfg.source_train, cfg.target_train, cfg.target_test, cfg.target_truth]
    _require_files(inputs)
    out_dir = Path(cfg.out_dir)

    source = load_training_domain(cfg.source_train, "source", cfg.r_e, cfg.normalization)
    target = load_training_domain(
        cfg.target_train, "target", cfg.r_e, cfg.normalization, labeled=False
    )
    eval_set = None
    if cfg.target_test is not None:
        eval_set = load_test_domain(
            cfg.target_test, cfg.target_truth, target.scaler, "target-test", cfg.r_e
        )

    write_manifest(out_dir, cfg, inputs)
    per_trial = []
    for trial in range(cfg.trials):
        seed = cfg.seed + trial
        model, report = dann.fit(source, target, cfg.dann_hp, seed)
        trial_dir = out_dir / f"trial{trial:03d}"
        trial_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(trial_dir / "train_report.csv", report.to_csv())
        save_checkpoint(trial_dir / "checkpoint.npz", model, seed=seed)
        if eval_set is not None:
            at = cfg.resolved_eval_at(cfg.target_truth)
            per_trial.append(dann.evaluate(model, eval_set, at=at))

    metrics = _aggregate_metrics(per_trial) if per_trial else None
    if metrics is not None:
        _write_atomic(out_dir / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return {"metrics": metrics, "out_dir": str(out_dir)}


def run_baseline_experiment(cfg: ExperimentConfig) -> dict:
    mode = cfg.baseline_mode
    if mode in ("source-only", "coral-nn", "coral-dnn") and cfg.source_train is None:
        raise ConfigError(f"{mode} needs source_train")
    if cfg.target_train is None:
        raise ConfigError("train-baseline needs target_train (evaluation scaler)")
    if cfg.target_test is None:
        raise ConfigError("train-baseline needs target_test for evaluation")
    inputs = [cfg.source_train, cfg.target_train, cfg.target_test, cfg.target_truth]
    _require_files(inputs)
    out_dir = Path(cfg.out_dir)

    target_scaler_domain = load_training_domain(
        cfg.target_train, "target", cfg.r_e, cfg.normalization
    ) if cfg.target_train else None
    eval_scaler = target_scaler_domain.scaler
    eval_set = load_test_domain(cfg.target_test, cfg.target_truth, eval_scaler,
                                "target-test", cfg.r_e)
    at = cfg.resolved_eval_at(cfg.target_truth)

    write_manifest(out_dir, cfg, inputs)
    per_trial, diagnostics = [], []
    for trial in range(cfg.trials):
        seed = cfg.seed + trial
        trial_dir = out_dir / f"trial{trial:03d}"
        trial_dir.mkdir(parents=True, exist_ok=True)
        if mode in ("source-only", "target-only"):
            if mode == "source-only":
                train_domain = load_training_domain(
                    cfg.source_train, "source", cfg.r_e, cfg.normalization
                )
            else:
                train_domain = target_scaler_domain
            model, report = train_single_domain(train_domain, cfg.baseline_spec, seed)
            _write_atomic(trial_dir / "train_report.csv", report.to_csv())
            save_checkpoint(trial_dir / "checkpoint.npz", model, seed=seed)
            per_trial.append(dann.evaluate(model, eval_set, at=at))
        else:
            source = load_training_domain(cfg.source_train, "source", cfg.r_e, cfg.normalization)
            target = load_training_domain(cfg.target_train, "target", cfg.r_e,
                                          cfg.normalization, labeled=False)
            depth = "shallow" if mode == "coral-nn" else "deep"
            model, _, diag = train_coral_nn(
                source, target, depth=depth, seed=seed, epochs=cfg.coral_epochs,
                align_means=cfg.coral_align_means,
            )
            diagnostics.append(diag)
            per_trial.append(baselines.evaluate_stepwise(model, eval_set))

    metrics = _aggregate_metrics(per_trial)
    _write_atomic(out_dir / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    if diagnostics:
        _write_atomic(out_dir / "alignment.json",
                      json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
    return {"metrics": metrics, "out_dir": str(out_dir), "diagnostics": diagnostics or None}


def run_synth(cfg: ExperimentConfig) -> dict:
    out_dir = Path(cfg.out_dir)
    source, target = gen_synthetic(cfg.synth, cfg.seed)
    write_manifest(out_dir, cfg, [])
    paths = {}
    for domain in (source, target):
        stem = domain.name.replace("synthetic-", "")
        data_path = out_dir / f"train_{stem}.txt"
        _write_atomic(data_path, format_cmapss(domain.runs))
        sidecar = out_dir / f"rul_{stem}.csv"
        _write_atomic(sidecar, format_rul_sidecar(domain.runs))
        paths[stem] = str(data_path)
    return {"out_dir": str(out_dir), "paths": paths}


def _load_for_checkpoint(model, data_path, truth_path, labeled: bool, r_e: float):
    scaler = model.label_scaler
    if scaler is None:
        raise CheckpointError("checkpoint carries no scaler; cannot normalize input data")
    runs = parse_cmapss(Path(data_path).read_text())
    if truth_path is not None:
        return load_test_domain(data_path, truth_path, scaler, "predict", r_e)
    if labeled:
        runs = [label_rul(r, r_e) for r in runs]
    return DomainDataset("predict", scaler.transform_runs(runs, include_rul=True), scaler)


def run_predict(checkpoint_path, data_path, out_path, at: str = "last_window_per_unit",
                truth_path=None, labeled: bool = False, r_e: float = 125.0) -> str:
    _require_files([checkpoint_path, data_path, truth_path])
    model = load_checkpoint(checkpoint_path)
    dataset = _load_for_checkpoint(model, data_path, truth_path, labeled, r_e)
    samples = (dataset.windows(model.t_w) if at == "all_windows"
               else dataset.last_windows(model.t_w))
    preds = dann.predict_windows(model, samples, dataset.scaler)
    lines = ["unit,t,predicted_rul,true_rul"]
    for sample, pred in zip(samples, preds):
        _, unit, t = sample.origin
        true = "" if sample.y is None else repr(float(dataset.scaler.inverse_label(sample.y)))
        lines.append(f"{unit},{t},{pred!r},{true}")
    text = "\n".join(lines) + "\n"
    if out_path is not None:
        _write_atomic(Path(out_path), text)
    return text


def run_evaluate(checkpoint_path, data_path, truth_path=None, labeled: bool = True,
                 at: str = "last_window_per_unit", r_e: float = 125.0) -> dict:
    _require_files([checkpoint_path, data_path, truth_path])
    model = load_checkpoint(checkpoint_path)
    dataset = _load_for_checkpoint(model, data_path, truth_path, labeled, r_e)
    return dann.evaluate(model, dataset, at=at)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(parser):
    parser.add_argument("--config", required=True, help="INI experiment config")
    parser.add_argument("--out-dir", help="override [experiment] out_dir")
    parser.add_argument("--seed", type=int, help="override [experiment] seed")
    parser.add_argument("--trials", type=int, help="override [experiment] trials")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.out_dir is not None:
        overrides.append(f"experiment.out_dir={args.out_dir}")
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.trials is not None:
        overrides.append(f"experiment.trials={args.trials}")
    if not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    return parse_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ruladapt",
                                     description="RUL regression with adversarial domain adaptation")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("train-dann", "train-baseline", "synth"):
        _add_config_args(sub.add_parser(name))

    p_pred = sub.add_parser("predict")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--truth")
    p_pred.add_argument("--labeled", action="store_true",
                        help="treat the data file as run-to-failure and label it")
    p_pred.add_argument("--at", choices=("last_window_per_unit", "all_windows"),
                        default="last_window_per_unit")
    p_pred.add_argument("--r-e", type=float, default=125.0)
    p_pred.add_argument("--out", help="output CSV path (stdout when omitted)")

    p_eval = sub.add_parser("evaluate")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--truth")
    p_eval.add_argument("--labeled", action="store_true")
    p_eval.add_argument("--at", choices=("last_window_per_unit", "all_windows"),
                        default="last_window_per_unit")
    p_eval.add_argument("--r-e", type=float, default=125.0)

    args = parser.parse_args(argv)
    from .perf import keep_malloc_heap

    keep_malloc_heap()
    try:
        if args.command == "train-dann":
            result = run_dann_experiment(_config_from_args(args))
            print(json.dumps(result["metrics"], indent=2, sort_keys=True))
        elif args.command == "train-baseline":
            result = run_baseline_experiment(_config_from_args(args))
            print(json.dumps(result["metrics"], indent=2, sort_keys=True))
        elif args.command == "synth":
            result = run_synth(_config_from_args(args))
            print(json.dumps(result["paths"], indent=2, sort_keys=True))
        elif args.command == "predict":
            text = run_predict(args.checkpoint, args.data, args.out, at=args.at,
                               truth_path=args.truth, labeled=args.labeled, r_e=args.r_e)
            if args.out is None:
                sys.stdout.write(text)
        elif args.command == "evaluate":
            metrics = run_evaluate(args.checkpoint, args.data, truth_path=args.truth,
                                   labeled=args.labeled, at=args.at, r_e=args.r_e)
            print(json.dumps(metrics, indent=2, sort_keys=True))
    except (ConfigError, DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
