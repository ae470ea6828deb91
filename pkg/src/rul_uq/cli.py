"""Batch command line: generate, train, predict, evaluate, compare.

Settings come from one JSON config file with a section per concern::

    {
      "scenario": {"preset": "desk", "n_dev_units": 12},
      "train": {"common": {"max_epochs": 40}, "bnn-lrt": {"learning_rate": 0.002}},
      "ensemble": {"k_pool": 10, "k_members": 5, "workers": 1},
      "evaluate": {"mc_samples": 100, "levels": 101, "confidence_levels": 21, "lifetime_bins": 10},
      "compare": {"sort_key": "nll_moment"}
    }

Precedence is flag > config > built-in default. Exit codes: 0 success,
2 configuration, 3 data, 4 numerical failure, 5 file system.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .data import DataError, DatasetBundle, ScenarioConfig, generate_scenario, load_dataset, preset, save_dataset
from .layers import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import (
    DEFAULT_CONFIDENCE_LEVELS,
    DEFAULT_LEVELS,
    DEFAULT_LIFETIME_BINS,
    EvalRows,
    build_report,
    compare_reports,
    export_curves,
    format_comparison,
    read_report,
    write_report,
)
from .predictors import DEFAULT_MC_SAMPLES, METHODS, Ensemble, predict, write_prediction_dump
from .trainer import (
    DEFAULT_K_MEMBERS,
    DEFAULT_K_POOL,
    TrainConfig,
    TrainingError,
    assemble_ensemble,
    train_method,
    train_pool,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

log = logging.getLogger("rul_uq")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SECTIONS = ("scenario", "train", "ensemble", "evaluate", "compare")
_EVALUATE_KEYS = {"mc_samples", "levels", "confidence_levels", "lifetime_bins"}
_ENSEMBLE_KEYS = {"k_pool", "k_members", "workers"}
_COMPARE_KEYS = {"sort_key"}


@dataclass
class RunConfig:
    scenario: dict | None = None
    train: dict = field(default_factory=dict)
    ensemble: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}; allowed: {list(SECTIONS)}")
        cfg = cls(
            scenario=doc.get("scenario"),
            train=dict(doc.get("train", {})),
            ensemble=dict(doc.get("ensemble", {})),
            evaluate=dict(doc.get("evaluate", {})),
            compare=dict(doc.get("compare", {})),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def validate(self) -> None:
        for name, allowed in (("evaluate", _EVALUATE_KEYS), ("ensemble", _ENSEMBLE_KEYS),
                              ("compare", _COMPARE_KEYS)):
            unknown = set(getattr(self, name)) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
        unknown = set(self.train) - {"common", *METHODS}
        if unknown:
            raise ConfigError(f"unknown keys in 'train': {sorted(unknown)}")
        if self.scenario is not None:
            self.scenario_config()
        for method in METHODS:
            if method in self.train or "common" in self.train:
                self.train_config(method, seed=0)

    def scenario_config(self) -> ScenarioConfig:
        if self.scenario is None:
            raise ConfigError("config is missing the 'scenario' section")
        sc = dict(self.scenario)
        name = sc.pop("preset", None)
        try:
            return preset(name, **sc) if name else ScenarioConfig.from_dict(sc)
        except (TypeError, DataError) as exc:
            raise ConfigError(f"scenario: {exc}") from None

    def train_config(self, method: str, seed: int) -> TrainConfig:
        overrides = {**self.train.get("common", {}), **self.train.get(method, {}), "seed": seed}
        try:
            return TrainConfig.for_method(method, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.{method}: {exc}") from None

    def ensemble_sizes(self) -> tuple[int, int, int]:
        e = self.ensemble
        return (int(e.get("k_pool", DEFAULT_K_POOL)), int(e.get("k_members", DEFAULT_K_MEMBERS)),
                int(e.get("workers", 1)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args, cfg: RunConfig) -> int:
    if args.config is not None:
        scenario = cfg.scenario_config()
    else:
        scenario = preset(args.preset)
    seed = 0 if args.seed is None else args.seed
    bundle = generate_scenario(scenario, seed)
    out = _out_dir(args.out)
    save_dataset(bundle, out)
    counts = ", ".join(f"{k}={len(v)}" for k, v in bundle.windows.items())
    n_units = len(bundle.manifest["units"])
    n_ood = sum(u["ood_flag"] for u in bundle.manifest["units"])
    print(f"generated {n_units} units ({n_ood} OOD); windows: {counts}; fingerprint {bundle.fingerprint[:12]}")
    return EXIT_OK


def _stem(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


def cmd_train(args, cfg: RunConfig) -> int:
    seed = 0 if args.seed is None else args.seed
    bundle = load_dataset(args.data)
    data = bundle.training_data()
    out = _out_dir(args.out)
    stem = _stem(args.method, seed)
    if args.method == "de":
        k_pool, k_members, workers = cfg.ensemble_sizes()
        if args.members:
            pool, seeds = [], []
            for path in args.members:
                ck = load_checkpoint(path)
                if ck.method != "hnn":
                    raise ConfigError(f"{path}: ensemble members must be hnn checkpoints, got {ck.method}")
                _check_fingerprint(ck, bundle, path)
                pool.extend(ck.models)
                seeds.extend(ck.seeds)
        else:
            tc = cfg.train_config("de", seed)
            pool, seeds, histories = train_pool(k_pool, data, tc, n_workers=workers)
            for s, h in zip(seeds, histories):
                h.to_csv(out / f"{stem}_member{s}_history.csv")
        ens = assemble_ensemble(pool, seeds, min(k_members, len(pool)), subset_seed=seed)
        ckpt = Checkpoint("de", ens.members, ens.seeds, bundle.fingerprint,
                          {"pool_seeds": list(seeds), "subset_seed": seed})
    else:
        tc = cfg.train_config(args.method, seed)
        model, history = train_method(data, tc, log=log.debug)
        history.to_csv(out / f"{stem}_history.csv")
        ckpt = Checkpoint(args.method, [model], [seed], bundle.fingerprint,
                          {"train_config": tc.to_dict(), "stop_epoch": history.stop_epoch,
                           "best_epoch": history.best_epoch, "best_valid_loss": history.best_valid_loss})
        print(f"{args.method} seed {seed}: stopped at epoch {history.stop_epoch}, "
              f"best valid loss {history.best_valid_loss:.4f} (epoch {history.best_epoch})")
    if "test" in bundle.access_log:
        raise RuntimeError("training touched the test split")
    save_checkpoint(out / f"{stem}.ckpt.json", ckpt)
    return EXIT_OK


def _check_fingerprint(ckpt: Checkpoint, bundle: DatasetBundle, path) -> None:
    if ckpt.dataset_fingerprint and ckpt.dataset_fingerprint != bundle.fingerprint:
        log.warning("%s was trained on dataset %s, evaluating on %s", path,
                    ckpt.dataset_fingerprint[:12], bundle.fingerprint[:12])


def _predict(args, cfg: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.data, require_splits=(args.split,))
    _check_fingerprint(ckpt, bundle, args.checkpoint)
    windows = bundle.standardized(args.split)
    n_in = ckpt.models[0].n_in
    if n_in != windows.n_features:
        raise DataError(f"checkpoint expects {n_in} features per window, "
                        f"split '{args.split}' has {windows.n_features}")
    n = args.mc_samples if args.mc_samples is not None else int(cfg.evaluate.get("mc_samples", DEFAULT_MC_SAMPLES))
    if ckpt.method in ("hnn", "de") and args.mc_samples not in (None, 1):
        log.warning("method %s is deterministic; using a single pass instead of %d", ckpt.method, n)
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    model = Ensemble(ckpt.models, ckpt.seeds) if ckpt.method == "de" else ckpt.models[0]
    pred = predict(ckpt.method, model, windows.features, n_passes=n, rng=rng)
    stem = f"{Path(args.checkpoint).name.removesuffix('.ckpt.json')}_{args.split}"
    return ckpt, bundle, windows, pred, stem, seed


def cmd_predict(args, cfg: RunConfig) -> int:
    _, _, windows, pred, stem, _ = _predict(args, cfg)
    out = _out_dir(args.out)
    write_prediction_dump(out / f"{stem}_predictions.csv", windows.unit_id, windows.cycle,
                          windows.lifetime_fraction, windows.rul, pred)
    print(f"wrote {len(pred)} predictions to {out / (stem + '_predictions.csv')}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if args.split != "test" and not args.allow_non_test:
        raise ConfigError("evaluating a non-test split needs --allow-non-test")
    ckpt, bundle, windows, pred, stem, _ = _predict(args, cfg)
    out = _out_dir(args.out)
    write_prediction_dump(out / f"{stem}_predictions.csv", windows.unit_id, windows.cycle,
                          windows.lifetime_fraction, windows.rul, pred)
    rows = EvalRows(windows.unit_id, windows.cycle, windows.lifetime_fraction, windows.rul, pred)
    ev = cfg.evaluate
    report = build_report(
        ckpt.method,
        ckpt.seeds[0] if ckpt.method != "de" else int(ckpt.extra.get("subset_seed", ckpt.seeds[0])),
        bundle.fingerprint,
        rows,
        bundle.units(),
        m=int(ev.get("levels", DEFAULT_LEVELS)),
        confidence_levels=int(ev.get("confidence_levels", DEFAULT_CONFIDENCE_LEVELS)),
        bins=int(ev.get("lifetime_bins", DEFAULT_LIFETIME_BINS)),
    )
    report["split"] = args.split
    write_report(out / f"{stem}_report.json", report)
    export_curves(report, out, stem)
    o = report["overall"]
    print(f"{ckpt.method}: rmse {o['rmse']:.3f} nll {o['nll_moment']:.3f} rmsce {o['rmsce']:.4f} "
          f"sharpness {o['sharpness']:.3f}")
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    reports = [read_report(p) for p in args.reports]
    sort_key = cfg.compare.get("sort_key", "nll_moment")
    try:
        table = compare_reports(reports, sort_key)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _out_dir(args.out)
    (out / "comparison.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    keys = ("nll_moment", "nll_mixture", "rmse", "mae", "rmsce", "miscalibration_area", "sharpness",
            "mean_entropy")
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_runs", *(f"{k}_{s}" for k in keys for s in ("mean", "sd"))])
        for row in table:
            cells = []
            for k in keys:
                s = row["metrics"][k]
                cells += ["" if s["mean"] is None else repr(s["mean"]), "" if s["std"] is None else repr(s["std"])]
            w.writerow([row["method"], row["n_runs"], *cells])
    for group in ("per_flight_class", "per_unit"):
        with (out / f"comparison_{group}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "seed", "group", "n", "rmse", "nll_moment", "rmsce", "sharpness"])
            for r in sorted(reports, key=lambda r: (r["method"], r["seed"])):
                for g, m in sorted(r[group].items(), key=lambda kv: int(kv[0])):
                    w.writerow([r["method"], r["seed"], g, m["n"], repr(m["rmse"]), repr(m["nll_moment"]),
                                repr(m["rmsce"]), repr(m["sharpness"])])
    print(format_comparison(table))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="rul-uq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate a synthetic fleet")
    g.add_argument("--preset", default="desk", help="scenario preset when no config is given")

    t = sub.add_parser("train", parents=[common], help="train one model or a deep ensemble")
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--members", nargs="+", type=Path,
                   help="for --method de: assemble from these trained hnn checkpoints")

    for name, helptext in (("predict", "write a prediction dump"),
                           ("evaluate", "write predictions, metrics report and curves")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--split", choices=("train", "valid", "test"), default="test")
        p.add_argument("--mc-samples", type=int, dest="mc_samples")
        if name == "evaluate":
            p.add_argument("--allow-non-test", action="store_true",
                           help="permit evaluating the train or valid split")

    c = sub.add_parser("compare", parents=[common], help="rank methods across report files")
    c.add_argument("reports", nargs="+", type=Path)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "mc_samples", None) is not None and args.mc_samples < 1:
            raise ConfigError("--mc-samples must be >= 1")
        cfg = RunConfig.load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
