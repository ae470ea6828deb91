"""End-to-end desk benchmark driven through the command line entry point.

Generates the desk scenario, trains every method, evaluates each on the
test split and writes the cross-method comparison::

    python3 -m rul_uq.pipeline --out runs/desk
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from .cli import EXIT_OK, main as cli_main
from .predictors import METHODS

# Desk-scale training overrides on top of the tuned full-size defaults. The tuned
# learning rates assume hundreds of epochs; a 40-epoch budget needs a larger step.
DESK_CONFIG: dict = {
    "scenario": {"preset": "desk"},
    "train": {
        "common": {"max_epochs": 40, "patience": 10, "scale_patience": False, "learning_rate": 0.002},
    },
    "ensemble": {"k_pool": 10, "k_members": 5, "workers": 1},
    "evaluate": {"mc_samples": 100, "levels": 101, "confidence_levels": 21, "lifetime_bins": 10},
    "compare": {"sort_key": "nll_moment"},
}


class PipelineError(RuntimeError):
    pass


def _run(argv: list[str]) -> None:
    code = cli_main(argv)
    if code != EXIT_OK:
        raise PipelineError(f"command failed with exit code {code}: {' '.join(argv)}")


def run_benchmark(out, config: dict | None = None, seed: int = 0, methods=METHODS) -> dict:
    """Run generate, train, evaluate and compare; returns paths and timings."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config or DESK_CONFIG, indent=1, sort_keys=True) + "\n")
    data, models, reports, cmp = out / "data", out / "models", out / "reports", out / "compare"
    timings = {}
    base = ["--config", str(cfg_path)]

    t = time.perf_counter()
    _run(["generate", *base, "--seed", str(seed), "--out", str(data)])
    timings["generate"] = time.perf_counter() - t

    k_pool = int((config or DESK_CONFIG).get("ensemble", {}).get("k_pool", 10))
    need_pool = "de" in methods
    hnn_seeds = [seed + j for j in range(k_pool)] if need_pool else [seed]
    checkpoints = {}
    for method in methods:
        t = time.perf_counter()
        if method == "de":
            members = [str(models / f"hnn_seed{s}.ckpt.json") for s in hnn_seeds]
            for s, path in zip(hnn_seeds, members):
                if not Path(path).exists():
                    _run(["train", *base, "--method", "hnn", "--seed", str(s), "--data", str(data),
                          "--out", str(models)])
            _run(["train", *base, "--method", "de", "--seed", str(seed), "--data", str(data),
                  "--out", str(models), "--members", *members])
        elif not (models / f"{method}_seed{seed}.ckpt.json").exists():
            _run(["train", *base, "--method", method, "--seed", str(seed), "--data", str(data),
                  "--out", str(models)])
        timings[f"train {method}"] = time.perf_counter() - t
        checkpoints[method] = models / f"{method}_seed{seed}.ckpt.json"

    report_paths = {}
    for method in methods:
        t = time.perf_counter()
        _run(["evaluate", *base, "--checkpoint", str(checkpoints[method]), "--data", str(data),
              "--split", "test", "--seed", str(seed), "--out", str(reports)])
        timings[f"evaluate {method}"] = time.perf_counter() - t
        report_paths[method] = reports / f"{method}_seed{seed}_test_report.json"

    t = time.perf_counter()
    _run(["compare", *base, "--out", str(cmp), *map(str, report_paths.values())])
    timings["compare"] = time.perf_counter() - t
    return {"data": data, "checkpoints": checkpoints, "reports": report_paths, "compare": cmp,
            "timings": timings}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python3 -m rul_uq.pipeline", description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path, help="JSON config replacing the built-in desk config")
    parser.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    args = parser.parse_args(argv)
    config = json.loads(args.config.read_text()) if args.config else None
    result = run_benchmark(args.out, config, args.seed, args.methods)
    total = sum(result["timings"].values())
    for step, secs in result["timings"].items():
        print(f"{step:<24} {secs:8.1f} s")
    print(f"{'total':<24} {total:8.1f} s")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
