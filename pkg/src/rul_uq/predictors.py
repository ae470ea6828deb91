"""Predictive sampling, deep-ensemble mixtures and the variance decomposition."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import FunctionalModel, model_forward

METHODS = ("hnn", "mcd", "de", "bnn-naive", "bnn-lrt", "bnn-fo", "bnn-rad")
DEFAULT_MC_SAMPLES = 100


@dataclass
class PredictiveSampleSet:
    mu: np.ndarray  # (n_passes, batch)
    var: np.ndarray  # (n_passes, batch), strictly positive

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.var = np.atleast_2d(np.asarray(self.var, dtype=np.float64))
        if self.mu.shape != self.var.shape:
            raise ValueError(f"mu {self.mu.shape} and var {self.var.shape} are not congruent")
        if self.mu.shape[0] < 1:
            raise ValueError("a sample set needs at least one pass")
        if np.any(self.var <= 0):
            raise ValueError("predicted variances must be strictly positive")

    @property
    def n_passes(self) -> int:
        return self.mu.shape[0]


@dataclass
class Prediction:
    """Vectorized predictions for a batch; total = epistemic + aleatoric."""

    mu: np.ndarray
    var_epistemic: np.ndarray
    var_aleatoric: np.ndarray
    samples: PredictiveSampleSet | None = None
    nominal_split: bool = False

    @property
    def var_total(self) -> np.ndarray:
        return self.var_epistemic + self.var_aleatoric

    def __len__(self) -> int:
        return len(self.mu)

    def take(self, idx) -> "Prediction":
        samples = None
        if self.samples is not None:
            samples = PredictiveSampleSet(self.samples.mu[:, idx], self.samples.var[:, idx])
        return Prediction(
            self.mu[idx], self.var_epistemic[idx], self.var_aleatoric[idx], samples, self.nominal_split
        )


@dataclass
class Ensemble:
    members: list[FunctionalModel]
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")


def sample_predictive(
    model: FunctionalModel, x, n_passes: int, rng: np.random.Generator
) -> PredictiveSampleSet:
    """Run ``n_passes`` stochastic forward passes, one fresh noise bundle each."""
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if not model.is_stochastic:
        n_passes = 1
    mus, vars_ = [], []
    for _ in range(n_passes):
        bundle = model.draw_noise(rng, x.shape[0])
        mu, var = model_forward(model, x, bundle)
        mus.append(mu.data)
        vars_.append(var.data)
    return PredictiveSampleSet(np.stack(mus), np.stack(vars_))


def decompose(samples: PredictiveSampleSet) -> Prediction:
    """Split the predictive variance into spread of means and mean variance.

    The epistemic part is computed as mean((mu_i - mu_bar)^2), the
    cancellation-free form of mean(mu_i^2) - mu_bar^2. Passes are shifted
    by the first one beforehand, so identical passes give exactly zero.
    """
    shifted = samples.mu - samples.mu[0]
    mean_shift = shifted.mean(axis=0)
    mu_bar = samples.mu[0] + mean_shift
    epistemic = np.mean((shifted - mean_shift) ** 2, axis=0)
    aleatoric = samples.var.mean(axis=0)
    return Prediction(mu_bar, epistemic, aleatoric, samples)


def ensemble_mixture(outputs: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matched mean and variance of an equally weighted Gaussian mixture."""
    if not outputs:
        raise ValueError("ensemble_mixture needs at least one member output")
    mus = np.stack([np.asarray(m, dtype=np.float64) for m, _ in outputs])
    vars_ = np.stack([np.asarray(v, dtype=np.float64) for _, v in outputs])
    if np.any(vars_ <= 0):
        raise ValueError("member variances must be strictly positive")
    mu_bar = mus.mean(axis=0)
    return mu_bar, vars_.mean(axis=0) + np.mean((mus - mu_bar) ** 2, axis=0)


def _check_tag(method: str, model) -> None:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "de":
        if not isinstance(model, Ensemble):
            raise TypeError("method 'de' needs an Ensemble")
        return
    if not isinstance(model, FunctionalModel):
        raise TypeError(f"method {method!r} needs a single FunctionalModel")
    if method == "hnn" and model.is_stochastic:
        raise ValueError("method 'hnn' expects a deterministic model")
    if method == "mcd" and not model.has_dropout:
        raise ValueError("method 'mcd' expects a model with dropout layers")
    if method.startswith("bnn") and not model.is_variational:
        raise ValueError(f"method {method!r} expects variational layers")


def predict(method: str, model, x, n_passes: int = DEFAULT_MC_SAMPLES, rng=None) -> Prediction:
    """Uniform prediction facade over all methods."""
    _check_tag(method, model)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    if method == "hnn":
        mu, var = model_forward(model, x)
        return Prediction(mu.data, np.zeros_like(mu.data), var.data)
    if method == "de":
        outs = [model_forward(m, x) for m in model.members]
        samples = PredictiveSampleSet(
            np.stack([mu.data for mu, _ in outs]), np.stack([var.data for _, var in outs])
        )
        pred = decompose(samples)
        pred.nominal_split = True
        return pred
    return decompose(sample_predictive(model, x, n_passes, rng))


PREDICTION_COLUMNS = (
    "unit_id",
    "cycle",
    "lifetime_fraction",
    "y_true",
    "mu",
    "sigma_total",
    "sigma_epistemic",
    "sigma_aleatoric",
)


def write_prediction_dump(path, unit_id, cycle, lifetime_fraction, y_true, pred: Prediction) -> None:
    """CSV dump, one row per window; sigma columns are standard deviations."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        cols = (
            np.sqrt(pred.var_total),
            np.sqrt(pred.var_epistemic),
            np.sqrt(pred.var_aleatoric),
        )
        for i in range(len(pred)):
            writer.writerow(
                [
                    int(unit_id[i]),
                    int(cycle[i]),
                    repr(float(lifetime_fraction[i])),
                    repr(float(y_true[i])),
                    repr(float(pred.mu[i])),
                    *(repr(float(c[i])) for c in cols),
                ]
            )


def read_prediction_dump(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_COLUMNS:
            raise ValueError(f"{path}: unexpected prediction header {header!r}")
        rows = [r for r in reader]
    out: dict[str, np.ndarray] = {}
    for j, name in enumerate(PREDICTION_COLUMNS):
        dtype = np.int64 if name in ("unit_id", "cycle") else np.float64
        out[name] = np.array([r[j] for r in rows], dtype=dtype)
    return out
