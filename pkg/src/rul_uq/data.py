"""Synthetic run-to-failure fleet generator, windowing and dataset files.

Each unit flies one cycle (flight) after another. Its health stays flat
(small jitter) until the fault onset ``h_s`` and then degrades as
``-a * (exp(b * (t - h_s)) - 1)`` until it crosses ``-threshold``, which
is the end of life. Sensors are a fixed seeded nonlinear map of the
operating descriptors and the health, plus Gaussian noise whose scale
grows linearly from onset to end of life.

Bundle directory layout::

    manifest.json           units, config echo, noise law, format_version
    windows_{split}.csv     unit_id,cycle,lifetime_fraction,f_000..,rul
    stats.csv               feature_index,mean,std (training split only)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

FORMAT_VERSION = 1
N_DESCRIPTORS = 4
N_SENSORS = 14
SPLITS = ("train", "valid", "test")
STD_TOLERANCE = 1e-9
SIGNIFICANT_DIGITS = 9


class DataError(ValueError):
    """Malformed, inconsistent or unusable dataset content."""


# ---------------------------------------------------------------------------
# configuration and unit descriptions
# ---------------------------------------------------------------------------


@dataclass
class ScenarioConfig:
    n_dev_units: int = 12
    n_test_units: int = 6
    n_ood_units: int = 2
    n_datasets: int = 2
    dev_class_ratios: tuple[float, float, float] = (0.10, 0.27, 0.62)
    test_class_ratios: tuple[float, float, float] = (0.17, 0.34, 0.49)
    # raw 1 Hz samples per flight, by flight class
    steps_per_cycle: tuple[int, int, int] = (100, 150, 200)
    decimation: int = 10
    window: int = 30
    stride: int = 1
    onset_range: tuple[int, int] = (8, 20)
    # cycles from onset to end of life, by flight class
    duration_by_class: tuple[float, float, float] = (70.0, 60.0, 50.0)
    duration_spread: float = 0.03
    a_range: tuple[float, float] = (0.3, 0.5)
    threshold: float = 1.0
    health_jitter: float = 0.003
    sigma0: float = 0.1
    noise_growth: float = 40.0
    ood_b_factor: float = 1.5
    valid_ratio: float = 0.9
    max_cycles: int = 1000

    def __post_init__(self):
        for name in ("dev_class_ratios", "test_class_ratios", "steps_per_cycle",
                     "onset_range", "duration_by_class", "a_range"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.n_dev_units < 1 or self.n_test_units < 0:
            raise DataError("need at least one development unit")
        if not 0 <= self.n_ood_units <= self.n_test_units:
            raise DataError("n_ood_units must be between 0 and n_test_units")
        if self.n_datasets < 1:
            raise DataError("n_datasets must be >= 1")
        for name in ("dev_class_ratios", "test_class_ratios"):
            ratios = getattr(self, name)
            if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=0.02):
                raise DataError(f"{name} must be three non-negative values summing to 1")
        if len(self.steps_per_cycle) != 3 or len(self.duration_by_class) != 3:
            raise DataError("per-class settings need exactly three entries")
        if self.decimation < 1 or self.window < 1 or self.stride < 1:
            raise DataError("decimation, window and stride must be >= 1")
        lo, hi = self.onset_range
        if not 0 < lo <= hi:
            raise DataError("onset_range must satisfy 0 < lo <= hi")
        a_lo, a_hi = self.a_range
        if not 0 < a_lo <= a_hi:
            raise DataError("a_range must satisfy 0 < lo <= hi")
        if not 0 <= self.duration_spread < 1:
            raise DataError("duration_spread must lie in [0, 1)")
        if not 0 < self.valid_ratio < 1:
            raise DataError("valid_ratio (training share) must lie in (0, 1)")
        if self.ood_b_factor <= 1:
            raise DataError("ood_b_factor must exceed 1 to leave the envelope")
        if self.sigma0 < 0 or self.noise_growth < 0:
            raise DataError("noise law parameters must be non-negative")

    def b_envelope(self) -> tuple[float, float]:
        a_lo, a_hi = self.a_range
        tau_lo = min(self.duration_by_class) * (1 - self.duration_spread)
        tau_hi = max(self.duration_by_class) * (1 + self.duration_spread)
        return (math.log1p(self.threshold / a_hi) / tau_hi, math.log1p(self.threshold / a_lo) / tau_lo)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": {},
    "tiny": {
        "n_dev_units": 4,
        "n_test_units": 2,
        "n_ood_units": 1,
        "steps_per_cycle": (20, 30, 40),
        "duration_by_class": (30.0, 25.0, 20.0),
        "onset_range": (4, 8),
        "window": 10,
    },
}


def preset(name: str, **overrides) -> ScenarioConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise DataError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    base.update(overrides)
    return ScenarioConfig(**base)


@dataclass
class UnitSpec:
    unit_id: int
    dataset_id: int
    flight_class: int
    a: float
    b: float
    h_s: int
    total_cycles: int
    ood_flag: bool = False
    split: str = "dev"
    end_of_life: int | None = None

    def __post_init__(self):
        if self.flight_class not in (1, 2, 3):
            raise DataError(f"unit {self.unit_id}: flight_class must be 1, 2 or 3")
        if not 0 < self.h_s < self.total_cycles:
            raise DataError(f"unit {self.unit_id}: need 0 < h_s < total_cycles")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# sensor model and simulation
# ---------------------------------------------------------------------------

# nominal descriptor level and scale used to normalize (alt kft, Mach, TRA %, T2 K)
_W_REF = np.array([20.0, 0.5, 60.0, 270.0])
_W_SCALE = np.array([12.0, 0.25, 20.0, 15.0])
_CRUISE = {1: (16.0, 0.55, 62.0), 2: (26.0, 0.70, 66.0), 3: (35.0, 0.80, 70.0)}


@dataclass
class SensorModel:
    """Seeded map from (descriptors, health) to sensor readings."""

    mixing: np.ndarray  # (N_DESCRIPTORS, N_SENSORS)
    offset: np.ndarray  # (N_SENSORS,)
    sensitivity: dict[int, np.ndarray]  # dataset_id -> (N_SENSORS,)
    sigma0: float
    noise_growth: float
    health_jitter: float = 0.0

    @classmethod
    def from_seed(cls, seed, n_datasets: int, sigma0: float, noise_growth: float,
                  health_jitter: float = 0.0) -> "SensorModel":
        rng = np.random.default_rng(seed)
        mixing = rng.normal(0.0, 0.6, size=(N_DESCRIPTORS, N_SENSORS))
        offset = rng.normal(0.0, 0.5, size=N_SENSORS)
        sensitivity = {}
        for ds in range(1, n_datasets + 1):
            mag = rng.uniform(0.6, 1.4, size=N_SENSORS) * rng.choice([-1.0, 1.0], size=N_SENSORS)
            # each failure mode leaves a subset of channels nearly blind to health
            blind = rng.choice(N_SENSORS, size=N_SENSORS // 3, replace=False)
            mag[blind] *= 0.15
            sensitivity[ds] = mag
        return cls(mixing, offset, sensitivity, sigma0, noise_growth, health_jitter)

    def noise_std(self, cycle, h_s: int, end_of_life: int) -> np.ndarray:
        """Ground-truth sensor noise scale, flat before onset then growing linearly."""
        cycle = np.asarray(cycle, dtype=np.float64)
        span = max(end_of_life - h_s, 1)
        frac = np.clip(cycle - h_s, 0.0, None) / span
        return self.sigma0 * (1.0 + self.noise_growth * frac)

    def sensors(self, w: np.ndarray, health: np.ndarray, dataset_id: int) -> np.ndarray:
        """Noise-free readings g(W, health)."""
        zw = (w - _W_REF) / _W_SCALE
        z = zw @ self.mixing + self.offset
        # health effect is amplified at high throttle
        gain = 1.0 + 0.3 * np.tanh(zw[:, 2:3])
        z = z + gain * health[:, None] * self.sensitivity[dataset_id]
        return z + 0.25 * np.tanh(z)


@dataclass
class UnitSeries:
    unit_id: int
    cycle: np.ndarray  # (n,) flight index of every raw step
    w: np.ndarray  # (n, N_DESCRIPTORS)
    x_s: np.ndarray  # (n, N_SENSORS)
    health: np.ndarray  # (n,)
    noise_std: np.ndarray  # (n,)
    h_s: int
    end_of_life: int


def health_trajectory(cycles: np.ndarray, a: float, b: float, h_s: int) -> np.ndarray:
    t = np.asarray(cycles, dtype=np.float64)
    return np.where(t >= h_s, -a * np.expm1(b * np.clip(t - h_s, 0.0, None)), 0.0)


def end_of_life_cycle(a: float, b: float, h_s: int, threshold: float, horizon: int) -> int:
    cycles = np.arange(horizon + 1)
    below = np.nonzero(health_trajectory(cycles, a, b, h_s) <= -threshold)[0]
    if below.size == 0:
        raise DataError(
            f"health never crosses -{threshold} within {horizon} cycles (a={a}, b={b})"
        )
    return int(below[0])


def flight_profile(flight_class: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Descriptors (altitude, Mach, TRA, T2) for one flight of ``n_steps`` seconds."""
    alt_c, mach_c, tra_c = _CRUISE[flight_class]
    alt_c = alt_c + rng.normal(0.0, 1.5)
    mach_c = mach_c + rng.normal(0.0, 0.02)
    u = (np.arange(n_steps) + 0.5) / n_steps
    shape = np.clip(np.minimum(u, 1.0 - u) / 0.25, 0.0, 1.0)
    climb = (u < 0.25).astype(np.float64)
    descent = (u > 0.75).astype(np.float64)
    alt = alt_c * shape
    mach = 0.2 + (mach_c - 0.2) * shape
    tra = tra_c + 18.0 * climb - 25.0 * descent
    t2 = 288.0 - 1.98 * alt + 12.0 * mach**2
    w = np.column_stack([alt, mach, tra, t2])
    return w + rng.normal(0.0, 1.0, size=w.shape) * _W_SCALE * 0.005


def simulate_unit(spec: UnitSpec, sm: SensorModel, rng: np.random.Generator,
                  steps_per_cycle: int = 100, threshold: float = 1.0) -> UnitSeries:
    """Run one unit from cycle 0 to its end of life at 1 Hz."""
    eol = end_of_life_cycle(spec.a, spec.b, spec.h_s, threshold, spec.total_cycles)
    cycles = np.arange(eol + 1)
    health = health_trajectory(cycles, spec.a, spec.b, spec.h_s)
    if sm.health_jitter > 0:
        health = health + rng.normal(0.0, sm.health_jitter, size=health.shape) * (cycles < spec.h_s)
    sigma = sm.noise_std(cycles, spec.h_s, eol)
    w = np.concatenate([flight_profile(spec.flight_class, steps_per_cycle, rng) for _ in cycles])
    step_cycle = np.repeat(cycles, steps_per_cycle)
    step_health = np.repeat(health, steps_per_cycle)
    step_sigma = np.repeat(sigma, steps_per_cycle)
    x_s = sm.sensors(w, step_health, spec.dataset_id)
    x_s = x_s + rng.standard_normal(x_s.shape) * step_sigma[:, None]
    return UnitSeries(spec.unit_id, step_cycle, w, x_s, step_health, step_sigma, spec.h_s, eol)


def rul_labels(cycles, h_s: int, end_of_life: int) -> np.ndarray:
    """Piece-wise linear RUL: plateau at ``eol - h_s`` before onset, then ``eol - t``."""
    t = np.asarray(cycles, dtype=np.float64)
    return end_of_life - np.maximum(t, float(h_s))


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass
class WindowSet:
    """Column-oriented sliding windows; features are (D, L) flattened row-major."""

    unit_id: np.ndarray
    cycle: np.ndarray
    lifetime_fraction: np.ndarray
    features: np.ndarray
    rul: np.ndarray

    def __post_init__(self):
        self.unit_id = np.asarray(self.unit_id, dtype=np.int64)
        self.cycle = np.asarray(self.cycle, dtype=np.int64)
        self.lifetime_fraction = np.asarray(self.lifetime_fraction, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.rul = np.asarray(self.rul, dtype=np.float64)
        n = len(self.unit_id)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError("features must be (n_windows, n_features)")
        for name in ("cycle", "lifetime_fraction", "rul"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has the wrong length")

    def __len__(self) -> int:
        return len(self.unit_id)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.unit_id[idx], self.cycle[idx], self.lifetime_fraction[idx],
                         self.features[idx], self.rul[idx])

    @classmethod
    def concat(cls, parts: list["WindowSet"]) -> "WindowSet":
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))

    def equals(self, other: "WindowSet") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def make_windows(series: UnitSeries, window: int = 30, stride: int = 1, downsample: int = 10,
                 digits: int | None = None) -> WindowSet:
    """Decimate, then cut (D x L) windows labeled at their last step.

    ``digits`` rounds the decimated signal to that many significant digits
    before windowing (the precision used on disk).
    """
    if window < 1 or stride < 1 or downsample < 1:
        raise DataError("window, stride and downsample must be >= 1")
    keep = slice(None, None, downsample)
    signal = np.concatenate([series.w[keep], series.x_s[keep]], axis=1)
    if digits is not None:
        signal = quantize(signal, digits)
    cycles = series.cycle[keep]
    n = len(cycles)
    if n < window:
        raise DataError(f"unit {series.unit_id}: {n} steps after decimation, window needs {window}")
    ends = np.arange(window - 1, n, stride)
    starts = ends - window + 1
    idx = starts[:, None] + np.arange(window)[None, :]
    # (n_windows, L, D) -> (n_windows, D, L) -> flat
    feats = signal[idx].transpose(0, 2, 1).reshape(len(ends), -1)
    end_cycle = cycles[ends]
    return WindowSet(
        unit_id=np.full(len(ends), series.unit_id),
        cycle=end_cycle,
        lifetime_fraction=end_cycle / series.end_of_life,
        features=feats,
        rul=rul_labels(end_cycle, series.h_s, series.end_of_life),
    )


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"

    @classmethod
    def fit(cls, windows: WindowSet, source: str = "train") -> "StandardizationStats":
        mean = windows.features.mean(axis=0)
        std = windows.features.std(axis=0)
        bad = np.nonzero(std <= STD_TOLERANCE)[0]
        if bad.size:
            raise DataError(f"degenerate (constant) feature channels: {bad[:10].tolist()}")
        return cls(mean, std, source)

    def equals(self, other: "StandardizationStats") -> bool:
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


def standardize(windows: WindowSet, stats: StandardizationStats) -> WindowSet:
    if np.any(stats.std <= STD_TOLERANCE):
        raise DataError("standardization stats contain a degenerate channel")
    if stats.mean.shape[0] != windows.n_features:
        raise DataError(
            f"stats cover {stats.mean.shape[0]} features, windows have {windows.n_features}"
        )
    return replace(windows, features=(windows.features - stats.mean) / stats.std)


def split_dev(windows: WindowSet, ratio: float, seed) -> tuple[WindowSet, WindowSet]:
    """Uniform random window-level split; order within each side is preserved."""
    if not 0 < ratio < 1:
        raise DataError("ratio must lie in (0, 1)")
    n = len(windows)
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} windows at ratio {ratio} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    valid_idx = np.sort(perm[n_train:])
    return windows.take(train_idx), windows.take(valid_idx)


def quantize(arr: np.ndarray, digits: int = SIGNIFICANT_DIGITS) -> np.ndarray:
    """Round to ``digits`` significant decimal digits (the on-disk precision)."""
    arr = np.asarray(arr, dtype=np.float64)
    text = np.char.mod(f"%.{digits}g", arr.ravel())
    return text.astype(np.float64).reshape(arr.shape)


# ---------------------------------------------------------------------------
# split-tagged arrays for training
# ---------------------------------------------------------------------------


class TrainingData:
    """Split-tagged (x, y) arrays that log every access by split name."""

    def __init__(self, splits: dict[str, tuple[np.ndarray, np.ndarray]]):
        self._splits = {k: (np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
                        for k, (x, y) in splits.items()}
        self.access_log: list[str] = []

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._splits:
            raise DataError(f"no split named {name!r}")
        self.access_log.append(name)
        x, y = self._splits[name]
        if len(y) == 0:
            raise DataError(f"split {name!r} is empty")
        return x, y

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._splits)

    @property
    def n_features(self) -> int:
        return next(iter(self._splits.values()))[0].shape[1]


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------


@dataclass
class DatasetBundle:
    manifest: dict
    windows: dict[str, WindowSet]
    stats: StandardizationStats
    access_log: list[str] = field(default_factory=list)

    def split(self, name: str) -> WindowSet:
        if name not in self.windows:
            raise DataError(f"bundle has no split {name!r}")
        self.access_log.append(name)
        return self.windows[name]

    def standardized(self, name: str) -> WindowSet:
        return standardize(self.split(name), self.stats)

    def training_data(self, include_test: bool = False) -> TrainingData:
        names = ["train", "valid"] + (["test"] if include_test else [])
        return TrainingData({n: (self.standardized(n).features, self.windows[n].rul) for n in names})

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(_manifest_bytes(self.manifest)).hexdigest()

    def units(self) -> dict[int, dict]:
        return {int(u["unit_id"]): u for u in self.manifest["units"]}

    def ground_truth_noise(self, name: str) -> np.ndarray:
        """Generator noise scale at the last step of every window in a split."""
        law = self.manifest.get("noise_law")
        if law is None:
            raise DataError("bundle carries no ground-truth noise law (external data?)")
        units = self.units()
        ws = self.windows[name]
        out = np.empty(len(ws))
        for uid in np.unique(ws.unit_id):
            u = units[int(uid)]
            mask = ws.unit_id == uid
            span = max(u["end_of_life"] - u["h_s"], 1)
            frac = np.clip(ws.cycle[mask] - u["h_s"], 0, None) / span
            out[mask] = law["sigma0"] * (1.0 + law["noise_growth"] * frac)
        return out

    def equals(self, other: "DatasetBundle") -> bool:
        return (
            _manifest_bytes(self.manifest) == _manifest_bytes(other.manifest)
            and set(self.windows) == set(other.windows)
            and all(self.windows[k].equals(other.windows[k]) for k in self.windows)
            and self.stats.equals(other.stats)
        )


def _allocate_classes(n: int, ratios, rng: np.random.Generator) -> list[int]:
    """Largest-remainder allocation of flight classes, then shuffled."""
    raw = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[j] += 1
    classes = np.repeat([1, 2, 3], counts)
    rng.shuffle(classes)
    return classes.tolist()


def generate_scenario(cfg: ScenarioConfig, seed: int) -> DatasetBundle:
    """Simulate a fleet, window it, split it and fit standardization stats.

    A pure function of ``(cfg, seed)``.
    """
    cfg.validate()
    root = np.random.SeedSequence(seed)
    sensor_ss, unit_ss, split_ss, *sim_ss = root.spawn(3 + cfg.n_dev_units + cfg.n_test_units)
    sm = SensorModel.from_seed(sensor_ss, cfg.n_datasets, cfg.sigma0, cfg.noise_growth, cfg.health_jitter)
    rng = np.random.default_rng(unit_ss)
    b_lo, b_hi = cfg.b_envelope()

    classes = _allocate_classes(cfg.n_dev_units, cfg.dev_class_ratios, rng)
    classes += _allocate_classes(cfg.n_test_units, cfg.test_class_ratios, rng)
    n_units = cfg.n_dev_units + cfg.n_test_units
    ood_ids = set()
    if cfg.n_ood_units:
        test_ids = np.arange(cfg.n_dev_units + 1, n_units + 1)
        ood_ids = set(rng.choice(test_ids, size=cfg.n_ood_units, replace=False).tolist())

    specs: list[UnitSpec] = []
    for k in range(n_units):
        uid = k + 1
        fc = classes[k]
        tau_mean = cfg.duration_by_class[fc - 1]
        h_s = int(rng.integers(cfg.onset_range[0], cfg.onset_range[1] + 1))
        if uid in ood_ids:
            # faster than anything seen in development, with a typical life length
            b = b_hi * cfg.ood_b_factor
            a = cfg.threshold / math.expm1(b * tau_mean)
        else:
            a = float(rng.uniform(*cfg.a_range))
            tau = tau_mean * float(rng.uniform(1 - cfg.duration_spread, 1 + cfg.duration_spread))
            b = math.log1p(cfg.threshold / a) / tau
        eol = end_of_life_cycle(a, b, h_s, cfg.threshold, cfg.max_cycles)
        specs.append(UnitSpec(
            unit_id=uid,
            dataset_id=k % cfg.n_datasets + 1,
            flight_class=fc,
            a=a,
            b=b,
            h_s=h_s,
            total_cycles=cfg.max_cycles,
            ood_flag=uid in ood_ids,
            split="dev" if k < cfg.n_dev_units else "test",
            end_of_life=eol,
        ))

    dev_parts, test_parts = [], []
    for spec, ss in zip(specs, sim_ss):
        series = simulate_unit(spec, sm, np.random.default_rng(ss),
                               cfg.steps_per_cycle[spec.flight_class - 1], cfg.threshold)
        ws = make_windows(series, cfg.window, cfg.stride, cfg.decimation, digits=SIGNIFICANT_DIGITS)
        (dev_parts if spec.split == "dev" else test_parts).append(ws)

    dev = _quantized(WindowSet.concat(dev_parts))
    train, valid = split_dev(dev, cfg.valid_ratio, split_ss)
    windows = {"train": train, "valid": valid}
    if test_parts:
        windows["test"] = _quantized(WindowSet.concat(test_parts))
    stats = StandardizationStats.fit(train, source="train")
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "scenario": cfg.to_dict(),
        "n_descriptors": N_DESCRIPTORS,
        "n_sensors": N_SENSORS,
        "window": cfg.window,
        "stats_source": "train",
        "envelope": {"a": list(cfg.a_range), "b": [b_lo, b_hi]},
        "noise_law": {"sigma0": cfg.sigma0, "noise_growth": cfg.noise_growth},
        "units": [s.to_dict() for s in specs],
    }
    return DatasetBundle(manifest, windows, stats)


def _quantized(ws: WindowSet) -> WindowSet:
    # features were rounded before windowing
    return replace(ws, lifetime_fraction=quantize(ws.lifetime_fraction), rul=quantize(ws.rul))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def feature_columns(n_features: int) -> list[str]:
    return [f"f_{i:03d}" for i in range(n_features)]


def _format_cells(values: np.ndarray) -> np.ndarray:
    """Decimal text for every entry; overlapping windows repeat values, so format each once."""
    uniq, inv = np.unique(values, return_inverse=True)
    text = np.array([f"{v:.{SIGNIFICANT_DIGITS}g}" for v in uniq.tolist()], dtype=object)
    return text[inv.reshape(values.shape)]


def write_windows(path, ws: WindowSet) -> None:
    header = ["unit_id", "cycle", "lifetime_fraction", *feature_columns(ws.n_features), "rul"]
    feats = _format_cells(ws.features)
    side = _format_cells(np.column_stack([ws.lifetime_fraction, ws.rul]))
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(ws)):
            fh.write(f"{ws.unit_id[i]},{ws.cycle[i]},{side[i, 0]},{','.join(feats[i])},{side[i, 1]}\n")


def read_windows(path) -> WindowSet:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().rstrip("\n").split(",")
    if len(header) < 5 or header[:3] != ["unit_id", "cycle", "lifetime_fraction"] or header[-1] != "rul":
        raise DataError(f"{path}: bad header; expected unit_id,cycle,lifetime_fraction,f_000..,rul")
    n_feat = len(header) - 4
    if header[3:-1] != feature_columns(n_feat):
        raise DataError(f"{path}: feature columns must be f_000..f_{n_feat - 1:03d}")
    try:
        df = pd.read_csv(path, dtype=np.float64, float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"{path}: unreadable windows file ({exc})") from exc
    values = df.to_numpy()
    bad = np.nonzero(~np.isfinite(values).all(axis=1))[0]
    if bad.size:
        row = int(bad[0])
        raise DataError(f"{path}: malformed or truncated data at row {row + 1} (line {row + 2})")
    for col in ("unit_id", "cycle"):
        if not np.all(df[col].to_numpy() == np.round(df[col].to_numpy())):
            raise DataError(f"{path}: column {col} must hold integers")
    return WindowSet(
        unit_id=df["unit_id"].to_numpy().astype(np.int64),
        cycle=df["cycle"].to_numpy().astype(np.int64),
        lifetime_fraction=df["lifetime_fraction"].to_numpy(),
        features=values[:, 3:-1],
        rul=df["rul"].to_numpy(),
    )


def write_stats(path, stats: StandardizationStats) -> None:
    df = pd.DataFrame({"feature_index": np.arange(len(stats.mean)), "mean": stats.mean, "std": stats.std})
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_stats(path) -> StandardizationStats:
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns) != ["feature_index", "mean", "std"]:
        raise DataError(f"{path}: stats header must be feature_index,mean,std")
    if not np.array_equal(df["feature_index"].to_numpy(), np.arange(len(df))):
        raise DataError(f"{path}: feature_index must run 0..n-1")
    return StandardizationStats(df["mean"].to_numpy(np.float64), df["std"].to_numpy(np.float64))


def save_dataset(bundle: DatasetBundle, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_bytes(_manifest_bytes(bundle.manifest))
    for name, ws in bundle.windows.items():
        write_windows(out / f"windows_{name}.csv", ws)
    write_stats(out / "stats.csv", bundle.stats)


def load_dataset(path, require_splits=("train", "valid")) -> DatasetBundle:
    """Load a bundle directory; also the entry point for externally produced data.

    Missing ``stats.csv`` is refit on the training split.
    """
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{root}: manifest.json not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{root}/manifest.json: invalid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{root}: format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    if "units" not in manifest:
        raise DataError(f"{root}: manifest lists no units")
    known = {int(u["unit_id"]) for u in manifest["units"]}
    windows = {}
    for name in SPLITS:
        f = root / f"windows_{name}.csv"
        if not f.exists():
            if name in require_splits:
                raise DataError(f"{root}: missing windows_{name}.csv")
            continue
        ws = read_windows(f)
        missing = sorted(set(np.unique(ws.unit_id).tolist()) - known)
        if missing:
            raise DataError(f"{f}: windows reference units absent from the manifest: {missing}")
        windows[name] = ws
    widths = {ws.n_features for ws in windows.values()}
    if len(widths) > 1:
        raise DataError(f"{root}: splits disagree on feature count {sorted(widths)}")
    stats_file = root / "stats.csv"
    stats = read_stats(stats_file) if stats_file.exists() else StandardizationStats.fit(windows["train"])
    return DatasetBundle(manifest, windows, stats)


def manifest_fingerprint(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()
