"""Optimization loop: Adam, shuffled minibatches, pretraining, early stopping, ensembles."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import DomainError, NonFiniteError, Tape, Tensor, backward
from .data import DataError, TrainingData
from .layers import SAMPLER_BY_METHOD, FunctionalModel, ModelSpec, build_model, inverse_softplus, model_forward
from .objectives import ElboConfig, elbo_estimate, gaussian_nll, mcd_objective, rmse_loss, total_kl
from .predictors import METHODS, Ensemble

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
REFERENCE_MAX_EPOCHS = 500
# deep ensembles: pick 5 out of a pool of 10 independently trained networks
DEFAULT_K_POOL = 10
DEFAULT_K_MEMBERS = 5


class TrainingError(RuntimeError):
    """Training could not proceed (non-finite loss, bad data)."""


# tuned values for the full-size benchmark; desk runs override what they need
_LRT = dict(learning_rate=0.000857, batch_size=100, patience=20, pretrain_epochs=5, n_mc_train=1,
            prior_scale=0.138793, q_scale=0.001351)
METHOD_DEFAULTS: dict[str, dict] = {
    "hnn": dict(learning_rate=0.001574, batch_size=250, patience=50),
    "de": dict(learning_rate=0.001574, batch_size=250, patience=50),
    "mcd": dict(learning_rate=0.000772, batch_size=100, patience=50, dropout_p=0.241437, lam=1e-5),
    "bnn-naive": dict(_LRT),
    "bnn-lrt": dict(_LRT),
    "bnn-fo": dict(learning_rate=0.000948, batch_size=100, patience=20, pretrain_epochs=5, n_mc_train=2,
                   prior_scale=0.198768, q_scale=0.000214),
    "bnn-rad": dict(learning_rate=0.000956, batch_size=100, patience=20, pretrain_epochs=5, n_mc_train=1,
                    prior_scale=0.092516, q_scale=0.001241),
}


@dataclass
class TrainConfig:
    method: str = "hnn"
    learning_rate: float = 0.001574
    batch_size: int = 250
    max_epochs: int = 500
    patience: int = 50
    # shrink patience in proportion when max_epochs is below the reference 500
    scale_patience: bool = True
    pretrain_epochs: int = 0
    n_mc_train: int = 1
    n_mc_valid: int = 20
    seed: int = 0
    prior_scale: float = 1.0
    q_scale: float = 1e-3
    dropout_p: float = 0.0
    lam: float = 0.0
    hidden: tuple[int, ...] = (64, 32)
    kl_weighting: str = "geometric"
    kl_mode: str = "closed"
    init_output_bias: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        for name in ("max_epochs", "patience", "pretrain_epochs", "n_mc_valid", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "n_mc_train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.prior_scale <= 0 or self.q_scale <= 0:
            raise ValueError("prior_scale and q_scale must be positive")
        ElboConfig(self.n_mc_train, 1, self.kl_weighting, None, self.kl_mode)

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        if method not in METHOD_DEFAULTS:
            raise ValueError(f"unknown method {method!r}")
        values = {"method": method, **METHOD_DEFAULTS[method]}
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @property
    def effective_patience(self) -> int:
        if not self.scale_patience or self.max_epochs >= REFERENCE_MAX_EPOCHS:
            return self.patience
        scaled = self.patience * self.max_epochs / REFERENCE_MAX_EPOCHS
        return max(1, int(round(scaled))) if self.patience > 0 else 0

    def model_spec(self, n_in: int) -> ModelSpec:
        method = "hnn" if self.method == "de" else self.method
        return ModelSpec(
            method=method,
            n_in=n_in,
            hidden=self.hidden,
            sampler=SAMPLER_BY_METHOD.get(method),
            prior_scale=self.prior_scale,
            q_scale=self.q_scale,
            dropout_p=self.dropout_p if method == "mcd" else 0.0,
        )


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0

    @property
    def best_valid_loss(self) -> float:
        return min(self.valid_loss) if self.valid_loss else math.inf

    def to_csv(self, path) -> None:
        """Write (epoch, train_loss, valid_loss); wall time is left out so the file is reproducible."""
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "valid_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.valid_loss), start=1):
                writer.writerow([i, repr(tr), repr(va)])

    def same_losses(self, other: "TrainHistory") -> bool:
        return (self.train_loss == other.train_loss and self.valid_loss == other.valid_loss
                and self.stop_epoch == other.stop_epoch and self.best_epoch == other.best_epoch)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, state {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("adam_step: non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# losses per method
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _step(params: list[Tensor], state: AdamState, lr: float, loss_fn) -> float:
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape():
        loss = loss_fn()
        backward(loss)
    adam_step(params, [p.grad for p in params], state, lr)
    return loss.item()


def validation_loss(model: FunctionalModel, method: str, x, y, n_train: int, n_mc: int,
                    rng: np.random.Generator, kl_mode: str = "closed") -> float:
    """Per-datum validation objective.

    Variational models: KL / n_train + mean NLL averaged over ``n_mc`` draws.
    Dropout models: mean NLL averaged over ``n_mc`` mask draws.
    Deterministic models: mean NLL. Stochastic models always use at least one draw.
    """
    if not model.is_stochastic:
        mu, var = model_forward(model, x)
        return gaussian_nll(y, mu, var).item()
    n_mc = max(n_mc, 1)
    total = 0.0
    noises = []
    for _ in range(n_mc):
        noise = model.draw_noise(rng, len(y))
        noises.append(noise)
        mu, var = model_forward(model, x, noise)
        total += gaussian_nll(y, mu, var).item()
    loss = total / n_mc
    if model.is_variational:
        loss += total_kl(model, noises, kl_mode).item() / n_train
    return loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def pretrain_functional(model: FunctionalModel, data: TrainingData, epochs: int, lr: float = 1e-3,
                        batch_size: int = 100, seed: int = 0) -> FunctionalModel:
    """Fit the deterministic mean twin with an RMSE loss and copy it into the means.

    Scale parameters (rho) are left untouched; ``epochs == 0`` is a no-op.
    """
    if epochs <= 0:
        return model
    x, y = data.split("train")
    twin = model.mean_model()
    params = twin.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    for epoch in range(1, epochs + 1):
        for idx in _batches(len(y), batch_size, rng):
            def loss_fn(idx=idx):
                mu, _ = model_forward(twin, x[idx])
                return rmse_loss(y[idx], mu)
            try:
                _step(params, state, lr, loss_fn)
            except (NonFiniteError, DomainError) as exc:
                raise TrainingError(f"pretraining epoch {epoch}: {exc}") from exc
    model.load_means_from(twin)
    return model


def init_output_bias(model: FunctionalModel, y: np.ndarray) -> None:
    """Start the mean head at the label mean and the scale head at the label spread."""
    b_mu, b_rho = model.output_biases()
    b_mu.data[...] = float(np.mean(y))
    b_rho.data[...] = float(inverse_softplus(max(float(np.std(y)), 1e-3)))


def train(model: FunctionalModel, data: TrainingData, cfg: TrainConfig,
          log=None) -> tuple[FunctionalModel, TrainHistory]:
    """Minimize the method's objective with early stopping on the validation loss.

    Only the ``train`` and ``valid`` splits are read.
    """
    started = time.perf_counter()
    x_tr, y_tr = data.split("train")
    x_va, y_va = data.split("valid")
    n = len(y_tr)
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(streams[0])
    noise_rng = np.random.default_rng(streams[1])
    valid_ss = streams[2]

    if cfg.init_output_bias:
        init_output_bias(model, y_tr)
    if model.is_variational and cfg.pretrain_epochs > 0:
        pretrain_functional(model, data, cfg.pretrain_epochs, cfg.learning_rate, cfg.batch_size, cfg.seed)

    params = model.parameters()
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    best_state = model.get_state()
    best = math.inf
    bad_epochs = 0
    patience = cfg.effective_patience
    n_batches = math.ceil(n / cfg.batch_size)
    elbo_cfg = ElboConfig(cfg.n_mc_train, n_batches, cfg.kl_weighting, cfg.prior_scale, cfg.kl_mode)

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss = 0.0
        for pos, idx in enumerate(_batches(n, cfg.batch_size, shuffle_rng), start=1):
            xb, yb = x_tr[idx], y_tr[idx]
            if model.is_variational:
                noises = [model.draw_noise(noise_rng, len(idx)) for _ in range(cfg.n_mc_train)]

                def loss_fn(xb=xb, yb=yb, pos=pos, noises=noises):
                    return elbo_estimate(model, xb, yb, pos, elbo_cfg, noises)
            elif model.has_dropout:
                noise = model.draw_noise(noise_rng, len(idx))

                def loss_fn(xb=xb, yb=yb, noise=noise):
                    return mcd_objective(model, xb, yb, cfg.lam, noise)
            else:
                def loss_fn(xb=xb, yb=yb):
                    mu, var = model_forward(model, xb)
                    return gaussian_nll(yb, mu, var)
            try:
                value = _step(params, state, cfg.learning_rate, loss_fn)
            except (NonFiniteError, DomainError) as exc:
                raise TrainingError(f"epoch {epoch}, minibatch {pos}: {exc}") from exc
            if not math.isfinite(value):
                raise TrainingError(f"epoch {epoch}, minibatch {pos}: non-finite loss {value}")
            # variational losses are sums over the batch; others are means
            epoch_loss += value if model.is_variational else value * len(idx)
        train_loss = epoch_loss / n
        try:
            valid = validation_loss(model, cfg.method, x_va, y_va, n, cfg.n_mc_valid,
                                    np.random.default_rng(valid_ss), cfg.kl_mode)
        except (NonFiniteError, DomainError) as exc:
            raise TrainingError(f"epoch {epoch}: validation produced non-finite values ({exc})") from exc
        if not math.isfinite(valid):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss")
        history.train_loss.append(train_loss)
        history.valid_loss.append(valid)
        history.stop_epoch = epoch
        if log is not None:
            log(f"{cfg.method} seed {cfg.seed} epoch {epoch}: train {train_loss:.4f} valid {valid:.4f}")
        if valid < best:
            best = valid
            best_state = model.get_state()
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > patience:
                break
    model.set_state(best_state)
    for p in params:
        p.requires_grad = False
        p.grad = None
    history.wall_time = time.perf_counter() - started
    return model, history


def train_method(data: TrainingData, cfg: TrainConfig, log=None) -> tuple[FunctionalModel, TrainHistory]:
    """Build a fresh model for ``cfg.method`` (seeded by ``cfg.seed``) and train it."""
    if cfg.method == "de":
        raise ValueError("use train_ensemble for method 'de'")
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    model = build_model(cfg.model_spec(data.n_features), init_rng)
    return train(model, data, cfg, log)


def _train_member(args):
    data, cfg = args
    return train_method(data, cfg)


def train_pool(k_pool: int, data: TrainingData, cfg: TrainConfig, n_workers: int = 1
               ) -> tuple[list[FunctionalModel], list[int], list[TrainHistory]]:
    """Train ``k_pool`` heteroscedastic networks with seeds cfg.seed, cfg.seed + 1, ..."""
    if k_pool < 1:
        raise ValueError("k_pool must be >= 1")
    seeds = [cfg.seed + j for j in range(k_pool)]
    jobs = [(data, replace(cfg, method="hnn", seed=s)) for s in seeds]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_train_member, jobs))
        # workers read private copies; mirror their access into the caller's log
        data.access_log.extend(["train", "valid"] * k_pool)
    else:
        results = [_train_member(job) for job in jobs]
    return [m for m, _ in results], seeds, [h for _, h in results]


def assemble_ensemble(pool: list[FunctionalModel], pool_seeds: list[int], k_members: int,
                      subset_seed: int) -> Ensemble:
    """Uniform random subset of ``k_members`` models from a trained pool."""
    if k_members > len(pool):
        raise ValueError(f"k_members ({k_members}) exceeds the pool size ({len(pool)})")
    if k_members < 1:
        raise ValueError("k_members must be >= 1")
    chosen = np.sort(np.random.default_rng(subset_seed).choice(len(pool), size=k_members, replace=False))
    return Ensemble([pool[i] for i in chosen], [pool_seeds[i] for i in chosen])


def train_ensemble(k_pool: int, k_members: int, data: TrainingData, cfg: TrainConfig,
                   subset_seed: int | None = None, n_workers: int = 1) -> Ensemble:
    """Train a pool of ``k_pool`` networks and draw a ``k_members`` ensemble from it."""
    if k_members > k_pool:
        raise ValueError(f"k_members ({k_members}) exceeds k_pool ({k_pool})")
    pool, seeds, _ = train_pool(k_pool, data, cfg, n_workers)
    return assemble_ensemble(pool, seeds, k_members, cfg.seed if subset_seed is None else subset_seed)


def random_sweep(data: TrainingData, base: TrainConfig, space: dict[str, list], n_trials: int,
                 seed: int = 0) -> list[tuple[dict, float]]:
    """Seeded random search: each trial picks one value per key from ``space``.

    Returns (overrides, best validation loss) pairs sorted by loss.
    """
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_trials):
        overrides = {k: values[int(rng.integers(len(values)))] for k, values in space.items()}
        cfg = replace(base, **overrides)
        try:
            _, history = train_method(data, cfg)
            score = history.best_valid_loss
        except (TrainingError, DataError):
            score = math.inf
        results.append((overrides, score))
    return sorted(results, key=lambda r: r[1])
