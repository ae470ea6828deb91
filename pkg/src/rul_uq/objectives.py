"""Training objectives: Gaussian NLL, KL terms, minibatch ELBO, dropout loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import DomainError, Tensor
from .layers import FunctionalModel, VariationalLinear, model_forward, radial_direction

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ElboConfig:
    n_mc_train: int = 1
    n_batches: int = 1
    weighting: str = "geometric"
    prior_scale: float | None = None
    # "closed": analytic KL where it exists; "sampled": log q(w) - log p(w) at the draws
    kl_mode: str = "closed"

    def __post_init__(self):
        if self.n_mc_train < 1:
            raise ValueError("n_mc_train must be >= 1")
        if self.weighting not in ("geometric", "uniform"):
            raise ValueError(f"unknown KL weighting {self.weighting!r}")
        if self.kl_mode not in ("closed", "sampled"):
            raise ValueError(f"unknown kl_mode {self.kl_mode!r}")


def gaussian_nll(y, mu: Tensor, var: Tensor, reduction: str = "mean") -> Tensor:
    """Per-sample 0.5 log(2 pi var) + (y - mu)^2 / (2 var), reduced over the batch."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    var = var if isinstance(var, Tensor) else Tensor(var)
    if np.any(var.data <= 0):
        raise DomainError("gaussian_nll: variance must be strictly positive")
    y = y if isinstance(y, Tensor) else Tensor(y)
    per = 0.5 * var.log() + (y - mu).square() / (2.0 * var) + HALF_LOG_2PI
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.sum()
    if reduction == "none":
        return per
    raise ValueError(f"unknown reduction {reduction!r}")


def kl_diag_gaussians(mu, sigma, prior_scale: float) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, prior_scale^2 I)) in closed form."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    if prior_scale <= 0:
        raise ValueError("prior_scale must be positive")
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    p2 = 2.0 * prior_scale**2
    terms = math.log(prior_scale) - sigma.log() + (sigma.square() + mu.square()) / p2 - 0.5
    return terms.sum()


def minibatch_weights(n_batches: int, weighting: str = "geometric") -> list[float]:
    """KL share of each minibatch: 2^(M-i) / (2^M - 1), or 1/M when uniform."""
    return [float(w) for w in minibatch_weights_exact(n_batches, weighting)]


def minibatch_weights_exact(n_batches: int, weighting: str = "geometric") -> list[Fraction]:
    if n_batches < 1:
        raise ValueError("need at least one minibatch")
    if weighting == "uniform":
        return [Fraction(1, n_batches)] * n_batches
    denom = 2**n_batches - 1
    return [Fraction(2 ** (n_batches - i), denom) for i in range(1, n_batches + 1)]


def layer_kl(layer: VariationalLinear) -> Tensor:
    sigma_W, sigma_b = layer.sigmas()
    return kl_diag_gaussians(layer.mu_W, sigma_W, layer.prior_scale) + kl_diag_gaussians(
        layer.mu_b, sigma_b, layer.prior_scale
    )


def radial_kl_terms(layer: VariationalLinear, noises: list[dict]) -> tuple[Tensor, Tensor]:
    """(entropy part, cross-entropy part) of the radial KL estimate.

    The entropy part is -sum(log sigma), the parameter-dependent piece of
    the radial log-density. The cross-entropy part averages -log p(w) over
    the supplied draws, constants included.
    """
    sigma_W, sigma_b = layer.sigmas()
    neg_entropy = -(sigma_W.log().sum() + sigma_b.log().sum())
    p = layer.prior_scale
    const = layer.n_params() * (math.log(p) + HALF_LOG_2PI)
    cross = None
    for noise in noises:
        dir_W, dir_b = radial_direction(noise["eps_W"], noise["eps_b"], noise["r"])
        w = layer.mu_W + sigma_W * Tensor(dir_W)
        b = layer.mu_b + sigma_b * Tensor(dir_b)
        term = (w.square().sum() + b.square().sum()) / (2.0 * p * p) + const
        cross = term if cross is None else cross + term
    return neg_entropy, cross / float(len(noises))


def kl_radial_mc(
    layer: VariationalLinear,
    draws: int = 1,
    rng: np.random.Generator | None = None,
    noises: list[dict] | None = None,
) -> Tensor:
    """Monte Carlo KL for a radial layer, up to a parameter-free constant.

    Pass ``noises`` to freeze the draws (e.g. to reuse those of the forward
    pass); otherwise ``draws`` fresh ones come from ``rng``.
    """
    if layer.sampler != "radial":
        raise ValueError("kl_radial_mc applies to radial layers only")
    if noises is None:
        if draws < 1:
            raise ValueError("draws must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        noises = [layer.draw_noise(rng, 1) for _ in range(draws)]
    neg_entropy, cross = radial_kl_terms(layer, noises)
    return neg_entropy + cross


def sampled_log_ratio(layer: VariationalLinear, noise: dict) -> Tensor:
    """log q(w) - log p(w) evaluated at the weights implied by ``noise``."""
    if layer.sampler == "lrt":
        raise ValueError("LRT never materializes weights; use the closed-form KL")
    if layer.sampler == "radial":
        neg_entropy, cross = radial_kl_terms(layer, [noise])
        return neg_entropy + cross
    w, b = layer.sample_weights(noise)
    sigma_W, sigma_b = layer.sigmas()
    p = layer.prior_scale

    def log_ratio(x, mu, sigma):
        log_q = -sigma.log() - (x - mu).square() / (2.0 * sigma.square())
        log_p = -math.log(p) - x.square() / (2.0 * p * p)
        return (log_q - log_p).sum()

    return log_ratio(w, layer.mu_W, sigma_W) + log_ratio(b, layer.mu_b, sigma_b)


def total_kl(model: FunctionalModel, noises: list[dict], kl_mode: str = "closed") -> Tensor:
    """KL(q || p) summed over variational layers.

    ``noises`` holds the noise bundles of the current step; radial layers
    (and every layer in "sampled" mode) average over them.
    """
    total = None
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, VariationalLinear):
            continue
        if layer.sampler == "radial":
            term = kl_radial_mc(layer, noises=[bundle[i] for bundle in noises])
        elif kl_mode == "sampled":
            parts = [sampled_log_ratio(layer, bundle[i]) for bundle in noises]
            term = parts[0]
            for extra in parts[1:]:
                term = term + extra
            term = term / float(len(parts))
        else:
            term = layer_kl(layer)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("model has no variational layer")
    return total


def elbo_estimate(
    model: FunctionalModel,
    x,
    y,
    batch_index: int,
    cfg: ElboConfig,
    noises: list[dict],
) -> Tensor:
    """Minibatch negative ELBO: pi_i * KL + mean over draws of the summed NLL.

    ``batch_index`` is 1-based, matching the weighting schedule.
    """
    if len(np.asarray(y.data if isinstance(y, Tensor) else y)) == 0:
        raise ValueError("elbo_estimate: empty batch")
    if not model.is_variational:
        raise ValueError("elbo_estimate needs at least one variational layer")
    if len(noises) != cfg.n_mc_train:
        raise ValueError(f"expected {cfg.n_mc_train} noise bundles, got {len(noises)}")
    weights = minibatch_weights(cfg.n_batches, cfg.weighting)
    pi = weights[batch_index - 1]
    data_term = None
    for bundle in noises:
        mu, var = model_forward(model, x, bundle)
        nll = gaussian_nll(y, mu, var, reduction="sum")
        data_term = nll if data_term is None else data_term + nll
    data_term = data_term / float(len(noises))
    return pi * total_kl(model, noises, cfg.kl_mode) + data_term


def l2_penalty(model: FunctionalModel) -> Tensor:
    total = None
    for w in model.weight_tensors():
        term = w.square().sum()
        total = term if total is None else total + term
    return total


def mcd_objective(model: FunctionalModel, x, y, lam: float, noise: dict) -> Tensor:
    """Batch-mean Gaussian NLL under one mask draw plus lam * sum ||W||^2."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    mu, var = model_forward(model, x, noise)
    loss = gaussian_nll(y, mu, var)
    if lam > 0:
        loss = loss + lam * l2_penalty(model)
    return loss


def rmse_loss(y, mu: Tensor) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(y)
    return (y - mu).square().mean().sqrt()
