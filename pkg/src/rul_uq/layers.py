"""Deterministic and stochastic layers and the two-headed Gaussian model.

Every stochastic layer receives its randomness as an explicit noise dict
drawn beforehand with ``draw_noise``. A forward pass is therefore a pure
function of (parameters, inputs, noise), which is what makes frozen-noise
gradient checks and bit-exact replays possible.

Weight matrices are stored as ``(n_in, n_out)`` so a layer computes
``x @ W + b`` for a batch ``x`` of shape ``(batch, n_in)``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

SAMPLERS = ("naive", "lrt", "flipout", "radial")
CHECKPOINT_VERSION = 1
# keeps the LRT radicand strictly positive when an input row is all zeros
LRT_JITTER = 1e-16


def softplus_scale(rho):
    """Map unconstrained ``rho`` to a positive scale, log(1 + exp(rho)).

    Works on tensors (differentiable) and plain arrays alike.
    """
    if isinstance(rho, Tensor):
        return rho.softplus()
    return np.logaddexp(0.0, np.asarray(rho, dtype=np.float64))


def inverse_softplus(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("inverse_softplus needs a positive scale")
    # log(expm1(s)) written to stay finite for large s
    return sigma + np.log(-np.expm1(-sigma))


def _fan_in_init(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_in, n_out))
    b = rng.uniform(-bound, bound, size=n_out)
    return w, b


class Linear:
    kind = "linear"
    stochastic = False

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        w, b = _fan_in_init(rng, n_in, n_out)
        self.n_in, self.n_out = n_in, n_out
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}

    def weight_tensors(self) -> list[Tensor]:
        return [self.W]

    def forward(self, x: Tensor, noise=None) -> Tensor:
        return x @ self.W + self.b

    def config(self) -> dict:
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


class ReLU:
    kind = "relu"
    stochastic = False

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def weight_tensors(self) -> list[Tensor]:
        return []

    def forward(self, x: Tensor, noise=None) -> Tensor:
        return x.relu()

    def config(self) -> dict:
        return {"kind": self.kind}


class Dropout:
    """Inverted dropout kept active at prediction time."""

    kind = "dropout"
    stochastic = True

    def __init__(self, p: float, width: int):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = float(p)
        self.width = width

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def weight_tensors(self) -> list[Tensor]:
        return []

    def draw_noise(self, rng: np.random.Generator, batch: int) -> dict:
        mask = (rng.random((batch, self.width)) >= self.p).astype(np.float64)
        return {"mask": mask}

    def forward(self, x: Tensor, noise: dict) -> Tensor:
        return forward_dropout(self, x, noise["mask"])

    def config(self) -> dict:
        return {"kind": self.kind, "p": self.p, "width": self.width}


def forward_dropout(layer: Dropout, x: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ValueError(f"dropout mask shape {mask.shape} does not match input {x.shape}")
    if layer.p == 0.0:
        return x
    return x * Tensor(mask / (1.0 - layer.p))


class VariationalLinear:
    """Mean-field Gaussian linear layer q(w) = N(mu, softplus(rho)^2).

    The prior is N(0, prior_scale^2) on every weight and bias. The
    ``sampler`` picks how a forward pass turns noise into outputs; only
    fully connected layers exist here, so the local reparametrization
    sampler is always valid.
    """

    kind = "variational"
    stochastic = True

    def __init__(
        self,
        n_in: int,
        n_out: int,
        sampler: str = "lrt",
        prior_scale: float = 1.0,
        q_scale: float = 1e-3,
        rng: np.random.Generator | None = None,
    ):
        if sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")
        if prior_scale <= 0 or q_scale <= 0:
            raise ValueError("prior_scale and q_scale must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        w, b = _fan_in_init(rng, n_in, n_out)
        rho0 = float(inverse_softplus(q_scale))
        self.n_in, self.n_out = n_in, n_out
        self.sampler = sampler
        self.prior_scale = float(prior_scale)
        self.q_scale = float(q_scale)
        self.mu_W = Tensor(w, requires_grad=True)
        self.rho_W = Tensor(np.full((n_in, n_out), rho0), requires_grad=True)
        self.mu_b = Tensor(b, requires_grad=True)
        self.rho_b = Tensor(np.full(n_out, rho0), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"mu_W": self.mu_W, "rho_W": self.rho_W, "mu_b": self.mu_b, "rho_b": self.rho_b}

    def weight_tensors(self) -> list[Tensor]:
        return [self.mu_W]

    def n_params(self) -> int:
        return self.mu_W.size + self.mu_b.size

    def sigmas(self) -> tuple[Tensor, Tensor]:
        return softplus_scale(self.rho_W), softplus_scale(self.rho_b)

    def draw_noise(self, rng: np.random.Generator, batch: int) -> dict:
        shape_w, shape_b = (self.n_in, self.n_out), (self.n_out,)
        if self.sampler == "naive":
            return {"eps_W": rng.standard_normal(shape_w), "eps_b": rng.standard_normal(shape_b)}
        if self.sampler == "lrt":
            return {"eps": rng.standard_normal((batch, self.n_out))}
        if self.sampler == "flipout":
            return {
                "dW": rng.standard_normal(shape_w),
                "sign_out": 2.0 * rng.integers(0, 2, size=(batch, self.n_out)) - 1.0,
                "sign_in": 2.0 * rng.integers(0, 2, size=(batch, self.n_in)) - 1.0,
                "eps_b": rng.standard_normal((batch, self.n_out)),
            }
        eps_w = rng.standard_normal(shape_w)
        eps_b = rng.standard_normal(shape_b)
        while np.sum(eps_w**2) + np.sum(eps_b**2) == 0.0:  # probability-zero guard
            eps_w = rng.standard_normal(shape_w)
            eps_b = rng.standard_normal(shape_b)
        return {"eps_W": eps_w, "eps_b": eps_b, "r": float(abs(rng.standard_normal()))}

    def forward(self, x: Tensor, noise: dict) -> Tensor:
        if self.sampler == "naive":
            return forward_naive(self, x, noise["eps_W"], noise["eps_b"])
        if self.sampler == "lrt":
            return forward_lrt(self, x, noise["eps"])
        if self.sampler == "flipout":
            return forward_flipout(
                self, x, noise["dW"], noise["sign_out"], noise["sign_in"], noise["eps_b"]
            )
        return forward_radial(self, x, noise["eps_W"], noise["eps_b"], noise["r"])

    def forward_mean(self, x: Tensor) -> Tensor:
        return x @ self.mu_W + self.mu_b

    def sample_weights(self, noise: dict) -> tuple[Tensor, Tensor]:
        """Explicit weight draw for samplers that materialize weights."""
        sigma_W, sigma_b = self.sigmas()
        if self.sampler == "naive":
            return (
                self.mu_W + sigma_W * Tensor(noise["eps_W"]),
                self.mu_b + sigma_b * Tensor(noise["eps_b"]),
            )
        if self.sampler == "radial":
            dir_W, dir_b = radial_direction(noise["eps_W"], noise["eps_b"], noise["r"])
            return self.mu_W + sigma_W * Tensor(dir_W), self.mu_b + sigma_b * Tensor(dir_b)
        if self.sampler == "flipout":
            # sign flips leave the marginal of each weight unchanged
            return self.mu_W + sigma_W * Tensor(noise["dW"]), self.mu_b
        raise ValueError(f"sampler {self.sampler!r} never materializes weights")

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "sampler": self.sampler,
            "prior_scale": self.prior_scale,
            "q_scale": self.q_scale,
        }


def _check_shape(name: str, arr: np.ndarray, shape: tuple) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def forward_naive(layer: VariationalLinear, x: Tensor, eps_W, eps_b) -> Tensor:
    """One weight draw w = mu + sigma * eps shared by every row of the batch."""
    eps_W = _check_shape("eps_W", eps_W, layer.mu_W.shape)
    eps_b = _check_shape("eps_b", eps_b, layer.mu_b.shape)
    sigma_W, sigma_b = layer.sigmas()
    w = layer.mu_W + sigma_W * Tensor(eps_W)
    b = layer.mu_b + sigma_b * Tensor(eps_b)
    return x @ w + b


def forward_lrt(layer: VariationalLinear, x: Tensor, eps) -> Tensor:
    """Sample pre-activations: mean pass plus eps * sqrt(variance pass on x^2)."""
    eps = _check_shape("eps", eps, (x.shape[0], layer.n_out))
    sigma_W, sigma_b = layer.sigmas()
    mean = x @ layer.mu_W + layer.mu_b
    var = x.square() @ sigma_W.square() + sigma_b.square()
    assert np.all(var.data >= 0.0)
    return mean + Tensor(eps) * (var + LRT_JITTER).sqrt()


def forward_flipout(layer: VariationalLinear, x: Tensor, dW, sign_out, sign_in, eps_b) -> Tensor:
    """Per-row sign-flipped perturbation of one shared weight-noise draw.

    Uses ((sigma*dW) * outer(s_in, s_out)) applied to x equal to
    s_out * ((x * s_in) @ (sigma*dW)). Biases get an independent per-row
    Gaussian perturbation.
    """
    batch = x.shape[0]
    dW = _check_shape("dW", dW, layer.mu_W.shape)
    sign_out = _check_shape("sign_out", sign_out, (batch, layer.n_out))
    sign_in = _check_shape("sign_in", sign_in, (batch, layer.n_in))
    eps_b = _check_shape("eps_b", eps_b, (batch, layer.n_out))
    if not (np.all(np.abs(sign_out) == 1.0) and np.all(np.abs(sign_in) == 1.0)):
        raise ValueError("flipout sign vectors must contain only -1 and +1")
    sigma_W, sigma_b = layer.sigmas()
    mean = x @ layer.mu_W + layer.mu_b
    perturb = ((x * Tensor(sign_in)) @ (sigma_W * Tensor(dW))) * Tensor(sign_out)
    return mean + perturb + Tensor(eps_b) * sigma_b


def radial_direction(eps_W, eps_b, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Scale the layer's joint noise vector to unit norm, then by radius r."""
    eps_W = np.asarray(eps_W, dtype=np.float64)
    eps_b = np.asarray(eps_b, dtype=np.float64)
    norm = np.sqrt(np.sum(eps_W**2) + np.sum(eps_b**2))
    if norm == 0.0:
        raise ValueError("radial noise has zero norm; redraw it")
    return eps_W / norm * r, eps_b / norm * r


def forward_radial(layer: VariationalLinear, x: Tensor, eps_W, eps_b, r: float) -> Tensor:
    eps_W = _check_shape("eps_W", eps_W, layer.mu_W.shape)
    eps_b = _check_shape("eps_b", eps_b, layer.mu_b.shape)
    dir_W, dir_b = radial_direction(eps_W, eps_b, r)
    sigma_W, sigma_b = layer.sigmas()
    w = layer.mu_W + sigma_W * Tensor(dir_W)
    b = layer.mu_b + sigma_b * Tensor(dir_b)
    return x @ w + b


# ---------------------------------------------------------------------------
# functional model
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model's layer stack."""

    method: str
    n_in: int
    hidden: tuple[int, ...] = (64, 32)
    sampler: str | None = None
    prior_scale: float = 1.0
    q_scale: float = 1e-3
    dropout_p: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


SAMPLER_BY_METHOD = {
    "bnn-naive": "naive",
    "bnn-lrt": "lrt",
    "bnn-fo": "flipout",
    "bnn-rad": "radial",
}


class FunctionalModel:
    """Shared trunk feeding a mean head and a scale head.

    The scale head emits rho_out; the predicted variance is
    softplus(rho_out)^2, strictly positive for any finite input.
    """

    def __init__(self, trunk: list, mean_head, scale_head, spec: ModelSpec | None = None):
        self.trunk = list(trunk)
        self.mean_head = mean_head
        self.scale_head = scale_head
        self.spec = spec

    @property
    def layers(self) -> list:
        return [*self.trunk, self.mean_head, self.scale_head]

    @property
    def n_in(self) -> int:
        for layer in self.layers:
            if hasattr(layer, "n_in"):
                return layer.n_in
        raise ValueError("model has no parametric layer")

    @property
    def is_stochastic(self) -> bool:
        return any(layer.stochastic for layer in self.layers)

    @property
    def is_variational(self) -> bool:
        return any(isinstance(layer, VariationalLinear) for layer in self.layers)

    @property
    def has_dropout(self) -> bool:
        return any(isinstance(layer, Dropout) for layer in self.layers)

    def variational_layers(self) -> list[VariationalLinear]:
        return [layer for layer in self.layers if isinstance(layer, VariationalLinear)]

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.parameters().values()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters().items():
                out.append((f"{i}.{name}", t))
        return out

    def weight_tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.weight_tensors()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def draw_noise(self, rng: np.random.Generator, batch: int) -> dict[int, dict]:
        """One noise bundle: a draw for every stochastic layer, keyed by index."""
        return {
            i: layer.draw_noise(rng, batch)
            for i, layer in enumerate(self.layers)
            if layer.stochastic
        }

    def forward(self, x, noise: dict[int, dict] | None = None) -> tuple[Tensor, Tensor]:
        return model_forward(self, x, noise)

    def get_state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def mean_model(self) -> "FunctionalModel":
        """Deterministic twin built from the variational means (dropout dropped)."""
        def twin(layer):
            if isinstance(layer, VariationalLinear):
                lin = Linear(layer.n_in, layer.n_out)
                lin.W.data[...] = layer.mu_W.data
                lin.b.data[...] = layer.mu_b.data
                return lin
            if isinstance(layer, Linear):
                lin = Linear(layer.n_in, layer.n_out)
                lin.W.data[...] = layer.W.data
                lin.b.data[...] = layer.b.data
                return lin
            return ReLU() if isinstance(layer, ReLU) else None

        trunk = [t for t in (twin(layer) for layer in self.trunk) if t is not None]
        return FunctionalModel(trunk, twin(self.mean_head), twin(self.scale_head))

    def load_means_from(self, twin: "FunctionalModel") -> None:
        """Copy a deterministic twin's weights into the means (rho untouched)."""
        mine = [layer for layer in self.layers if isinstance(layer, (Linear, VariationalLinear))]
        theirs = [layer for layer in twin.layers if isinstance(layer, Linear)]
        if len(mine) != len(theirs):
            raise ValueError("twin architecture does not match")
        for dst, src in zip(mine, theirs):
            if isinstance(dst, VariationalLinear):
                dst.mu_W.data[...] = src.W.data
                dst.mu_b.data[...] = src.b.data
            else:
                dst.W.data[...] = src.W.data
                dst.b.data[...] = src.b.data

    def output_biases(self) -> tuple[Tensor, Tensor]:
        def bias(layer):
            return layer.mu_b if isinstance(layer, VariationalLinear) else layer.b

        return bias(self.mean_head), bias(self.scale_head)


def model_forward(model: FunctionalModel, x, noise: dict[int, dict] | None = None):
    """Return (mu_hat, var_hat), each of shape (batch,)."""
    noise = noise or {}
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2:
        raise ValueError(f"model input must be (batch, features), got {h.shape}")
    layers = model.layers
    n_trunk = len(model.trunk)
    for i, layer in enumerate(layers[:n_trunk]):
        h = layer.forward(h, _noise_for(i, layer, noise))
    i_mu, i_rho = n_trunk, n_trunk + 1
    mu = model.mean_head.forward(h, _noise_for(i_mu, model.mean_head, noise))
    rho = model.scale_head.forward(h, _noise_for(i_rho, model.scale_head, noise))
    batch = h.shape[0]
    var = softplus_scale(rho).square()
    return mu.reshape(batch), var.reshape(batch)


def _noise_for(i: int, layer, noise: dict):
    if not layer.stochastic:
        return None
    try:
        return noise[i]
    except KeyError:
        raise KeyError(f"noise bundle has no draw for stochastic layer {i} ({layer.kind})") from None


def build_model(spec: ModelSpec, rng: np.random.Generator | None = None) -> FunctionalModel:
    """Assemble the MLP for a method tag (hnn, de, mcd, bnn-*)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    method = spec.method
    widths = [spec.n_in, *spec.hidden]
    if method in SAMPLER_BY_METHOD:
        sampler = spec.sampler or SAMPLER_BY_METHOD[method]

        def make(n_in, n_out):
            return VariationalLinear(
                n_in, n_out, sampler, spec.prior_scale, spec.q_scale, rng=rng
            )
    elif method in ("hnn", "de", "mcd"):
        def make(n_in, n_out):
            return Linear(n_in, n_out, rng=rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    trunk: list = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        trunk.append(make(n_in, n_out))
        trunk.append(ReLU())
        if method == "mcd":
            trunk.append(Dropout(spec.dropout_p, n_out))
    return FunctionalModel(trunk, make(widths[-1], 1), make(widths[-1], 1), spec)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "dtype": "float64-le",
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64-le":
        raise ValueError(f"unsupported array dtype {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def model_to_dict(model: FunctionalModel) -> dict:
    if model.spec is None:
        raise ValueError("only models built from a ModelSpec can be serialized")
    return {
        "spec": model.spec.to_dict(),
        "layers": [layer.config() for layer in model.layers],
        "parameters": {name: encode_array(arr) for name, arr in model.get_state().items()},
    }


def model_from_dict(d: dict) -> FunctionalModel:
    model = build_model(ModelSpec.from_dict(d["spec"]))
    if [layer.config() for layer in model.layers] != d["layers"]:
        raise ValueError("checkpoint layer list does not match its spec")
    model.set_state({k: decode_array(v) for k, v in d["parameters"].items()})
    return model


@dataclass
class Checkpoint:
    """A trained model or ensemble plus provenance."""

    method: str
    models: list[FunctionalModel]
    seeds: list[int] = field(default_factory=list)
    dataset_fingerprint: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "method": ckpt.method,
        "seeds": list(ckpt.seeds),
        "dataset_fingerprint": ckpt.dataset_fingerprint,
        "extra": ckpt.extra,
        "models": [model_to_dict(m) for m in ckpt.models],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint format_version {version!r} unsupported")
    return Checkpoint(
        method=doc["method"],
        models=[model_from_dict(m) for m in doc["models"]],
        seeds=list(doc["seeds"]),
        dataset_fingerprint=doc["dataset_fingerprint"],
        extra=doc.get("extra", {}),
    )
