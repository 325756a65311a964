"""Parameter-solution network: two ReLU MLPs joined by an inner product.

The parameter net maps theta to R^N, the solution net maps U to R^N. The
solution channel squashes their inner product through a scaled sigmoid with
range (-eta, 1 + eta); the stability channel returns the bare inner product.
Gradients are computed by hand-written reverse mode.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DivergedTrainingError, ParseError
from .numerics import RandomSource

CHECKPOINT_FORMAT = "psnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: int
    width: int
    output_dim: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_layers, self.width, self.output_dim) < 1:
            raise ConfigurationError(f"invalid MLP shape {self}")

    @property
    def layer_dims(self) -> list:
        return [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]

    @property
    def n_weights(self) -> int:
        d = self.layer_dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))


def init_weights(spec: MlpSpec, seed=0) -> list:
    """He-normal matrices (std sqrt(2 / fan_in)) and zero biases."""
    rng = seed if isinstance(seed, RandomSource) else RandomSource(seed)
    dims = spec.layer_dims
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return layers


def _check_weights(spec: MlpSpec, weights):
    dims = spec.layer_dims
    if len(weights) != len(dims) - 1:
        raise ConfigurationError(f"expected {len(dims) - 1} layers, got {len(weights)}")
    for (W, b), fan_in, fan_out in zip(weights, dims[:-1], dims[1:]):
        if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise ConfigurationError(f"layer shape {W.shape}/{b.shape} does not match {spec}")


def mlp_forward(spec: MlpSpec, weights, x) -> np.ndarray:
    """ReLU after every hidden affine map, plain affine output. ``x`` is (d,) or (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ConfigurationError(f"input has {x.shape[-1]} features, network expects {spec.input_dim}")
    a = x
    for W, b in weights[:-1]:
        a = np.maximum(a @ W.T + b, 0.0)
    W, b = weights[-1]
    return a @ W.T + b


def _mlp_forward_cached(weights, x):
    acts = [x]
    a = x
    for W, b in weights[:-1]:
        a = np.maximum(a @ W.T + b, 0.0)
        acts.append(a)
    W, b = weights[-1]
    return a @ W.T + b, acts


def _mlp_backward(weights, acts, dout):
    grads = [None] * len(weights)
    delta = dout
    for layer in range(len(weights) - 1, -1, -1):
        W, _ = weights[layer]
        a_prev = acts[layer]
        grads[layer] = (delta.T @ a_prev, delta.sum(axis=0))
        if layer:
            # subgradient of ReLU at 0 is taken as 0
            delta = (delta @ W) * (a_prev > 0)
    return grads


def scaled_sigmoid(t, eta):
    """e^t/(e^t+1) + eta (e^t-1)/(e^t+1), evaluated as (1 + 2 eta) expit(t) - eta."""
    s = expit(np.asarray(t, dtype=np.float64))
    out = (1.0 + 2.0 * eta) * s - eta
    return float(out) if np.ndim(out) == 0 else out


def _scaled_sigmoid_grad(t, eta):
    s = expit(t)
    return (1.0 + 2.0 * eta) * s * (1.0 - s)


def eta_for_targets(targets, floor=0.1, margin=0.05) -> float:
    """Smallest offset keeping ``1 + eta`` clear of the largest target."""
    return float(max(floor, float(np.max(targets)) - 1.0 + margin))


@dataclass
class GradientBundle:
    pnn: list
    snn: list

    def flat(self) -> list:
        return [g for pair in self.pnn + self.snn for g in pair]


@dataclass
class PsnnModel:
    pnn_spec: MlpSpec
    snn_spec: MlpSpec
    pnn: list
    snn: list
    eta: float = 0.1
    channel: str = "solution"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pnn_spec.output_dim != self.snn_spec.output_dim:
            raise ConfigurationError("parameter and solution nets must share the output dimension")
        if self.channel not in ("solution", "stability"):
            raise ConfigurationError(f"unknown channel {self.channel!r}")
        if self.eta <= 0:
            raise ConfigurationError("eta must be positive")
        _check_weights(self.pnn_spec, self.pnn)
        _check_weights(self.snn_spec, self.snn)

    @classmethod
    def create(cls, n_params, n_solution, N=8, L1=4, W1=30, L2=3, W2=20, channel="solution", eta=0.1, seed=0):
        pspec = MlpSpec(n_params, L1, W1, N)
        sspec = MlpSpec(n_solution, L2, W2, N)
        rng_p, rng_s = RandomSource(seed).spawn(2)
        return cls(pspec, sspec, init_weights(pspec, rng_p), init_weights(sspec, rng_s), eta, channel)

    def parameters(self) -> list:
        """Flat list of the weight arrays; mutating them updates the model."""
        return [a for pair in self.pnn + self.snn for a in pair]

    @property
    def n_weights(self) -> int:
        return self.pnn_spec.n_weights + self.snn_spec.n_weights

    def copy(self) -> "PsnnModel":
        dup = lambda layers: [(W.copy(), b.copy()) for W, b in layers]
        return PsnnModel(self.pnn_spec, self.snn_spec, dup(self.pnn), dup(self.snn), self.eta, self.channel, dict(self.metadata))

    def inner(self, U, theta) -> np.ndarray:
        P = mlp_forward(self.pnn_spec, self.pnn, theta)
        S = mlp_forward(self.snn_spec, self.snn, U)
        return np.sum(P * S, axis=-1)

    def __call__(self, U, theta):
        return psnn_forward(self, U, theta)


def psnn_forward(model: PsnnModel, U, theta):
    """Network output at (U, theta); either argument may be batched along axis 0."""
    z = model.inner(U, theta)
    if model.channel == "solution":
        return scaled_sigmoid(z, model.eta)
    return float(z) if np.ndim(z) == 0 else z


def field_on_grid(model: PsnnModel, grid, theta) -> np.ndarray:
    """Output for one parameter over many solution points, sharing the parameter-net pass."""
    P = mlp_forward(model.pnn_spec, model.pnn, np.asarray(theta, dtype=np.float64))
    z = mlp_forward(model.snn_spec, model.snn, grid) @ P
    return scaled_sigmoid(z, model.eta) if model.channel == "solution" else z


def psnn_backward(model: PsnnModel, U, theta, target, theta_index=None):
    """Mean squared error over the batch and its exact gradient w.r.t. every weight.

    With ``theta_index`` given, ``theta`` is a table of distinct parameters and
    sample ``i`` uses ``theta[theta_index[i]]``; the parameter net then runs
    once per table row. Loss and gradient are the same as for the expanded batch.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    B = len(target)
    if B == 0:
        raise ConfigurationError("empty batch")
    Pu, acts_p = _mlp_forward_cached(model.pnn, theta)
    P = Pu if theta_index is None else Pu[theta_index]
    S, acts_s = _mlp_forward_cached(model.snn, U)
    z = np.einsum("ij,ij->i", P, S)
    if model.channel == "solution":
        out = scaled_sigmoid(z, model.eta)
    else:
        out = z
    resid = out - target
    loss = float(np.dot(resid, resid) / B)
    if not np.isfinite(loss):
        raise DivergedTrainingError(f"non-finite loss {loss}")
    dz = (2.0 / B) * resid
    if model.channel == "solution":
        dz = dz * _scaled_sigmoid_grad(z, model.eta)
    dP = dz[:, None] * S
    if theta_index is not None:
        onehot = (np.arange(len(theta))[:, None] == theta_index[None, :]).astype(np.float64)
        dP = onehot @ dP
    gp = _mlp_backward(model.pnn, acts_p, dP)
    gs = _mlp_backward(model.snn, acts_s, dz[:, None] * P)
    return loss, GradientBundle(gp, gs)


# -- checkpoints -------------------------------------------------------------


def _layers_json(layers):
    return [{"W": W.tolist(), "b": b.tolist()} for W, b in layers]


def _layers_from_json(raw):
    return [(np.array(l["W"], dtype=np.float64), np.array(l["b"], dtype=np.float64)) for l in raw]


def checkpoint_dict(model: PsnnModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "channel": model.channel,
        "eta": model.eta,
        "pnn": {"spec": asdict(model.pnn_spec), "layers": _layers_json(model.pnn)},
        "snn": {"spec": asdict(model.snn_spec), "layers": _layers_json(model.snn)},
        "metadata": model.metadata,
    }


def save_checkpoint(model: PsnnModel, path) -> None:
    """Write atomically: the file at ``path`` is either the old or the complete new checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(checkpoint_dict(model), sort_keys=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> PsnnModel:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a valid checkpoint ({exc.msg} at offset {exc.pos})") from None
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: checkpoint version {raw.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        return PsnnModel(
            MlpSpec(**raw["pnn"]["spec"]),
            MlpSpec(**raw["snn"]["spec"]),
            _layers_from_json(raw["pnn"]["layers"]),
            _layers_from_json(raw["snn"]["layers"]),
            float(raw["eta"]),
            raw["channel"],
            raw.get("metadata", {}),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: incomplete checkpoint ({exc})") from None
