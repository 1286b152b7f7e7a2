"""Dense MLP kernel for the actor and critic.

Architecture: ``[Dense -> LayerNorm -> ReLU] * len(hidden_dims) -> Dense -> head``
with a ``tanh`` head for the actor and a linear head for the critic. All
arithmetic is float64. Inputs may be a single vector ``(dim,)`` or a batch of
row vectors ``(N, dim)``; normalization statistics are always taken per row
over the feature axis, so results do not depend on batch size.

Parameters are exposed as an ordered mapping of named tensors
(``dense{i}.weights``, ``dense{i}.biases``, ``norm{i}.gain``, ``norm{i}.shift``)
shared by the optimizer, Polyak averaging and checkpoints.
"""

import itertools
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import DimensionError, DivergenceError, StaleCacheError

NORM_EPSILON = 1e-5
FINAL_LAYER_BOUND = 3e-3

OutputHead = Literal["tanh", "linear"]

_param_tokens = itertools.count(1)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    output_head: OutputHead = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"all layer sizes must be >= 1, got {dims}")
        if self.output_head not in ("tanh", "linear"):
            raise DimensionError(f"unknown output head: {self.output_head}")

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(out, in) for every dense layer, input to output."""
        widths = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "output_head": self.output_head,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpSpec":
        return cls(
            input_dim=int(data["input_dim"]),
            hidden_dims=tuple(data["hidden_dims"]),
            output_dim=int(data["output_dim"]),
            output_head=data["output_head"],
        )


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"dense layer shapes disagree: weights {self.weights.shape}, "
                f"biases {self.biases.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise DivergenceError("dense layer holds non-finite parameters")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class NormLayer:
    gain: np.ndarray
    shift: np.ndarray
    epsilon: float = NORM_EPSILON

    def __post_init__(self) -> None:
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.epsilon <= 0:
            raise DimensionError("normalization epsilon must be positive")
        if self.gain.ndim != 1 or self.gain.shape != self.shift.shape:
            raise DimensionError(
                f"norm layer shapes disagree: gain {self.gain.shape}, shift {self.shift.shape}"
            )

    @property
    def width(self) -> int:
        return self.gain.shape[0]


@dataclass
class MlpParams:
    spec: MlpSpec
    dense: List[DenseLayer]
    norms: List[NormLayer]
    # identifies this exact parameter set; forward caches remember it
    token: int = field(default_factory=lambda: next(_param_tokens), compare=False)

    def __post_init__(self) -> None:
        shapes = self.spec.layer_shapes
        if len(self.dense) != len(shapes) or len(self.norms) != len(self.spec.hidden_dims):
            raise DimensionError("layer count does not match the network spec")
        for layer, shape in zip(self.dense, shapes):
            if layer.weights.shape != shape:
                raise DimensionError(
                    f"dense weights {layer.weights.shape} do not match declared {shape}"
                )
        for norm, width in zip(self.norms, self.spec.hidden_dims):
            if norm.width != width:
                raise DimensionError(f"norm width {norm.width} does not match {width}")

    def named_tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.dense):
            tensors[f"dense{i}.weights"] = layer.weights
            tensors[f"dense{i}.biases"] = layer.biases
            if i < len(self.norms):
                tensors[f"norm{i}.gain"] = self.norms[i].gain
                tensors[f"norm{i}.shift"] = self.norms[i].shift
        return tensors

    @classmethod
    def from_named(
        cls,
        spec: MlpSpec,
        tensors: Dict[str, np.ndarray],
        epsilons: Optional[Sequence[float]] = None,
    ) -> "MlpParams":
        n_hidden = len(spec.hidden_dims)
        epsilons = list(epsilons) if epsilons is not None else [NORM_EPSILON] * n_hidden
        try:
            dense = [
                DenseLayer(tensors[f"dense{i}.weights"], tensors[f"dense{i}.biases"])
                for i in range(n_hidden + 1)
            ]
            norms = [
                NormLayer(tensors[f"norm{i}.gain"], tensors[f"norm{i}.shift"], epsilons[i])
                for i in range(n_hidden)
            ]
        except KeyError as e:
            raise DimensionError(f"missing parameter tensor {e.args[0]}") from e
        return cls(spec=spec, dense=dense, norms=norms)

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.named_tensors().values()))

    def copy(self) -> "MlpParams":
        return MlpParams.from_named(
            self.spec,
            {name: t.copy() for name, t in self.named_tensors().items()},
            [n.epsilon for n in self.norms],
        )


@dataclass
class GradientSet:
    tensors: Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradientSet":
        return cls({name: np.zeros_like(t) for name, t in params.named_tensors().items()})

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(g))) for g in self.tensors.values())

    def check_congruent(self, params: MlpParams) -> None:
        named = params.named_tensors()
        if list(named) != list(self.tensors):
            raise DimensionError("gradient layout does not match the network")
        for name, tensor in named.items():
            if self.tensors[name].shape != tensor.shape:
                raise DimensionError(
                    f"gradient {name} has shape {self.tensors[name].shape}, "
                    f"expected {tensor.shape}"
                )


@dataclass
class HiddenCache:
    inputs: np.ndarray
    x_hat: np.ndarray
    std_inv: np.ndarray
    normalized: np.ndarray


@dataclass
class ForwardCache:
    spec: MlpSpec
    token: int
    single: bool
    hidden: List[HiddenCache]
    last_inputs: np.ndarray
    output: np.ndarray


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Fan-in uniform init for hidden layers, +-3e-3 for the output layer."""
    dense = []
    shapes = spec.layer_shapes
    for i, (out_dim, in_dim) in enumerate(shapes):
        bound = FINAL_LAYER_BOUND if i == len(shapes) - 1 else 1.0 / np.sqrt(in_dim)
        weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        biases = rng.uniform(-bound, bound, size=out_dim)
        dense.append(DenseLayer(weights, biases))
    norms = [NormLayer(np.ones(w), np.zeros(w)) for w in spec.hidden_dims]
    return MlpParams(spec=spec, dense=dense, norms=norms)


def _as_batch(x: np.ndarray, width: int, what: str) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = arr[None, :] if single else arr
    if batch.ndim != 2 or batch.shape[1] != width:
        raise DimensionError(f"{what} has shape {arr.shape}, expected last dim {width}")
    return batch, single


def _normalize(layer: NormLayer, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    std_inv = 1.0 / np.sqrt(var + layer.epsilon)
    x_hat = (z - mean) * std_inv
    return layer.gain * x_hat + layer.shift, x_hat, std_inv


def norm_forward(layer: NormLayer, x: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(x, layer.width, "norm input")
    out, _, _ = _normalize(layer, batch)
    return out[0] if single else out


def mlp_forward(
    spec: MlpSpec, params: MlpParams, x: np.ndarray
) -> Tuple[np.ndarray, ForwardCache]:
    if params.spec != spec:
        raise DimensionError("parameters were built for a different network spec")
    batch, single = _as_batch(x, spec.input_dim, "network input")

    hidden: List[HiddenCache] = []
    activations = batch
    for i in range(len(spec.hidden_dims)):
        layer = params.dense[i]
        z = activations @ layer.weights.T + layer.biases
        normalized, x_hat, std_inv = _normalize(params.norms[i], z)
        hidden.append(HiddenCache(activations, x_hat, std_inv, normalized))
        activations = np.maximum(normalized, 0.0)

    final = params.dense[-1]
    logits = activations @ final.weights.T + final.biases
    output = np.tanh(logits) if spec.output_head == "tanh" else logits

    cache = ForwardCache(spec, params.token, single, hidden, activations, output)
    return (output[0] if single else output), cache


def mlp_backward(
    spec: MlpSpec,
    params: MlpParams,
    cache: ForwardCache,
    upstream_grad: np.ndarray,
) -> Tuple[GradientSet, np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream_grad * output)``.

    Parameter gradients are summed over the batch; the input gradient keeps
    the batch shape of the forward call.
    """
    if cache.spec != spec or cache.token != params.token:
        raise StaleCacheError("forward cache was produced by different parameters")
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if cache.single:
        upstream = upstream[None, :] if upstream.ndim == 1 else upstream
    if upstream.shape != cache.output.shape:
        raise DimensionError(
            f"upstream gradient shape {upstream.shape} does not match output "
            f"{cache.output.shape}"
        )

    grads: Dict[str, np.ndarray] = {}
    n_hidden = len(spec.hidden_dims)

    delta = upstream * (1.0 - cache.output**2) if spec.output_head == "tanh" else upstream
    final = params.dense[n_hidden]
    grads[f"dense{n_hidden}.weights"] = delta.T @ cache.last_inputs
    grads[f"dense{n_hidden}.biases"] = delta.sum(axis=0)
    d_act = delta @ final.weights

    for i in reversed(range(n_hidden)):
        layer_cache = cache.hidden[i]
        norm = params.norms[i]
        d_norm = d_act * (layer_cache.normalized > 0.0)
        grads[f"norm{i}.gain"] = (d_norm * layer_cache.x_hat).sum(axis=0)
        grads[f"norm{i}.shift"] = d_norm.sum(axis=0)

        d_xhat = d_norm * norm.gain
        width = d_xhat.shape[1]
        d_z = (layer_cache.std_inv / width) * (
            width * d_xhat
            - d_xhat.sum(axis=1, keepdims=True)
            - layer_cache.x_hat * (d_xhat * layer_cache.x_hat).sum(axis=1, keepdims=True)
        )
        grads[f"dense{i}.weights"] = d_z.T @ layer_cache.inputs
        grads[f"dense{i}.biases"] = d_z.sum(axis=0)
        d_act = d_z @ params.dense[i].weights

    ordered = {name: grads[name] for name in params.named_tensors()}
    input_grad = d_act[0] if cache.single else d_act
    return GradientSet(ordered), input_grad


@dataclass
class OptimizerState:
    """Adam moments and step counter for one network."""

    learning_rate: float
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float) -> "OptimizerState":
        named = params.named_tensors()
        return cls(
            learning_rate=learning_rate,
            first_moment={name: np.zeros_like(t) for name, t in named.items()},
            second_moment={name: np.zeros_like(t) for name, t in named.items()},
        )


def optimizer_step(
    state: OptimizerState, params: MlpParams, grads: GradientSet
) -> Tuple[MlpParams, OptimizerState]:
    """One bias-corrected Adam descent step; returns new params and state."""
    grads.check_congruent(params)
    if not grads.is_finite():
        raise DivergenceError(
            f"non-finite gradient at optimizer step {state.step + 1}"
        )

    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step
    updated: Dict[str, np.ndarray] = {}
    first: Dict[str, np.ndarray] = {}
    second: Dict[str, np.ndarray] = {}
    for name, value in params.named_tensors().items():
        g = grads.tensors[name]
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        first[name] = m
        second[name] = v

    new_params = MlpParams.from_named(params.spec, updated, [n.epsilon for n in params.norms])
    new_state = replace(state, step=step, first_moment=first, second_moment=second)
    return new_params, new_state
