from __future__ import annotations

import numpy as np
import pytest

from app.core.errors import DimensionError, DivergenceError, StaleCacheError
from app.services.tensor_core import (
    FINAL_LAYER_BOUND,
    GradientSet,
    MlpParams,
    MlpSpec,
    OptimizerState,
    init_mlp,
    mlp_backward,
    mlp_forward,
    norm_forward,
    optimizer_step,
)

ACTOR = MlpSpec(input_dim=5, hidden_dims=(4, 3), output_dim=2, output_head="tanh")
CRITIC = MlpSpec(input_dim=6, hidden_dims=(4, 3), output_dim=1, output_head="linear")


def random_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Every tensor, gains and shifts included, drawn away from its init value."""
    template = init_mlp(spec, rng)
    tensors = {
        name: rng.normal(0.0, 0.5, size=t.shape)
        for name, t in template.named_tensors().items()
    }
    return MlpParams.from_named(spec, tensors)


def reference_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Loop-based forward pass for a single vector."""
    h = [float(v) for v in x]
    for layer, norm in zip(params.dense[:-1], params.norms):
        z = [
            sum(layer.weights[j, i] * h[i] for i in range(len(h))) + layer.biases[j]
            for j in range(layer.out_dim)
        ]
        mean = sum(z) / len(z)
        var = sum((v - mean) ** 2 for v in z) / len(z)
        normed = [
            norm.gain[j] * (z[j] - mean) / np.sqrt(var + norm.epsilon) + norm.shift[j]
            for j in range(len(z))
        ]
        h = [max(v, 0.0) for v in normed]
    final = params.dense[-1]
    out = [
        sum(final.weights[j, i] * h[i] for i in range(len(h))) + final.biases[j]
        for j in range(final.out_dim)
    ]
    if params.spec.output_head == "tanh":
        out = [np.tanh(v) for v in out]
    return np.array(out)


def scalar_loss(spec: MlpSpec, params: MlpParams, x: np.ndarray, u: np.ndarray) -> float:
    out, _ = mlp_forward(spec, params, x)
    return float(np.sum(u * out))


def close(analytic: float, numeric: float) -> bool:
    return abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-8


@pytest.mark.parametrize("spec", [ACTOR, CRITIC])
def test_forward_matches_reference(spec: MlpSpec) -> None:
    rng = np.random.default_rng(7)
    params = random_params(spec, rng)
    for _ in range(5):
        x = rng.normal(size=spec.input_dim)
        out, _ = mlp_forward(spec, params, x)
        np.testing.assert_allclose(out, reference_forward(params, x), rtol=1e-12, atol=1e-14)


def test_batch_forward_matches_rows() -> None:
    rng = np.random.default_rng(3)
    params = random_params(ACTOR, rng)
    batch = rng.normal(size=(6, ACTOR.input_dim))
    out, _ = mlp_forward(ACTOR, params, batch)
    assert out.shape == (6, ACTOR.output_dim)
    for row, expected in zip(batch, out):
        single, _ = mlp_forward(ACTOR, params, row)
        np.testing.assert_allclose(single, expected, rtol=1e-12, atol=1e-15)


def test_parameter_gradients_match_finite_differences() -> None:
    """100 seeded central-difference checks, half on each architecture."""
    h = 1e-6
    checks = 0
    for seed in range(50):
        for spec in (ACTOR, CRITIC):
            rng = np.random.default_rng(seed)
            params = random_params(spec, rng)
            x = rng.normal(size=(3, spec.input_dim))
            u = rng.normal(size=(3, spec.output_dim))
            _, cache = mlp_forward(spec, params, x)
            grads, _ = mlp_backward(spec, params, cache, u)

            named = params.named_tensors()
            name = list(named)[int(rng.integers(len(named)))]
            index = tuple(int(rng.integers(d)) for d in named[name].shape)

            def loss_at(offset: float) -> float:
                tensors = {k: v.copy() for k, v in named.items()}
                tensors[name][index] += offset
                return scalar_loss(spec, MlpParams.from_named(spec, tensors), x, u)

            numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
            analytic = float(grads.tensors[name][index])
            assert close(analytic, numeric), (seed, spec.output_head, name, analytic, numeric)
            checks += 1
    assert checks == 100


@pytest.mark.parametrize("spec", [ACTOR, CRITIC])
def test_input_gradient_matches_finite_differences(spec: MlpSpec) -> None:
    rng = np.random.default_rng(11)
    params = random_params(spec, rng)
    x = rng.normal(size=spec.input_dim)
    u = rng.normal(size=spec.output_dim)
    _, cache = mlp_forward(spec, params, x)
    _, input_grad = mlp_backward(spec, params, cache, u)
    assert input_grad.shape == (spec.input_dim,)
    h = 1e-6
    for i in range(spec.input_dim):
        step = np.zeros(spec.input_dim)
        step[i] = h
        numeric = (scalar_loss(spec, params, x + step, u) - scalar_loss(spec, params, x - step, u)) / (2 * h)
        assert close(float(input_grad[i]), numeric)


def test_backward_rejects_stale_cache() -> None:
    rng = np.random.default_rng(0)
    params = init_mlp(ACTOR, rng)
    _, cache = mlp_forward(ACTOR, params, rng.normal(size=ACTOR.input_dim))
    with pytest.raises(StaleCacheError):
        mlp_backward(ACTOR, params.copy(), cache, np.ones(ACTOR.output_dim))


def test_forward_rejects_wrong_input_width() -> None:
    params = init_mlp(ACTOR, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        mlp_forward(ACTOR, params, np.zeros(ACTOR.input_dim + 1))


def test_init_layout() -> None:
    params = init_mlp(ACTOR, np.random.default_rng(0))
    assert list(params.named_tensors()) == [
        "dense0.weights", "dense0.biases", "norm0.gain", "norm0.shift",
        "dense1.weights", "dense1.biases", "norm1.gain", "norm1.shift",
        "dense2.weights", "dense2.biases",
    ]  # fmt: skip
    assert np.all(np.abs(params.dense[-1].weights) <= FINAL_LAYER_BOUND)
    assert np.all(params.norms[0].gain == 1.0) and np.all(params.norms[0].shift == 0.0)
    assert np.all(np.abs(params.dense[0].weights) <= 1.0 / np.sqrt(ACTOR.input_dim))


def test_norm_forward_zero_mean_unit_variance() -> None:
    params = init_mlp(ACTOR, np.random.default_rng(0))
    out = norm_forward(params.norms[0], np.array([1.0, 2.0, 3.0, 10.0]))
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-3


def test_optimizer_zero_gradient_keeps_parameters() -> None:
    params = init_mlp(ACTOR, np.random.default_rng(0))
    state = OptimizerState.for_params(params, 1e-3)
    new_params, new_state = optimizer_step(state, params, GradientSet.zeros_like(params))
    assert new_state.step == 1
    for name, tensor in params.named_tensors().items():
        np.testing.assert_array_equal(new_params.named_tensors()[name], tensor)


def test_optimizer_first_step_moves_by_learning_rate() -> None:
    params = init_mlp(ACTOR, np.random.default_rng(0))
    state = OptimizerState.for_params(params, 1e-3)
    grads = GradientSet({n: np.full_like(t, 0.5) for n, t in params.named_tensors().items()})
    new_params, _ = optimizer_step(state, params, grads)
    delta = new_params.dense[0].weights - params.dense[0].weights
    np.testing.assert_allclose(delta, -1e-3, rtol=1e-6)


def test_optimizer_rejects_non_finite_gradient() -> None:
    params = init_mlp(ACTOR, np.random.default_rng(0))
    state = OptimizerState.for_params(params, 1e-3)
    grads = GradientSet.zeros_like(params)
    grads.tensors["dense0.biases"][0] = np.nan
    with pytest.raises(DivergenceError):
        optimizer_step(state, params, grads)
