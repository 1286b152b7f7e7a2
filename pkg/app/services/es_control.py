"""Bounded extremum seeking: the deployed discrete law and its averaging oracle.

Deployed law, one channel per Cartesian action::

    a_i(t) = clip(dt * sqrt(alpha * omega_i) * cos(omega_i * t * dt + k * J_t), -1, 1)

with ``omega_i = r_i * omega`` and ``t`` the post-handoff step count; step 0
replays the warm-start action so the handoff is continuous. The
fourth channel (gripper) is held at its handoff value. The ``+ k J`` phase is
the one whose weak-limit average is ``-(k alpha / 2) grad J``, i.e. descent on
the cost, which is what ``averaged_flow`` integrates.
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from app.core.errors import ActionBoxError, DimensionError, FeedbackError
from app.schemas.experiment import EsParams

GRIPPER_CHANNEL = 3
ACTION_DIM = 4

GradientFn = Callable[[np.ndarray, float], np.ndarray]
CostFn = Callable[[np.ndarray, float], float]
DriftFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class EsState:
    t: int
    frozen_gripper: float
    warm_start: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), dim)

    def __len__(self) -> int:
        return len(self.times)


def es_init(a_rl_at_handoff: Sequence[float]) -> EsState:
    """Warm-start the controller from the RL action at the switching instant."""
    action = np.asarray(a_rl_at_handoff, dtype=np.float64)
    if action.shape != (ACTION_DIM,):
        raise ActionBoxError(f"expected a {ACTION_DIM}-vector, got shape {action.shape}")
    if not np.all(np.isfinite(action)) or np.any(np.abs(action) > 1.0):
        raise ActionBoxError(f"handoff action outside [-1, 1]^4: {action.tolist()}")
    return EsState(t=0, frozen_gripper=float(action[GRIPPER_CHANNEL]), warm_start=action.copy())


def channel_amplitudes(params: EsParams) -> np.ndarray:
    """Per-channel bound min(1, dt * sqrt(alpha * omega_i))."""
    raw = params.dt * np.sqrt(params.alpha * np.asarray(params.frequencies))
    return np.minimum(raw, 1.0)


def es_action(params: EsParams, state: EsState, J: float) -> Tuple[np.ndarray, EsState]:
    """Return the bounded ES action for the current cost and the advanced state.

    At ``t == 0`` the action is the warm start itself, so the handoff step
    repeats the RL action; the dither law applies from ``t == 1`` on.
    """
    if not np.isfinite(J):
        raise FeedbackError(f"non-finite cost J={J} at ES step {state.t}")
    if state.t == 0:
        action = np.clip(state.warm_start, -1.0, 1.0)
        action[GRIPPER_CHANNEL] = state.frozen_gripper
        return action, replace(state, t=1)

    omegas = np.asarray(params.frequencies[: ACTION_DIM - 1])
    amplitude = params.dt * np.sqrt(params.alpha * omegas)
    phase = omegas * (state.t * params.dt) + params.k * J

    action = np.empty(ACTION_DIM)
    action[: len(omegas)] = amplitude * np.cos(phase)
    action[len(omegas) : GRIPPER_CHANNEL] = 0.0
    action = np.clip(action, -1.0, 1.0)
    action[GRIPPER_CHANNEL] = state.frozen_gripper
    return action, replace(state, t=state.t + 1)


def _rk4_step(
    f: Callable[[np.ndarray, float], np.ndarray], x: np.ndarray, t: float, h: float
) -> np.ndarray:
    k1 = f(x, t)
    k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = f(x + h * k3, t + h)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def averaged_flow(
    grad_J: GradientFn,
    kalpha: float,
    x0: Sequence[float],
    horizon: float,
    dt_ode: float,
    drift: Optional[DriftFn] = None,
) -> Trajectory:
    """Integrate dx/dt = drift(x, t) - (k alpha / 2) grad J(x, t) with fixed-step RK4.

    Samples are returned at every integration step, ``t = 0, dt_ode, ...``.
    """
    if kalpha < 0:
        raise ValueError("kalpha must be non-negative")
    if dt_ode <= 0 or horizon < 0:
        raise ValueError("dt_ode must be positive and horizon non-negative")

    def rhs(x: np.ndarray, t: float) -> np.ndarray:
        g = np.asarray(grad_J(x, t), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            logger.error(f"averaged flow aborted: gradient {g.tolist()} at t={t:.6g}")
            raise FeedbackError(f"non-finite gradient at t={t:.6g}, x={x.tolist()}")
        velocity = -0.5 * kalpha * g
        if drift is not None:
            velocity = velocity + np.asarray(drift(x, t), dtype=np.float64)
        return velocity

    n_steps = int(round(horizon / dt_ode))
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    states = np.empty((n_steps + 1, x.size))
    states[0] = x
    for n in range(n_steps):
        x = _rk4_step(rhs, x, n * dt_ode, dt_ode)
        states[n + 1] = x
    return Trajectory(np.arange(n_steps + 1) * dt_ode, states)


def es_point_trajectory(
    cost: CostFn,
    alpha: float,
    k: float,
    omega: float,
    ratios: Sequence[float],
    x0: Sequence[float],
    horizon: float,
    sample_dt: float,
    noise_std: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    substep_phase: float = 0.05,
) -> Trajectory:
    """Integrate the ES law applied directly, dx_i/dt = sqrt(alpha w_i) cos(w_i t + k J).

    The state is sampled on the grid ``t = 0, sample_dt, ...`` so it lines up
    with ``averaged_flow`` run at ``dt_ode = sample_dt``. Each sample interval
    is split into RK4 substeps advancing the fastest dither by at most
    ``substep_phase`` radians. Optional Gaussian noise on J is held constant
    over a substep.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    dim = x.size
    if len(ratios) < dim:
        raise DimensionError(f"need {dim} frequency ratios, got {len(ratios)}")
    omegas = omega * np.asarray(ratios[:dim], dtype=np.float64)
    amplitude = np.sqrt(alpha * omegas)
    rng = rng if rng is not None else np.random.default_rng(0)

    n_samples = int(round(horizon / sample_dt))
    fastest = float(np.max(omegas)) if omega > 0 else 1.0
    substeps = max(1, int(np.ceil(sample_dt * fastest / substep_phase)))
    h = sample_dt / substeps

    states = np.empty((n_samples + 1, dim))
    states[0] = x
    t = 0.0
    for n in range(n_samples):
        for _ in range(substeps):
            noise = float(rng.normal(0.0, noise_std)) if noise_std > 0 else 0.0

            def rhs(xs: np.ndarray, ts: float) -> np.ndarray:
                J = float(cost(xs, ts)) + noise
                if not np.isfinite(J):
                    raise FeedbackError(f"non-finite cost at t={ts:.6g}")
                return amplitude * np.cos(omegas * ts + k * J)

            x = _rk4_step(rhs, x, t, h)
            t += h
        t = (n + 1) * sample_dt
        states[n + 1] = x
    return Trajectory(np.arange(n_samples + 1) * sample_dt, states)


def averaging_gap(es_trajectory: Trajectory, averaged_trajectory: Trajectory) -> float:
    """Sup over samples of the Euclidean distance between two aligned trajectories."""
    a = np.asarray(es_trajectory.states, dtype=np.float64)
    b = np.asarray(averaged_trajectory.states, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    if not np.allclose(es_trajectory.times, averaged_trajectory.times, rtol=0, atol=1e-9):
        raise DimensionError("trajectories are not sampled on the same time grid")
    if a.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(a.reshape(len(a), -1) - b.reshape(len(b), -1), axis=1)))


def lyapunov_condition(kalpha: float, friction_bound: float, epsilon: float) -> bool:
    """k alpha > M / epsilon guarantees J decreases outside the epsilon-ball."""
    return kalpha > friction_bound / epsilon


def dither_period_steps(params: EsParams) -> int:
    """Steps in one period of the base dither omega * dt rad/step."""
    return max(1, int(round(2.0 * np.pi / (params.omega * params.dt))))


def period_average(costs: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average over complete windows."""
    averaged = pd.Series(np.asarray(costs, dtype=np.float64)).rolling(window).mean()
    return averaged.dropna().to_numpy()


BENCHMARK_RATIOS = (1.0, 1.75)
DEFAULT_SWEEP = (25.0, 50.0, 100.0, 200.0)


@dataclass(frozen=True)
class AveragingResult:
    omega: float
    es: Trajectory
    averaged: Trajectory
    gap: float

    def to_frame(self) -> pd.DataFrame:
        dim = self.es.states.shape[1]
        axes = "xyz"[:dim] if dim <= 3 else [str(i) for i in range(dim)]
        frame = pd.DataFrame({"t": self.es.times})
        for i, axis in enumerate(axes):
            frame[f"es_{axis}"] = self.es.states[:, i]
        for i, axis in enumerate(axes):
            frame[f"avg_{axis}"] = self.averaged.states[:, i]
        frame["gap"] = np.linalg.norm(self.es.states - self.averaged.states, axis=1)
        return frame


def quadratic_benchmark(
    omega: float,
    dim: int = 2,
    alpha: float = 1.0 / 3.0,
    k: float = 3.0,
    horizon: float = 5.0,
    sample_dt: float = 0.005,
    x0: Optional[Sequence[float]] = None,
) -> AveragingResult:
    """ES versus its averaged flow on J(x) = |x|^2, started from ``x0`` (ones by default)."""
    if dim > len(BENCHMARK_RATIOS):
        raise DimensionError(f"benchmark supports up to {len(BENCHMARK_RATIOS)} dimensions")
    start = np.ones(dim) if x0 is None else np.asarray(x0, dtype=np.float64)

    def cost(x: np.ndarray, t: float) -> float:
        return float(x @ x)

    def grad(x: np.ndarray, t: float) -> np.ndarray:
        return 2.0 * x

    es = es_point_trajectory(
        cost, alpha, k, omega, BENCHMARK_RATIOS[:dim], start, horizon, sample_dt
    )
    averaged = averaged_flow(grad, k * alpha, start, horizon, sample_dt)
    gap = averaging_gap(es, averaged)
    logger.info(f"averaging benchmark omega={omega:g} dim={dim}: gap {gap:.5f}")
    return AveragingResult(omega=omega, es=es, averaged=averaged, gap=gap)
