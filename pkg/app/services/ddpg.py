"""Goal-conditioned DDPG: replay, actor/critic, target networks and the training loop."""

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from loguru import logger

from app.core.config import get_settings
from app.core.errors import DimensionError, DivergenceError
from app.schemas.experiment import AgentHyperparams
from app.schemas.results import CurveRecord
from app.services.manip_sim import ManipulationEnv, agent_state
from app.services.tensor_core import (
    MlpParams,
    MlpSpec,
    OptimizerState,
    init_mlp,
    mlp_backward,
    mlp_forward,
    optimizer_step,
)

settings = get_settings()

# (states, actions) -> (Q values (N,), dQ/da (N, action_dim))
QAndGrad = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
Policy = Callable[[np.ndarray], np.ndarray]
# tanh rounds to exactly +-1 in float64 for large pre-activations
ACTION_BOUND = 1.0 - 1e-7


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions: List[Transition]) -> "Batch":
        if not transitions:
            raise DimensionError("batch must contain at least one transition")
        return cls(
            states=np.stack([t.state for t in transitions]).astype(np.float64),
            actions=np.stack([t.action for t in transitions]).astype(np.float64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.stack([t.next_state for t in transitions]).astype(np.float64),
            terminals=np.array([float(t.terminal) for t in transitions]),
        )


class ReplayBuffer:
    """Fixed-capacity ring; once full the oldest transition is overwritten first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("replay capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros((capacity, action_dim))
        self._rewards = np.zeros(capacity)
        self._next_states = np.zeros((capacity, state_dim))
        self._terminals = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        state = np.asarray(transition.state, dtype=np.float64)
        action = np.asarray(transition.action, dtype=np.float64)
        next_state = np.asarray(transition.next_state, dtype=np.float64)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise DimensionError(f"state must have shape ({self.state_dim},)")
        if action.shape != (self.action_dim,):
            raise DimensionError(f"action must have shape ({self.action_dim},)")

        i = self.cursor
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = transition.reward
        self._next_states[i] = next_state
        self._terminals[i] = float(transition.terminal)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch(
            states=self._states[idx].copy(),
            actions=self._actions[idx].copy(),
            rewards=self._rewards[idx].copy(),
            next_states=self._next_states[idx].copy(),
            terminals=self._terminals[idx].copy(),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise DimensionError("cannot sample from an empty replay buffer")
        return self._gather(rng.integers(0, self.size, size=batch_size))

    def contents(self) -> Batch:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        idx = (start + np.arange(self.size)) % self.capacity
        return self._gather(idx)


def polyak_average(live: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    live_tensors = live.named_tensors()
    target_tensors = target.named_tensors()
    if list(live_tensors) != list(target_tensors) or live.spec != target.spec:
        raise DimensionError("target network is not congruent with the live network")
    blended = {
        name: tau * live_tensors[name] + (1.0 - tau) * target_tensors[name]
        for name in live_tensors
    }
    return MlpParams.from_named(target.spec, blended, [n.epsilon for n in target.norms])


def actor_ascent_step(
    spec: MlpSpec,
    params: MlpParams,
    opt_state: OptimizerState,
    states: np.ndarray,
    q_and_grad: QAndGrad,
) -> Tuple[MlpParams, OptimizerState, float]:
    """One optimizer step raising mean Q(s, mu(s)); returns the pre-step objective."""
    actions, cache = mlp_forward(spec, params, states)
    actions = np.atleast_2d(actions)
    q, dq_da = q_and_grad(np.atleast_2d(states), actions)
    objective = float(np.mean(q))
    if not np.isfinite(objective):
        raise DivergenceError(f"actor objective is non-finite: {objective}")
    upstream = -np.asarray(dq_da, dtype=np.float64) / len(actions)
    grads, _ = mlp_backward(spec, params, cache, upstream)
    if not grads.is_finite():
        raise DivergenceError("actor gradient is non-finite")
    new_params, new_state = optimizer_step(opt_state, params, grads)
    return new_params, new_state, objective


class DdpgAgent:
    def __init__(self, hyper: AgentHyperparams, seed: int = 0):
        self.hyper = hyper
        self.rng = np.random.default_rng(seed)
        self.actor_spec = MlpSpec(hyper.state_dim, hyper.hidden_dims, hyper.action_dim, "tanh")
        self.critic_spec = MlpSpec(
            hyper.state_dim + hyper.action_dim, hyper.hidden_dims, 1, "linear"
        )
        self.actor = init_mlp(self.actor_spec, self.rng)
        self.critic = init_mlp(self.critic_spec, self.rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = OptimizerState.for_params(self.actor, hyper.actor_lr)
        self.critic_opt = OptimizerState.for_params(self.critic, hyper.critic_lr)

    @classmethod
    def from_components(
        cls,
        hyper: AgentHyperparams,
        actor: MlpParams,
        critic: MlpParams,
        target_actor: MlpParams,
        target_critic: MlpParams,
        actor_opt: OptimizerState,
        critic_opt: OptimizerState,
        seed: int = 0,
    ) -> "DdpgAgent":
        agent = cls(hyper, seed)
        for live, target in ((actor, target_actor), (critic, target_critic)):
            if live.spec != target.spec:
                raise DimensionError("target network is not congruent with the live network")
        if actor.spec != agent.actor_spec or critic.spec != agent.critic_spec:
            raise DimensionError("network specs do not match the hyperparameters")
        agent.actor, agent.critic = actor, critic
        agent.target_actor, agent.target_critic = target_actor, target_critic
        agent.actor_opt, agent.critic_opt = actor_opt, critic_opt
        return agent

    def act(self, state: np.ndarray) -> np.ndarray:
        """Deterministic policy output without noise."""
        action, _ = mlp_forward(self.actor_spec, self.actor, state)
        return np.clip(action, -ACTION_BOUND, ACTION_BOUND)

    def policy(self) -> Policy:
        """Frozen noise-free actor over a snapshot of the current parameters."""
        spec, params = self.actor_spec, self.actor.copy()

        def frozen(state: np.ndarray) -> np.ndarray:
            action, _ = mlp_forward(spec, params, state)
            return np.clip(action, -ACTION_BOUND, ACTION_BOUND)

        return frozen

    def select_action(self, state: np.ndarray, noise_std: float) -> np.ndarray:
        action = self.act(np.asarray(state, dtype=np.float64))
        if noise_std > 0.0:
            action = action + self.rng.normal(0.0, noise_std, size=action.shape)
        return np.clip(action, -1.0, 1.0)

    def _critic_values(
        self, params: MlpParams, states: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        q, _ = mlp_forward(self.critic_spec, params, np.concatenate([states, actions], axis=1))
        return q[:, 0]

    def critic_target(self, batch: Batch) -> np.ndarray:
        next_actions, _ = mlp_forward(self.actor_spec, self.target_actor, batch.next_states)
        next_q = self._critic_values(self.target_critic, batch.next_states, next_actions)
        return batch.rewards + self.hyper.gamma * (1.0 - batch.terminals) * next_q

    def critic_update(self, batch: Batch) -> float:
        """One step on the mean squared TD error; returns the pre-step loss."""
        targets = self.critic_target(batch)
        inputs = np.concatenate([batch.states, batch.actions], axis=1)
        q, cache = mlp_forward(self.critic_spec, self.critic, inputs)
        error = q[:, 0] - targets
        loss = float(np.mean(error**2))
        if not np.isfinite(loss):
            logger.error(f"critic loss diverged at step {self.critic_opt.step}: {loss}")
            raise DivergenceError(f"non-finite critic loss {loss}")
        upstream = (2.0 / len(error)) * error[:, None]
        grads, _ = mlp_backward(self.critic_spec, self.critic, cache, upstream)
        self.critic, self.critic_opt = optimizer_step(self.critic_opt, self.critic, grads)
        return loss

    def q_and_action_grad(
        self, states: np.ndarray, actions: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        inputs = np.concatenate([states, actions], axis=1)
        q, cache = mlp_forward(self.critic_spec, self.critic, inputs)
        _, input_grad = mlp_backward(self.critic_spec, self.critic, cache, np.ones_like(q))
        return q[:, 0], input_grad[:, self.hyper.state_dim :]

    def actor_update(self, batch: Batch) -> float:
        self.actor, self.actor_opt, objective = actor_ascent_step(
            self.actor_spec, self.actor, self.actor_opt, batch.states, self.q_and_action_grad
        )
        return objective

    def polyak_update(self) -> None:
        tau = self.hyper.tau
        self.target_actor = polyak_average(self.actor, self.target_actor, tau)
        self.target_critic = polyak_average(self.critic, self.target_critic, tau)


def train(
    env: ManipulationEnv,
    agent: DdpgAgent,
    epochs: int,
    episodes_per_epoch: int,
    buffer: Optional[ReplayBuffer] = None,
    horizon: Optional[int] = None,
    on_epoch: Optional[Callable[[CurveRecord], None]] = None,
) -> List[CurveRecord]:
    """Goal-randomized training; one critic, actor and target update per env step after warmup."""
    if episodes_per_epoch < 1:
        raise ValueError(f"episodes_per_epoch must be >= 1, got {episodes_per_epoch}")
    hyper = agent.hyper
    buffer = buffer or ReplayBuffer(hyper.buffer_size, hyper.state_dim, hyper.action_dim)
    horizon = horizon or env.horizon
    ema_weight = settings.success_ema_weight
    ready = max(hyper.warmup, hyper.batch_size)

    curve: List[CurveRecord] = []
    smoothed: Optional[float] = None
    total_steps = 0
    for epoch in range(epochs):
        successes = 0
        returns = []
        for _ in range(episodes_per_epoch):
            obs, _ = env.reset(seed=int(agent.rng.integers(0, 2**31 - 1)))
            state = agent_state(obs)
            episode_return = 0.0
            reached = False
            for _ in range(horizon):
                if total_steps < hyper.warmup:
                    action = agent.rng.uniform(-1.0, 1.0, size=hyper.action_dim)
                else:
                    action = agent.select_action(state, hyper.noise_std)
                obs, reward, terminated, truncated, info = env.step(action)
                next_state = agent_state(obs)
                buffer.add(Transition(state, action, reward, next_state, terminated))
                total_steps += 1

                if len(buffer) >= ready:
                    batch = buffer.sample(hyper.batch_size, agent.rng)
                    agent.critic_update(batch)
                    agent.actor_update(batch)
                    agent.polyak_update()

                episode_return += reward
                reached = reached or info["is_success"]
                state = next_state
                if terminated or truncated:
                    break
            successes += int(reached)
            returns.append(episode_return)

        rate = successes / episodes_per_epoch
        smoothed = rate if smoothed is None else ema_weight * smoothed + (1.0 - ema_weight) * rate
        record = CurveRecord(
            epoch=epoch,
            success_rate=rate,
            smoothed_success_rate=smoothed,
            mean_return=float(np.mean(returns)),
        )
        curve.append(record)
        logger.info(
            f"epoch {epoch}: success {rate:.3f} (smoothed {smoothed:.3f}), "
            f"mean return {record.mean_return:.3f}"
        )
        if on_epoch is not None:
            on_epoch(record)
    return curve
