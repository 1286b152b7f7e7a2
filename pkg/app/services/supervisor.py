"""Contact-triggered hybrid controller.

The frozen actor drives the arm until the first contact flag. From that step
on, bounded extremum seeking takes over for the rest of the episode,
warm-started from the actor's action at the switching step. There is exactly
one switch per episode.

The ES cost is the dense task cost without the success bonus,
J = |ee - obj| + |obj - goal|. Once the fingertip touches the block the
first term is small, so J follows the object-to-goal distance d2 while
still pulling a detached fingertip back onto the block.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from app.schemas.experiment import EsParams, Mode
from app.schemas.results import EpisodeSummary
from app.services.es_control import EsState, es_action, es_init
from app.services.manip_sim import ACTION_DIM, ManipulationEnv, agent_state

Policy = Callable[[np.ndarray], np.ndarray]

TRAJECTORY_COLUMNS = [
    "t",
    "ee_x", "ee_y", "ee_z",
    "obj_x", "obj_y", "obj_z",
    "goal_x", "goal_y", "goal_z",
    "action_1", "action_2", "action_3", "action_4",
    "beta", "J", "d2", "reward", "contact", "success",
]  # fmt: skip

LEFT_WORKSPACE = "block_left_workspace"
TIMEOUT = "timeout"
FINAL_WINDOW_FRACTION = 0.25


@dataclass(frozen=True)
class HybridState:
    beta: int = 1
    t_c: Optional[int] = None
    es_state: Optional[EsState] = None


@dataclass(frozen=True)
class StepRecord:
    t: int
    ee: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    action: np.ndarray
    beta: int
    J: float
    d2: float
    reward: float
    contact: bool
    success: bool
    off_table: bool = False


@dataclass
class EpisodeLog:
    moving_goal: bool
    tracking_threshold: float
    records: List[StepRecord] = field(default_factory=list)
    switch_step: Optional[int] = None

    def to_frame(self) -> pd.DataFrame:
        rows = [
            [
                r.t, *r.ee, *r.obj, *r.goal, *r.action,
                r.beta, r.J, r.d2, r.reward, int(r.contact), int(r.success),
            ]  # fmt: skip
            for r in self.records
        ]
        return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)

    def summary(self) -> EpisodeSummary:
        """Fixed goals succeed on any success step; moving goals on the final-window mean of d2."""
        errors = np.array([r.d2 for r in self.records], dtype=np.float64)
        if errors.size == 0:
            return EpisodeSummary(
                success=False,
                final_d2=math.nan,
                mean_tracking_error=math.nan,
                final_window_error=math.nan,
                switch_step=self.switch_step,
                failure_reason=TIMEOUT,
                steps=0,
            )
        window = max(1, math.ceil(FINAL_WINDOW_FRACTION * errors.size))
        final_window_error = float(errors[-window:].mean())
        if self.moving_goal:
            success = final_window_error <= self.tracking_threshold
        else:
            success = any(r.success for r in self.records)

        failure_reason = None
        if any(r.off_table for r in self.records):
            failure_reason = LEFT_WORKSPACE
            success = False
        elif not success:
            failure_reason = TIMEOUT
        return EpisodeSummary(
            success=success,
            final_d2=float(errors[-1]),
            mean_tracking_error=float(errors.mean()),
            final_window_error=final_window_error,
            switch_step=self.switch_step,
            failure_reason=failure_reason,
            steps=len(self.records),
        )


def update_beta(
    h: HybridState, contact: bool, t: int, last_rl_action: Sequence[float]
) -> HybridState:
    """Latch beta to 0 on the first contact and warm-start ES from the RL action."""
    if h.beta == 1 and contact:
        return replace(h, beta=0, t_c=t, es_state=es_init(last_rl_action))
    return h


def hybrid_action(
    h: HybridState, a_rl: Sequence[float], a_es: Optional[Sequence[float]]
) -> np.ndarray:
    """Binary beta selects one controller's action unchanged."""
    if h.beta == 1:
        return np.array(a_rl, dtype=np.float64)
    return np.array(a_es, dtype=np.float64)


def es_cost(info: Mapping[str, Any]) -> float:
    """J fed to extremum seeking: d1 + d2 from a step's ``info``."""
    return float(info["d1"]) + float(info["d2"])


def run_episode(
    env: ManipulationEnv,
    actor: Optional[Policy],
    es_params: EsParams,
    mode: Mode,
    horizon: int,
    seed: int = 0,
    object_start: Optional[Sequence[float]] = None,
    tracking_threshold: float = 0.1,
) -> EpisodeLog:
    if mode != "es_only" and actor is None:
        raise ValueError(f"mode {mode} needs an actor")

    options = {"object_start": object_start} if object_start is not None else None
    obs, info = env.reset(seed=seed, options=options)
    log = EpisodeLog(moving_goal=env.tracking, tracking_threshold=tracking_threshold)
    h = HybridState()
    if mode == "es_only":
        h = HybridState(beta=0, t_c=0, es_state=es_init(np.zeros(ACTION_DIM)))

    for t in range(horizon):
        a_rl = actor(agent_state(obs)) if actor is not None and mode != "es_only" else None
        if mode == "hybrid":
            h = update_beta(h, info["contact"], t, a_rl)
            if h.t_c == t:
                logger.debug(f"seed {seed}: contact at step {t}, switching to ES")

        a_es = None
        if h.beta == 0:
            a_es, es_state = es_action(es_params, h.es_state, es_cost(info))
            h = replace(h, es_state=es_state)
        action = hybrid_action(h, a_rl if a_rl is not None else a_es, a_es)

        obs, reward, terminated, truncated, info = env.step(action)
        state = env.state
        log.records.append(
            StepRecord(
                t=t,
                ee=state.ee_pos.copy(),
                obj=state.obj_pos.copy(),
                goal=obs["desired_goal"].copy(),
                action=action,
                beta=h.beta,
                J=es_cost(info),
                d2=float(info["d2"]),
                reward=reward,
                contact=info["contact"],
                success=info["is_success"],
                off_table=info["off_table"],
            )
        )
        if terminated or info["off_table"]:
            break

    log.switch_step = h.t_c
    return log
