"""Out-of-distribution scenario presets.

Every preset starts from the nominal workspace. ``push_friction_fixed``
starts the block in the low-friction band and asks for motion across the
higher-friction bands; its horizon leaves room for ES-driven motion to reach
the table edge.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.core.config import get_settings
from app.core.errors import UnknownScenarioError
from app.schemas.experiment import (
    CircularGoal,
    FixedGoal,
    FrictionMap,
    GoalSpec,
    HelixGoal,
    Task,
    WorkspaceSpec,
)
from app.services.manip_sim import ManipulationEnv, three_patch_map

settings = get_settings()


@dataclass(frozen=True)
class Scenario:
    name: str
    task: Task
    friction: FrictionMap
    goal: GoalSpec
    object_start: Tuple[float, float]
    horizon: int

    def env(self, workspace: WorkspaceSpec) -> ManipulationEnv:
        return ManipulationEnv(
            task=self.task,
            workspace=workspace,
            friction=self.friction,
            goal=self.goal,
            object_start=self.object_start,
            horizon=self.horizon,
        )

    def start_for_seed(self, seed: int, jitter: Optional[float] = None) -> Tuple[float, float]:
        """Object start jittered uniformly within +-jitter metres for ``seed``."""
        jitter = settings.scenario_jitter if jitter is None else jitter
        offset = np.random.default_rng(seed).uniform(-jitter, jitter, size=2)
        return (
            float(self.object_start[0] + offset[0]),
            float(self.object_start[1] + offset[1]),
        )


def push_friction_fixed(ws: WorkspaceSpec) -> Scenario:
    return Scenario(
        name="push_friction_fixed",
        task="push",
        friction=three_patch_map(ws),
        goal=FixedGoal(g=(0.85 * ws.x_max, 0.5 * ws.y_max, ws.rest_height)),
        object_start=(0.3 * ws.x_max, 0.5 * ws.y_max),
        horizon=2500,
    )


def push_friction_moving(ws: WorkspaceSpec) -> Scenario:
    return Scenario(
        name="push_friction_moving",
        task="push",
        friction=three_patch_map(ws),
        goal=CircularGoal(
            center=(0.9 * ws.x_max, 0.9 * ws.y_max, ws.rest_height),
            radius=0.05,
            period=200.0,
        ),
        object_start=(0.7 * ws.x_max, 0.7 * ws.y_max),
        horizon=800,
    )


def pp_track3d(ws: WorkspaceSpec) -> Scenario:
    return Scenario(
        name="pp_track3d",
        task="pick_place",
        friction=FrictionMap(),
        goal=HelixGoal(
            x_c=0.75 * ws.x_max,
            y_c=0.75 * ws.y_max,
            r=0.15,
            T_xy=500.0,
            z0=0.45,
            A_z=0.20,
            T_z=4000.0,
        ),
        object_start=(0.6 * ws.x_max, 0.6 * ws.y_max),
        horizon=4000,
    )


SCENARIOS = {
    "push_friction_fixed": push_friction_fixed,
    "push_friction_moving": push_friction_moving,
    "pp_track3d": pp_track3d,
}


def build_scenario(name: str, workspace: Optional[WorkspaceSpec] = None) -> Scenario:
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise UnknownScenarioError(
            f"unknown scenario {name!r}", [f"choose one of {', '.join(SCENARIOS)}"]
        ) from None
    return factory(workspace or WorkspaceSpec())
