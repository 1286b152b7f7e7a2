"""Desk-scale push and pick-and-place simulator.

The end effector is kinematic and the block is an axis-aligned square resting
on the table that moves quasi-statically. The fingertip is compliant: once it
enters a block face, that face stays latched while the fingertip remains
inside the footprint, and the block is pushed along the face normal whenever
the fingertip is more than the local stiction deadband ``mu * d_stick`` deep.
A fingertip that keeps pressing therefore carries the block with it at a lag
of ``mu * d_stick``. Pulling back only separates the fingertip from the face
and tangential motion slides along it. Yaw stays fixed at zero.

Observation layout (25 slots)::

    0:3   end-effector position
    3:6   object position
    6:9   object - end effector
    9:11  finger positions (width / 2 each)
    11:14 object orientation (yaw, 0, 0)
    14:17 object linear velocity (m/step)
    17:20 object angular velocity (0, 0, yaw_rate)
    20:23 end-effector linear velocity (m/step)
    23:25 finger velocities

The agent state is the observation followed by the current goal (28 slots).
"""

import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from app.core.errors import ConfigError, DimensionError
from app.schemas.experiment import (
    CircularGoal,
    FixedGoal,
    FrictionMap,
    FrictionPatch,
    GoalSpec,
    HelixGoal,
    Task,
    WorkspaceSpec,
    goal_issues,
)

OBS_DIM = 25
GOAL_DIM = 3
STATE_DIM = OBS_DIM + GOAL_DIM
ACTION_DIM = 4
SUCCESS_BONUS = 2.0
THREE_PATCH_MUS = (0.8, 1.2, 1.5)

# (axis, side): side is +1 when the fingertip entered from the + side of ``axis``
Face = Tuple[int, float]
Observation = Dict[str, np.ndarray]


@dataclass(frozen=True)
class Scene:
    task: Task
    workspace: WorkspaceSpec
    friction: FrictionMap
    goal: GoalSpec


@dataclass(frozen=True)
class SimState:
    scene: Scene
    ee_pos: np.ndarray
    ee_vel: np.ndarray
    gripper_width: float
    gripper_vel: float
    obj_pos: np.ndarray
    obj_vel: np.ndarray
    obj_yaw: float
    obj_yaw_rate: float
    grasped: bool
    t: int
    off_table: bool = False
    push_face: Optional[Face] = None


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    goal: np.ndarray
    reward: float
    success: bool
    contact: bool
    d1: float
    d2: float
    off_table: bool = False

    @property
    def agent_state(self) -> np.ndarray:
        return np.concatenate([self.observation, self.goal])

    @property
    def obs(self) -> Observation:
        return {
            "observation": self.observation,
            "achieved_goal": self.observation[3:6].copy(),
            "desired_goal": self.goal,
        }

    @property
    def info(self) -> Dict[str, Any]:
        return {
            "is_success": self.success,
            "contact": self.contact,
            "d1": self.d1,
            "d2": self.d2,
            "off_table": self.off_table,
        }


def agent_state(obs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Flatten a dict observation into the 28-slot policy input."""
    return np.concatenate([obs["observation"], obs["desired_goal"]])


def friction_at(friction: FrictionMap, p: Sequence[float]) -> float:
    """Coefficient of the last declared patch covering ``p`` (closed rectangles)."""
    x, y = float(p[0]), float(p[1])
    for patch in reversed(friction.patches):
        if patch.x_lo <= x <= patch.x_hi and patch.y_lo <= y <= patch.y_hi:
            return patch.mu
    return friction.default_mu


def friction_bound(friction: FrictionMap, d_stick: float) -> float:
    """Largest stiction deadband ``max mu * d_stick`` anywhere on the table."""
    mus = [friction.default_mu, *(patch.mu for patch in friction.patches)]
    return max(mus) * d_stick


def three_patch_map(
    workspace: WorkspaceSpec, mus: Sequence[float] = THREE_PATCH_MUS
) -> FrictionMap:
    """Equal bands along +x with increasing friction."""
    width = workspace.x_max / len(mus)
    patches = [
        FrictionPatch(
            x_lo=i * width,
            x_hi=workspace.x_max if i == len(mus) - 1 else (i + 1) * width,
            y_lo=0.0,
            y_hi=workspace.y_max,
            mu=mu,
        )
        for i, mu in enumerate(mus)
    ]
    return FrictionMap(patches=patches)


def goal_at(goal: GoalSpec, t: int) -> np.ndarray:
    if isinstance(goal, FixedGoal):
        return np.array(goal.g, dtype=np.float64)
    if isinstance(goal, CircularGoal):
        phase = 2.0 * math.pi * t / goal.period
        cx, cy, cz = goal.center
        return np.array(
            [cx + goal.radius * math.sin(phase), cy + goal.radius * math.cos(phase), cz]
        )
    if isinstance(goal, HelixGoal):
        phase_xy = 2.0 * math.pi * t / goal.T_xy
        phase_z = 2.0 * math.pi * t / goal.T_z
        return np.array(
            [
                goal.x_c + goal.r * math.sin(phase_xy),
                goal.y_c + goal.r * math.cos(phase_xy),
                goal.z0 + goal.A_z * math.sin(phase_z),
            ]
        )
    raise ConfigError(f"unsupported goal variant: {goal!r}")


def is_moving(goal: GoalSpec) -> bool:
    return not isinstance(goal, FixedGoal)


def validate_goal(goal: GoalSpec, workspace: WorkspaceSpec) -> None:
    """Reject goal trajectories that leave the reachable box at any time."""
    issues = goal_issues(goal, workspace)
    if issues:
        raise ConfigError("goal trajectory leaves the workspace", issues)


def compute_reward(
    ee: Sequence[float],
    obj: Sequence[float],
    goal: Sequence[float],
    threshold: float = 0.05,
) -> Tuple[float, float, float, bool]:
    """Dense reward ``-d1 - d2`` plus a bonus of 2 once the object is within ``threshold``."""
    ee_arr, obj_arr, goal_arr = (np.asarray(v, dtype=np.float64) for v in (ee, obj, goal))
    d1 = float(np.linalg.norm(ee_arr - obj_arr))
    d2 = float(np.linalg.norm(obj_arr - goal_arr))
    success = d2 <= threshold
    reward = -d1 - d2 + (SUCCESS_BONUS if success else 0.0)
    return reward, d1, d2, success


def observe(state: SimState, goal: GoalSpec) -> Tuple[np.ndarray, np.ndarray]:
    finger = 0.5 * state.gripper_width
    finger_vel = 0.5 * state.gripper_vel
    obs = np.concatenate(
        [
            state.ee_pos,
            state.obj_pos,
            state.obj_pos - state.ee_pos,
            [finger, finger],
            [state.obj_yaw, 0.0, 0.0],
            state.obj_vel,
            [0.0, 0.0, state.obj_yaw_rate],
            state.ee_vel,
            [finger_vel, finger_vel],
        ]
    )
    return obs, goal_at(goal, state.t)


def contact(state: SimState) -> bool:
    ws = state.scene.workspace
    if state.scene.task == "pick_place":
        return state.grasped
    h = ws.block_half_extent
    dx = max(abs(state.ee_pos[0] - state.obj_pos[0]) - h, 0.0)
    dy = max(abs(state.ee_pos[1] - state.obj_pos[1]) - h, 0.0)
    in_band = abs(state.ee_pos[2] - state.obj_pos[2]) <= h
    return bool(math.hypot(dx, dy) <= ws.contact_tol and in_band)


def _result(state: SimState) -> StepResult:
    obs, goal = observe(state, state.scene.goal)
    reward, d1, d2, success = compute_reward(
        state.ee_pos, state.obj_pos, goal, state.scene.workspace.success_threshold
    )
    return StepResult(
        observation=obs,
        goal=goal,
        reward=reward,
        success=success,
        contact=contact(state),
        d1=d1,
        d2=d2,
        off_table=state.off_table,
    )


def _sample_goal(task: Task, workspace: WorkspaceSpec, rng: np.random.Generator) -> FixedGoal:
    h = workspace.block_half_extent
    x = rng.uniform(h, workspace.x_max - h)
    y = rng.uniform(h, workspace.y_max - h)
    z = workspace.rest_height
    if task == "pick_place" and rng.uniform() < 0.5:
        z += rng.uniform(0.0, 0.45)
    return FixedGoal(g=(float(x), float(y), float(min(z, workspace.z_max))))


def reset(
    task: Task,
    workspace: WorkspaceSpec,
    friction: FrictionMap,
    goal: Optional[GoalSpec],
    seed: int,
    object_start: Optional[Sequence[float]] = None,
) -> Tuple[SimState, StepResult]:
    """Home the end effector above the table centre and place the object.

    Without ``object_start`` the object is drawn uniformly from the central
    60% of the table. Without ``goal`` a fixed goal is drawn from the
    training distribution of ``task``.
    """
    rng = np.random.default_rng(seed)
    if object_start is None:
        ox = rng.uniform(0.2 * workspace.x_max, 0.8 * workspace.x_max)
        oy = rng.uniform(0.2 * workspace.y_max, 0.8 * workspace.y_max)
    else:
        ox, oy = float(object_start[0]), float(object_start[1])
    if goal is None:
        goal = _sample_goal(task, workspace, rng)
    validate_goal(goal, workspace)

    scene = Scene(task=task, workspace=workspace, friction=friction, goal=goal)
    state = SimState(
        scene=scene,
        ee_pos=np.array(
            [
                0.5 * workspace.x_max,
                0.5 * workspace.y_max,
                workspace.rest_height + workspace.home_clearance,
            ]
        ),
        ee_vel=np.zeros(3),
        gripper_width=0.0 if task == "push" else 1.0,
        gripper_vel=0.0,
        obj_pos=np.array([ox, oy, workspace.rest_height]),
        obj_vel=np.zeros(3),
        obj_yaw=0.0,
        obj_yaw_rate=0.0,
        grasped=False,
        t=0,
    )
    return state, _result(state)


def _push(
    state: SimState, ee_target: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, Optional[Face]]:
    """Resolve fingertip/block overlap; returns (ee, obj, latched face)."""
    ws = state.scene.workspace
    h = ws.block_half_extent
    obj = state.obj_pos.copy()
    ee = ee_target.copy()
    offset = ee - obj
    inside = abs(offset[0]) < h and abs(offset[1]) < h and abs(offset[2]) <= h
    if not inside:
        return ee, obj, None

    face = state.push_face
    if face is None:
        # the face the end effector was outside of on the previous step
        previous = state.ee_pos - state.obj_pos
        axis = int(np.argmax(np.abs(previous) - h))
        face = (axis, 1.0 if previous[axis] >= 0.0 else -1.0)
    axis, side = face

    if axis == 2:
        ee[2] = obj[2] + side * h
        return ee, obj, None

    depth = h - side * offset[axis]
    mu = friction_at(state.scene.friction, obj[:2])
    move = max(0.0, depth - mu * ws.stiction_scale)
    obj[axis] -= side * move
    return ee, obj, face


def step(state: SimState, action: Sequence[float]) -> Tuple[SimState, StepResult]:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACTION_DIM,):
        raise DimensionError(f"action has shape {a.shape}, expected ({ACTION_DIM},)")
    a = np.clip(np.nan_to_num(a, nan=0.0), -1.0, 1.0)
    scene = state.scene
    ws = scene.workspace

    grasped = state.grasped
    floor = ws.z_min if grasped else ws.table_height
    lo = np.array([0.0, 0.0, floor])
    hi = np.array([ws.x_max, ws.y_max, ws.z_max])
    ee_target = np.clip(state.ee_pos + ws.ee_step_scale * a[:3], lo, hi)

    if scene.task == "push":
        width = 0.0
    else:
        width = float(np.clip(state.gripper_width + ws.gripper_rate * a[3], 0.0, 1.0))

    face = None
    if grasped and a[3] > 0.0:
        grasped = False
        ee, obj = ee_target, np.array([ee_target[0], ee_target[1], ws.rest_height])
    elif grasped:
        ee, obj = ee_target, ee_target.copy()
    elif (
        scene.task == "pick_place"
        and a[3] < 0.0
        and np.linalg.norm(ee_target - state.obj_pos) <= ws.grasp_radius
    ):
        grasped = True
        ee, obj = ee_target, ee_target.copy()
    else:
        ee, obj, face = _push(state, ee_target)

    off_table = state.off_table or not (
        0.0 <= obj[0] <= ws.x_max and 0.0 <= obj[1] <= ws.y_max
    )
    new_state = replace(
        state,
        ee_pos=ee,
        ee_vel=ee - state.ee_pos,
        gripper_width=width,
        gripper_vel=width - state.gripper_width,
        obj_pos=obj,
        obj_vel=obj - state.obj_pos,
        obj_yaw_rate=0.0,
        grasped=grasped,
        t=state.t + 1,
        off_table=off_table,
        push_face=face,
    )
    return new_state, _result(new_state)


def _unbounded(n: int) -> spaces.Box:
    return spaces.Box(-np.inf, np.inf, shape=(n,), dtype=np.float64)


class ManipulationEnv(gym.Env):
    """Goal-conditioned gymnasium environment over the pure ``reset``/``step``.

    Observations are Fetch-style dicts (``observation``, ``achieved_goal``,
    ``desired_goal``). ``info`` carries ``is_success``, ``contact``, ``d1``,
    ``d2`` and ``off_table``. An episode terminates on a fixed-goal success
    and is truncated at ``horizon`` or when the block leaves the table.
    With ``goal=None`` every reset draws a new fixed goal, which is the
    training distribution.
    """

    metadata = {"render_modes": []}

    def __init__(
        self,
        task: Task,
        workspace: Optional[WorkspaceSpec] = None,
        friction: Optional[FrictionMap] = None,
        goal: Optional[GoalSpec] = None,
        object_start: Optional[Sequence[float]] = None,
        horizon: Optional[int] = None,
    ):
        super().__init__()
        self.task = task
        self.workspace = workspace or WorkspaceSpec()
        self.friction = friction or FrictionMap()
        self.goal = goal
        self.object_start = object_start
        self.horizon = horizon or self.workspace.horizon
        self.state: Optional[SimState] = None
        if goal is not None:
            validate_goal(goal, self.workspace)

        self.action_space = spaces.Box(-1.0, 1.0, shape=(ACTION_DIM,), dtype=np.float64)
        self.observation_space = spaces.Dict(
            {
                "observation": _unbounded(OBS_DIM),
                "achieved_goal": _unbounded(GOAL_DIM),
                "desired_goal": _unbounded(GOAL_DIM),
            }
        )

    @property
    def tracking(self) -> bool:
        return self.goal is not None and is_moving(self.goal)

    def reset(
        self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None
    ) -> Tuple[Observation, Dict[str, Any]]:
        """``options["object_start"]`` overrides the constructor's start for this episode."""
        super().reset(seed=seed)
        if seed is None:
            seed = int(self.np_random.integers(0, 2**31 - 1))
        start = (options or {}).get("object_start")
        if start is None:
            start = self.object_start
        self.state, result = reset(
            self.task, self.workspace, self.friction, self.goal, seed, start
        )
        return result.obs, result.info

    def step(
        self, action: Sequence[float]
    ) -> Tuple[Observation, float, bool, bool, Dict[str, Any]]:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        self.state, result = step(self.state, action)
        terminated = result.success and not self.tracking
        truncated = result.off_table or self.state.t >= self.horizon
        return result.obs, result.reward, terminated, truncated, result.info
