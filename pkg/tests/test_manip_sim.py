from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from app.core.errors import ConfigError
from app.schemas.experiment import (
    CircularGoal,
    FixedGoal,
    FrictionMap,
    FrictionPatch,
    HelixGoal,
    WorkspaceSpec,
)
from app.services.manip_sim import (
    ACTION_DIM,
    OBS_DIM,
    STATE_DIM,
    ManipulationEnv,
    agent_state,
    compute_reward,
    contact,
    friction_at,
    friction_bound,
    goal_at,
    observe,
    reset,
    step,
    three_patch_map,
)

GOAL = FixedGoal(g=(0.8, 0.5, 0.475))


def touching_state(ws: WorkspaceSpec, mu: float, gap: float = 0.0):
    """End effector resting against the -x face of a block at (0.5, 0.5)."""
    friction = FrictionMap(default_mu=mu)
    state, _ = reset("push", ws, friction, GOAL, seed=0, object_start=(0.5, 0.5))
    h = ws.block_half_extent
    ee = np.array([0.5 - h - gap, 0.5, ws.rest_height])
    return replace(state, ee_pos=ee)


def test_compute_reward_examples() -> None:
    r, d1, d2, success = compute_reward([0, 0, 0], [0.1, 0, 0], [0.1, 0.3, 0])
    assert (d1, d2, success) == (pytest.approx(0.1), pytest.approx(0.3), False)
    assert r == pytest.approx(-0.4)

    r, _, _, success = compute_reward([0, 0, 0], [0.1, 0, 0], [0.1, 0.04, 0])
    assert success and r == pytest.approx(1.86)

    r, _, _, success = compute_reward([1, 1, 1], [1, 1, 1], [1, 1, 1])
    assert success and r == 2.0


def test_reward_decomposition_on_random_triples() -> None:
    rng = np.random.default_rng(0)
    for _ in range(100_000 // 100):
        points = rng.uniform(0, 0.2, size=(100, 3, 3))
        for ee, obj, goal in points:
            r, d1, d2, success = compute_reward(ee, obj, goal)
            assert success == (d2 <= 0.05)
            assert abs(r + d1 + d2 - 2.0 * success) <= 1e-12


def test_reset_is_deterministic(workspace: WorkspaceSpec) -> None:
    a_state, a = reset("push", workspace, FrictionMap(), None, seed=17)
    b_state, b = reset("push", workspace, FrictionMap(), None, seed=17)
    np.testing.assert_array_equal(a.observation, b.observation)
    np.testing.assert_array_equal(a.goal, b.goal)
    np.testing.assert_array_equal(a_state.obj_pos, b_state.obj_pos)


def test_reset_push_pins_gripper_and_zeroes_velocities(workspace: WorkspaceSpec) -> None:
    state, result = reset("push", workspace, FrictionMap(), GOAL, seed=0)
    assert state.gripper_width == 0.0 and not state.grasped and state.t == 0
    assert result.observation.shape == (OBS_DIM,)
    assert result.agent_state.shape == (28,)
    np.testing.assert_array_equal(result.observation[14:25], np.zeros(11))
    np.testing.assert_array_equal(result.observation[6:9], state.obj_pos - state.ee_pos)
    assert state.ee_pos[0] == 0.5 and state.ee_pos[1] == 0.5


def test_reset_object_positions_are_uniform(workspace: WorkspaceSpec) -> None:
    """Chi-square over a 5x5 grid of the central 60% of the table."""
    n = 10_000
    counts = np.zeros((5, 5))
    for seed in range(n):
        state, _ = reset("push", workspace, FrictionMap(), GOAL, seed=seed)
        ix = min(int((state.obj_pos[0] - 0.2) / 0.12), 4)
        iy = min(int((state.obj_pos[1] - 0.2) / 0.12), 4)
        counts[ix, iy] += 1
    expected = n / 25
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 52.6  # 99.9% quantile with 24 degrees of freedom


def test_reset_rejects_goal_outside_workspace(workspace: WorkspaceSpec) -> None:
    with pytest.raises(ConfigError):
        reset("push", workspace, FrictionMap(), FixedGoal(g=(1.5, 0.5, 0.475)), seed=0)
    with pytest.raises(ConfigError):
        reset("push", workspace, FrictionMap(), CircularGoal(center=(0.98, 0.5, 0.475)), seed=0)


def test_zero_action_without_contact_only_advances_time(workspace: WorkspaceSpec) -> None:
    state, _ = reset("push", workspace, FrictionMap(), GOAL, seed=3)
    new_state, _ = step(state, np.zeros(4))
    assert new_state.t == 1
    np.testing.assert_array_equal(new_state.ee_pos, state.ee_pos)
    np.testing.assert_array_equal(new_state.obj_pos, state.obj_pos)
    np.testing.assert_array_equal(new_state.ee_vel, np.zeros(3))


def test_push_displacement_matches_stiction_model(workspace: WorkspaceSpec) -> None:
    state = touching_state(workspace, mu=0.8)
    new_state, _ = step(state, [1.0, 0.0, 0.0, 0.0])
    d_cmd = workspace.ee_step_scale
    expected = d_cmd - 0.8 * workspace.stiction_scale
    assert new_state.obj_pos[0] - 0.5 == pytest.approx(expected, abs=1e-15)
    assert new_state.obj_pos[1] == 0.5
    assert new_state.obj_pos[2] == workspace.rest_height
    # the fingertip keeps its commanded position, one deadband inside the face
    assert new_state.ee_pos[0] == pytest.approx(0.5 - workspace.block_half_extent + d_cmd)
    face = new_state.obj_pos[0] - workspace.block_half_extent
    assert new_state.ee_pos[0] - face == pytest.approx(0.8 * workspace.stiction_scale)
    assert new_state.push_face == (0, -1.0)


def test_sustained_push_carries_block_and_pull_back_releases(workspace: WorkspaceSpec) -> None:
    state = touching_state(workspace, mu=0.8)
    lag = workspace.block_half_extent - 0.8 * workspace.stiction_scale
    for _ in range(4):
        state, _ = step(state, [0.5, 0.0, 0.0, 0.0])
        assert state.obj_pos[0] - state.ee_pos[0] == pytest.approx(lag)
    assert state.push_face == (0, -1.0)

    pushed = state.obj_pos.copy()
    state, result = step(state, [-1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(state.obj_pos, pushed)
    assert state.push_face is None
    assert result.d1 > workspace.block_half_extent


def test_push_below_deadband_does_not_move_block(workspace: WorkspaceSpec) -> None:
    state = touching_state(workspace, mu=1.5)
    small = 0.5 * 1.5 * workspace.stiction_scale / workspace.ee_step_scale
    new_state, _ = step(state, [small, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(new_state.obj_pos, state.obj_pos)


def test_push_displacement_non_increasing_in_friction(workspace: WorkspaceSpec) -> None:
    moves = []
    for mu in (0.5, 0.8, 1.2, 1.5, 5.0, 10.0):
        state = touching_state(workspace, mu=mu)
        new_state, _ = step(state, [0.6, 0.0, 0.0, 0.0])
        moves.append(new_state.obj_pos[0] - state.obj_pos[0])
    assert all(b <= a for a, b in zip(moves, moves[1:]))
    assert moves[-1] == 0.0


def test_contact_flag_geometry(workspace: WorkspaceSpec) -> None:
    assert contact(touching_state(workspace, mu=0.8, gap=0.005))
    assert not contact(touching_state(workspace, mu=0.8, gap=0.2))
    raised = touching_state(workspace, mu=0.8)
    raised = replace(raised, ee_pos=raised.ee_pos + np.array([0.0, 0.0, 0.1]))
    assert not contact(raised)


def test_block_leaving_table_is_flagged(workspace: WorkspaceSpec) -> None:
    state, _ = reset("push", workspace, FrictionMap(default_mu=0.1), GOAL, seed=0, object_start=(0.99, 0.5))
    h = workspace.block_half_extent
    state = replace(state, ee_pos=np.array([0.99 - h, 0.5, workspace.rest_height]))
    for _ in range(5):
        state, result = step(state, [1.0, 0.0, 0.0, 0.0])
    assert state.off_table and result.off_table


def test_pick_place_grasp_attaches_and_release_drops(workspace: WorkspaceSpec) -> None:
    goal = FixedGoal(g=(0.5, 0.5, 0.7))
    state, _ = reset("pick_place", workspace, FrictionMap(), goal, seed=0, object_start=(0.5, 0.5))
    state = replace(state, ee_pos=np.array([0.5, 0.5, workspace.rest_height + 0.01]))
    state, result = step(state, [0.0, 0.0, 0.0, -1.0])
    assert state.grasped and result.contact
    for _ in range(5):
        state, result = step(state, [0.3, -0.2, 1.0, -1.0])
        np.testing.assert_array_equal(state.obj_pos, state.ee_pos)
        assert result.contact
    state, result = step(state, [0.0, 0.0, 0.0, 1.0])
    assert not state.grasped
    assert state.obj_pos[2] == workspace.rest_height


def test_goal_at_helix_values() -> None:
    helix = HelixGoal(x_c=0.75, y_c=0.75)
    np.testing.assert_allclose(goal_at(helix, 0), [0.75, 0.9, 0.45], atol=1e-15)
    np.testing.assert_allclose(goal_at(helix, 500)[:2], goal_at(helix, 0)[:2], atol=1e-12)
    np.testing.assert_allclose(goal_at(helix, 4000 + 37), goal_at(helix, 37), atol=1e-12)


def test_goal_at_circle_step_is_chord() -> None:
    circle = CircularGoal(center=(0.9, 0.9, 0.475), radius=0.05, period=200.0)
    steps = [np.linalg.norm(goal_at(circle, t + 1) - goal_at(circle, t)) for t in range(400)]
    assert max(steps) == pytest.approx(2 * 0.05 * math.sin(math.pi / 200), rel=1e-9)
    np.testing.assert_allclose(goal_at(circle, 200), goal_at(circle, 0), atol=1e-12)


def test_friction_lookup_and_tie_break() -> None:
    friction = FrictionMap(
        patches=[
            FrictionPatch(x_lo=0.0, x_hi=0.5, y_lo=0.0, y_hi=1.0, mu=1.2),
            FrictionPatch(x_lo=0.5, x_hi=1.0, y_lo=0.0, y_hi=0.5, mu=1.5),
        ],
        default_mu=0.3,
    )
    assert friction_at(friction, (0.7, 0.2)) == 1.5
    assert friction_at(friction, (0.7, 0.8)) == 0.3
    assert friction_at(friction, (0.5, 0.2)) == 1.5
    assert friction_bound(friction, 0.004) == pytest.approx(0.006)


def test_three_patch_bands(workspace: WorkspaceSpec) -> None:
    friction = three_patch_map(workspace)
    assert [friction_at(friction, (x, 0.5)) for x in (0.1, 0.5, 0.9)] == [0.8, 1.2, 1.5]


def test_observe_is_pure(workspace: WorkspaceSpec) -> None:
    state, _ = reset("pick_place", workspace, FrictionMap(), GOAL, seed=5)
    a, g1 = observe(state, GOAL)
    b, g2 = observe(state, GOAL)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(g1, g2)
    assert a[9] == a[10] == 0.5


def test_env_rolls_deterministically() -> None:
    def rollout() -> np.ndarray:
        env = ManipulationEnv("push")
        env.reset(seed=2)
        rng = np.random.default_rng(8)
        return np.stack([env.step(rng.uniform(-1, 1, 4))[0]["observation"] for _ in range(30)])

    np.testing.assert_array_equal(rollout(), rollout())


def test_env_spaces_hold_reset_and_step_output() -> None:
    env = ManipulationEnv("push", goal=GOAL)
    assert env.action_space.shape == (ACTION_DIM,)
    obs, info = env.reset(seed=4)
    assert env.observation_space.contains(obs)
    assert set(info) == {"is_success", "contact", "d1", "d2", "off_table"}
    np.testing.assert_array_equal(obs["achieved_goal"], obs["observation"][3:6])
    np.testing.assert_array_equal(obs["desired_goal"], GOAL.g)
    assert agent_state(obs).shape == (STATE_DIM,)

    obs, reward, terminated, truncated, info = env.step(env.action_space.sample())
    assert env.observation_space.contains(obs)
    assert reward == pytest.approx(-(info["d1"] + info["d2"]) + 2.0 * info["is_success"])


def test_env_reset_options_override_object_start() -> None:
    env = ManipulationEnv("push", goal=GOAL, object_start=(0.3, 0.3))
    obs, _ = env.reset(seed=0)
    np.testing.assert_allclose(obs["achieved_goal"][:2], [0.3, 0.3])
    obs, _ = env.reset(seed=0, options={"object_start": (0.6, 0.4)})
    np.testing.assert_allclose(obs["achieved_goal"][:2], [0.6, 0.4])


def test_env_terminates_on_fixed_goal_success() -> None:
    env = ManipulationEnv("push", goal=FixedGoal(g=(0.5, 0.5, 0.475)), object_start=(0.5, 0.5))
    env.reset(seed=0)
    _, _, terminated, truncated, info = env.step(np.zeros(ACTION_DIM))
    assert terminated and not truncated and info["is_success"]


def test_env_truncates_at_horizon() -> None:
    env = ManipulationEnv("push", goal=GOAL, object_start=(0.2, 0.2), horizon=3)
    env.reset(seed=0)
    flags = [env.step(np.zeros(ACTION_DIM))[2:4] for _ in range(3)]
    assert flags == [(False, False), (False, False), (False, True)]


def test_env_step_before_reset_fails() -> None:
    with pytest.raises(RuntimeError):
        ManipulationEnv("push").step(np.zeros(ACTION_DIM))
