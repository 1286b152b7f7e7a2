import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from app.core.config import get_settings
from app.core.errors import ConfigError

settings = get_settings()

Vec2 = Tuple[float, float]
Vec3 = Tuple[float, float, float]
Task = Literal["push", "pick_place"]
Mode = Literal["rl_only", "es_only", "hybrid"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorkspaceSpec(StrictModel):
    """Table geometry and kinematic limits; lengths in metres, time in steps."""

    x_max: float = Field(default=1.0, gt=0)
    y_max: float = Field(default=1.0, gt=0)
    table_height: float = Field(default=0.45, gt=0)
    block_half_extent: float = Field(default=0.025, gt=0)
    ee_step_scale: float = Field(default=0.03, gt=0)
    horizon: int = Field(default_factory=lambda: settings.train_horizon, gt=0)
    contact_tol: float = Field(default=0.01, gt=0)
    grasp_radius: float = Field(default=0.03, gt=0)
    gripper_rate: float = Field(default=0.25, gt=0)
    home_clearance: float = Field(default=0.05, gt=0)
    # vertical reach of the end effector; carried objects follow it below z0
    z_min: float = Field(default=0.2, gt=0)
    z_max: float = Field(default=1.1, gt=0)
    stiction_scale: float = Field(default_factory=lambda: settings.stiction_scale, gt=0)
    success_threshold: float = Field(default=0.05, gt=0)

    @model_validator(mode="after")
    def _block_fits(self) -> "WorkspaceSpec":
        side = 2.0 * self.block_half_extent
        if side >= self.x_max or side >= self.y_max:
            raise ValueError("block does not fit inside the table")
        if not self.z_min < self.rest_height < self.z_max:
            raise ValueError("object rest height must lie inside [z_min, z_max]")
        if self.rest_height + self.home_clearance > self.z_max:
            raise ValueError("home pose lies above z_max")
        return self

    @property
    def rest_height(self) -> float:
        """Height of the block centre when it sits on the table."""
        return self.table_height + self.block_half_extent


class FrictionPatch(StrictModel):
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    mu: float = Field(gt=0)

    @model_validator(mode="after")
    def _ordered(self) -> "FrictionPatch":
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError("patch bounds must satisfy lo < hi")
        return self


class FrictionMap(StrictModel):
    """Axis-aligned patches; later patches shadow earlier ones."""

    patches: List[FrictionPatch] = Field(default_factory=list)
    default_mu: float = Field(default_factory=lambda: settings.nominal_friction, gt=0)


class FixedGoal(StrictModel):
    variant: Literal["fixed"] = "fixed"
    g: Vec3


class CircularGoal(StrictModel):
    variant: Literal["circular_planar"] = "circular_planar"
    center: Vec3
    radius: float = Field(default=0.05, gt=0)
    period: float = Field(default=200.0, gt=0)


class HelixGoal(StrictModel):
    variant: Literal["helix_3d"] = "helix_3d"
    x_c: float
    y_c: float
    r: float = Field(default=0.15, gt=0)
    T_xy: float = Field(default=500.0, gt=0)
    z0: float = 0.45
    A_z: float = 0.20
    T_z: float = Field(default=4000.0, gt=0)


GoalSpec = Annotated[
    Union[FixedGoal, CircularGoal, HelixGoal], Field(discriminator="variant")
]


def goal_issues(goal: GoalSpec, workspace: WorkspaceSpec) -> List[str]:
    """``path: message`` for every axis along which the goal trajectory leaves the box."""
    if isinstance(goal, FixedGoal):
        lo = hi = goal.g
        paths = ("goal.g",) * 3
    elif isinstance(goal, CircularGoal):
        cx, cy, cz = goal.center
        lo = (cx - goal.radius, cy - goal.radius, cz)
        hi = (cx + goal.radius, cy + goal.radius, cz)
        paths = ("goal.center",) * 3
    else:
        lo = (goal.x_c - goal.r, goal.y_c - goal.r, goal.z0 - abs(goal.A_z))
        hi = (goal.x_c + goal.r, goal.y_c + goal.r, goal.z0 + abs(goal.A_z))
        paths = ("goal.x_c", "goal.y_c", "goal.z0")

    limits = (
        (0.0, workspace.x_max),
        (0.0, workspace.y_max),
        (workspace.z_min, workspace.z_max),
    )
    issues = []
    for axis, path, a, b, (low, high) in zip("xyz", paths, lo, hi, limits):
        if a < low or b > high:
            issues.append(
                f"{path}: {axis} spans [{a:.4g}, {b:.4g}] outside [{low:g}, {high:g}]"
            )
    return issues


class EsParams(StrictModel):
    """Bounded extremum-seeking gains; ``omega`` in rad per unit of ES time."""

    alpha: float = Field(default=0.8, gt=0)
    k: float = Field(default=8.0, gt=0)
    omega: float = Field(default=5.0, gt=0)
    dt: float = Field(default=0.1, gt=0)
    ratios: Tuple[float, ...] = (1.00, 1.75, 2.90)

    @field_validator("ratios")
    @classmethod
    def _distinct_ratios(cls, ratios: Tuple[float, ...]) -> Tuple[float, ...]:
        if not ratios:
            raise ValueError("at least one frequency ratio is required")
        if any(r <= 0 for r in ratios):
            raise ValueError("frequency ratios must be positive")
        ordered = sorted(ratios)
        if any(b <= a for a, b in zip(ordered, ordered[1:])):
            raise ValueError("frequency ratios must be pairwise distinct")
        return ratios

    @property
    def frequencies(self) -> Tuple[float, ...]:
        return tuple(r * self.omega for r in self.ratios)


class AgentHyperparams(StrictModel):
    state_dim: int = Field(default=28, ge=1)
    action_dim: int = Field(default=4, ge=1)
    hidden_dims: Tuple[int, ...] = (256, 256)
    gamma: float = Field(default=0.99, ge=0, lt=1)
    tau: float = Field(default=0.005, gt=0, lt=1)
    actor_lr: float = Field(default=1e-4, gt=0)
    critic_lr: float = Field(default=1e-4, gt=0)
    buffer_size: int = Field(default_factory=lambda: settings.replay_capacity, ge=1)
    batch_size: int = Field(default=256, ge=1)
    noise_std: float = Field(default=0.1, ge=0)
    warmup: int = Field(default_factory=lambda: settings.warmup_transitions, ge=0)

    @field_validator("hidden_dims")
    @classmethod
    def _positive_widths(cls, dims: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(d < 1 for d in dims):
            raise ValueError("hidden widths must be >= 1")
        return dims


class ExperimentConfig(StrictModel):
    task: Task = "push"
    workspace: WorkspaceSpec = Field(default_factory=WorkspaceSpec)
    friction: FrictionMap = Field(default_factory=FrictionMap)
    # None means a randomized fixed goal per episode (training distribution)
    goal: Optional[GoalSpec] = None
    object_start: Optional[Vec2] = None
    agent: AgentHyperparams = Field(default_factory=AgentHyperparams)
    es: EsParams = Field(default_factory=EsParams)
    # defaults for `eval --mode` and the `scenario` name; the CLI overrides both
    mode: Mode = "rl_only"
    seed: int = Field(default=0, ge=0)
    seeds: List[int] = Field(
        default_factory=lambda: list(range(settings.eval_seed_count))
    )
    horizon: Optional[int] = Field(default=None, gt=0)
    epochs: int = Field(default_factory=lambda: settings.epochs, ge=0)
    episodes_per_epoch: int = Field(
        default_factory=lambda: settings.episodes_per_epoch, ge=1
    )
    tracking_threshold: float = Field(default=0.1, gt=0)
    output_dir: str = Field(default_factory=lambda: settings.output_dir)
    scenario: Optional[str] = None

    @field_validator("seeds")
    @classmethod
    def _non_negative_seeds(cls, seeds: List[int]) -> List[int]:
        if any(s < 0 for s in seeds):
            raise ValueError("seeds must be non-negative")
        return seeds

    @model_validator(mode="after")
    def _fits_workspace(self) -> "ExperimentConfig":
        ws = self.workspace
        issues = []
        for i, patch in enumerate(self.friction.patches):
            if patch.x_lo < 0 or patch.y_lo < 0 or patch.x_hi > ws.x_max or patch.y_hi > ws.y_max:
                issues.append(f"friction.patches.{i}: patch extends beyond the table")
        if self.object_start is not None:
            x, y = self.object_start
            if not (0.0 <= x <= ws.x_max and 0.0 <= y <= ws.y_max):
                issues.append(f"object_start: ({x:g}, {y:g}) lies outside the table")
        if self.goal is not None:
            issues.extend(goal_issues(self.goal, ws))
        if issues:
            raise ConfigError("config does not fit the workspace", issues)
        return self

    @property
    def episode_horizon(self) -> int:
        return self.horizon if self.horizon is not None else self.workspace.horizon

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump; independent of key order."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError("invalid experiment config", validation_issues(e)) from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = path.read_bytes()
        try:
            if path.suffix.lower() == ".toml":
                data = tomllib.loads(raw.decode("utf-8"))
            else:
                data = json.loads(raw)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot parse config file {path}", [str(e)]) from e
        return cls.from_mapping(data)


def validation_issues(error: ValidationError) -> List[str]:
    """Flatten a pydantic error into ``dotted.path: message`` strings.

    Cross-field validators raise ``ConfigError`` with issues that already
    carry their own paths; those are passed through one by one.
    """
    issues = []
    for item in error.errors():
        cause = item.get("ctx", {}).get("error")
        if isinstance(cause, ConfigError) and cause.issues:
            issues.extend(cause.issues)
            continue
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        issues.append(f"{path}: {item['msg']}")
    return issues
