from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class CurveRecord(BaseModel):
    epoch: int
    success_rate: float
    smoothed_success_rate: float
    mean_return: float


class EpisodeSummary(BaseModel):
    success: bool
    final_d2: float
    mean_tracking_error: float
    final_window_error: float
    switch_step: Optional[int] = None
    failure_reason: Optional[str] = None
    steps: int


class EvalMetrics(BaseModel):
    n_episodes: int
    successes: int
    success_rate: Optional[float] = None
    mean_final_d2: Optional[float] = None
    mean_tracking_error: Optional[float] = None


class ScenarioRow(BaseModel):
    scenario: str
    mode: str
    seed: int
    success: bool
    final_d2: float
    mean_tracking_error: float
    final_window_error: float
    switch_step: Optional[int] = None
    failure_reason: Optional[str] = None
    steps: int


class ModeAggregate(BaseModel):
    mode: str
    runs: int
    success_rate: float
    mean_tracking_error: float
    mean_final_d2: float
    left_workspace: int


class ScenarioReport(BaseModel):
    scenario: str
    rows: List[ScenarioRow]
    aggregates: List[ModeAggregate]


class AveragingRow(BaseModel):
    omega: float
    gap: float


class RunManifest(BaseModel):
    command: str
    config_hash: str
    seeds: List[int] = Field(default_factory=list)
    artifacts: List[str] = Field(default_factory=list)
    summaries: Dict[str, Any] = Field(default_factory=dict)
    tool_version: str

    def missing_artifacts(self, root: Path) -> List[str]:
        return [a for a in self.artifacts if not (root / a).exists()]
