import asyncio
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from app.core.config import get_settings
from app.core.errors import DivergenceError
from app.schemas.experiment import ExperimentConfig, Mode
from app.schemas.results import (
    AveragingRow,
    CurveRecord,
    EvalMetrics,
    ModeAggregate,
    ScenarioReport,
    ScenarioRow,
)
from app.services.checkpoint_io import load_agent, save_agent, save_config
from app.services.ddpg import DdpgAgent, Policy, ReplayBuffer, train
from app.services.es_control import DEFAULT_SWEEP, quadratic_benchmark
from app.services.manip_sim import ManipulationEnv
from app.services.scenarios import Scenario, build_scenario
from app.services.supervisor import LEFT_WORKSPACE, run_episode
from app.utils.artifacts import ArtifactWriter

settings = get_settings()

ALL_MODES: Tuple[Mode, ...] = ("rl_only", "es_only", "hybrid")
CURVE_FILE = "curve.jsonl"
CHECKPOINT_FILE = "checkpoint.json"


class ExperimentService:
    """Runs the train / eval / scenario / es-verify workflows for one config."""

    def __init__(
        self,
        config: ExperimentConfig,
        output_dir: Union[str, Path, None] = None,
        paper_scale: bool = False,
    ):
        if paper_scale:
            agent = config.agent.model_copy(
                update={"buffer_size": settings.paper_replay_capacity}
            )
            config = config.model_copy(update={"agent": agent})
        self.config = config
        self.writer = ArtifactWriter(output_dir or config.output_dir)

    @property
    def root(self) -> Path:
        return self.writer.root

    def _training_env(self) -> ManipulationEnv:
        cfg = self.config
        return ManipulationEnv(
            task=cfg.task,
            workspace=cfg.workspace,
            friction=cfg.friction,
            goal=cfg.goal,
            object_start=cfg.object_start,
            horizon=cfg.episode_horizon,
        )

    def train(self) -> Tuple[DdpgAgent, List[CurveRecord]]:
        cfg = self.config
        env = self._training_env()
        agent = DdpgAgent(cfg.agent, seed=cfg.seed)
        buffer = ReplayBuffer(cfg.agent.buffer_size, cfg.agent.state_dim, cfg.agent.action_dim)
        self.writer.start_jsonl(CURVE_FILE)
        logger.info(
            f"Training {cfg.task} agent: {cfg.epochs} epochs x "
            f"{cfg.episodes_per_epoch} episodes, seed {cfg.seed}"
        )
        try:
            curve = train(
                env,
                agent,
                cfg.epochs,
                cfg.episodes_per_epoch,
                buffer=buffer,
                horizon=cfg.episode_horizon,
                on_epoch=lambda record: self.writer.append_jsonl(CURVE_FILE, record),
            )
        except DivergenceError as e:
            logger.error(f"Training diverged: {str(e)}")
            raise

        save_agent(agent, self.writer.path_for(CHECKPOINT_FILE))
        save_config(cfg, self.writer.path_for("config.json"))
        final = curve[-1].smoothed_success_rate if curve else None
        self.writer.write_manifest(
            "train",
            cfg.config_hash(),
            [cfg.seed],
            {"epochs": len(curve), "final_smoothed_success_rate": final},
        )
        return agent, curve

    def evaluate(
        self, checkpoint: Union[str, Path], n_episodes: int, mode: Mode = "rl_only"
    ) -> EvalMetrics:
        """Noise-free episodes on the training distribution, seeds ``seed .. seed + n - 1``."""
        cfg = self.config
        agent = load_agent(checkpoint, expected=cfg.agent)
        actor = agent.policy()
        env = self._training_env()

        summaries = [
            run_episode(
                env,
                actor,
                cfg.es,
                mode,
                cfg.episode_horizon,
                seed=cfg.seed + i,
                tracking_threshold=cfg.tracking_threshold,
            ).summary()
            for i in range(n_episodes)
        ]
        successes = sum(s.success for s in summaries)
        metrics = EvalMetrics(n_episodes=n_episodes, successes=successes)
        if summaries:
            metrics = EvalMetrics(
                n_episodes=n_episodes,
                successes=successes,
                success_rate=successes / n_episodes,
                mean_final_d2=float(np.mean([s.final_d2 for s in summaries])),
                mean_tracking_error=float(np.mean([s.mean_tracking_error for s in summaries])),
            )
        logger.info(f"Evaluated {n_episodes} episodes: {successes} successes")
        self.writer.write_json("metrics.json", metrics)
        self.writer.write_manifest(
            "eval",
            cfg.config_hash(),
            [cfg.seed + i for i in range(n_episodes)],
            metrics.model_dump(mode="json"),
        )
        return metrics

    def _scenario_episode(
        self, scenario: Scenario, actor: Optional[Policy], mode: Mode, seed: int
    ) -> Tuple[ScenarioRow, pd.DataFrame]:
        cfg = self.config
        env = scenario.env(cfg.workspace)
        log = run_episode(
            env,
            actor,
            cfg.es,
            mode,
            cfg.horizon or scenario.horizon,
            seed=seed,
            object_start=scenario.start_for_seed(seed),
            tracking_threshold=cfg.tracking_threshold,
        )
        summary = log.summary()
        logger.info(
            f"{scenario.name} {mode} seed {seed}: success={summary.success} "
            f"final d2 {summary.final_d2:.4f}, switch at {summary.switch_step}"
        )
        row = ScenarioRow(scenario=scenario.name, mode=mode, seed=seed, **summary.model_dump())
        return row, log.to_frame()

    async def run_scenario(
        self,
        name: str,
        checkpoint: Union[str, Path],
        modes: Sequence[Mode] = ALL_MODES,
        seeds: Optional[Sequence[int]] = None,
    ) -> ScenarioReport:
        """Run every (mode, seed) pair concurrently; aggregation follows the request order."""
        cfg = self.config
        scenario = build_scenario(name, cfg.workspace)
        agent = load_agent(checkpoint, expected=cfg.agent)
        seeds = list(cfg.seeds if seeds is None else seeds)
        pairs = [(mode, seed) for mode in modes for seed in seeds]

        loop = asyncio.get_running_loop()
        futures = [
            loop.run_in_executor(
                None, self._scenario_episode, scenario, agent.policy(), mode, seed
            )
            for mode, seed in pairs
        ]
        results = await asyncio.gather(*futures)

        rows = []
        for (mode, seed), (row, frame) in zip(pairs, results):
            await self.writer.write_csv_async(f"trajectories/{name}_{mode}_seed{seed}.csv", frame)
            rows.append(row)

        table = pd.DataFrame([r.model_dump() for r in rows])
        await self.writer.write_csv_async("summary.csv", table)
        report = ScenarioReport(scenario=name, rows=rows, aggregates=aggregate_rows(rows, modes))
        self.writer.write_json("summary.json", report)
        self.writer.write_manifest(
            "scenario",
            cfg.config_hash(),
            seeds,
            {a.mode: a.model_dump(mode="json") for a in report.aggregates},
        )
        return report

    def es_verify(
        self, omegas: Sequence[float] = DEFAULT_SWEEP, dim: int = 2, horizon: float = 5.0
    ) -> List[AveragingRow]:
        omegas = list(omegas)
        if any(b <= a for a, b in zip(omegas, omegas[1:])):
            raise ValueError("omega sweep must be strictly ascending")
        rows = []
        for omega in omegas:
            result = quadratic_benchmark(omega, dim=dim, horizon=horizon)
            self.writer.write_csv(f"averaging/omega_{omega:g}.csv", result.to_frame())
            rows.append(AveragingRow(omega=omega, gap=result.gap))
        self.writer.write_csv("averaging.csv", pd.DataFrame([r.model_dump() for r in rows]))
        self.writer.write_manifest(
            "es-verify",
            self.config.config_hash(),
            [],
            {f"{r.omega:g}": r.gap for r in rows},
        )
        return rows


def aggregate_rows(rows: Sequence[ScenarioRow], modes: Sequence[str]) -> List[ModeAggregate]:
    """Per-mode means recomputed from the raw rows."""
    aggregates = []
    frame = pd.DataFrame([r.model_dump() for r in rows])
    for mode in modes:
        subset = frame[frame["mode"] == mode] if not frame.empty else frame
        if subset.empty:
            continue
        aggregates.append(
            ModeAggregate(
                mode=mode,
                runs=len(subset),
                success_rate=float(subset["success"].mean()),
                mean_tracking_error=float(subset["mean_tracking_error"].mean()),
                mean_final_d2=float(subset["final_d2"].mean()),
                left_workspace=int((subset["failure_reason"] == LEFT_WORKSPACE).sum()),
            )
        )
    return aggregates


def mode_summary(report: ScenarioReport) -> Dict[str, ModeAggregate]:
    return {a.mode: a for a in report.aggregates}
