from __future__ import annotations

import asyncio
import json
from pathlib import Path

import pandas as pd
import pytest

from app.core.errors import ConfigError
from app.schemas.experiment import ExperimentConfig, FixedGoal
from app.services.experiment_service import ExperimentService, aggregate_rows

TINY = {
    "agent": {"hidden_dims": [8, 8], "buffer_size": 200, "batch_size": 4, "warmup": 5},
    "epochs": 1,
    "episodes_per_epoch": 2,
    "horizon": 10,
    "seeds": [0, 1],
}


def tiny_config(**updates: object) -> ExperimentConfig:
    return ExperimentConfig.from_mapping({**TINY, **updates})


def trained(tmp_path: Path, name: str = "train") -> ExperimentService:
    service = ExperimentService(tiny_config(), output_dir=tmp_path / name)
    service.train()
    return service


def test_train_writes_manifested_artifacts(tmp_path: Path) -> None:
    service = trained(tmp_path)
    manifest = json.loads((service.root / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert set(manifest["artifacts"]) == {"checkpoint.json", "config.json", "curve.jsonl"}
    assert all((service.root / a).exists() for a in manifest["artifacts"])
    lines = (service.root / "curve.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["epoch"] == 0


def test_zero_epochs_gives_empty_curve(tmp_path: Path) -> None:
    service = ExperimentService(tiny_config(epochs=0), output_dir=tmp_path)
    agent, curve = service.train()
    assert curve == []
    assert (service.root / "curve.jsonl").read_text() == ""
    assert agent.actor_opt.step == 0


def test_training_is_reproducible(tmp_path: Path) -> None:
    a = trained(tmp_path, "a")
    b = trained(tmp_path, "b")
    for name in ("curve.jsonl", "checkpoint.json"):
        assert (a.root / name).read_bytes() == (b.root / name).read_bytes()


def test_evaluate_counts(tmp_path: Path) -> None:
    service = trained(tmp_path)
    metrics = service.evaluate(service.root / "checkpoint.json", 3)
    assert metrics.n_episodes == 3
    assert 0 <= metrics.successes <= 3
    assert metrics.success_rate == metrics.successes / 3

    empty = service.evaluate(service.root / "checkpoint.json", 0)
    assert empty.n_episodes == 0 and empty.success_rate is None


def test_scenario_rows_and_aggregates(tmp_path: Path) -> None:
    checkpoint = trained(tmp_path).root / "checkpoint.json"
    modes = ["rl_only", "hybrid"]

    def run(out: str):
        service = ExperimentService(tiny_config(), output_dir=tmp_path / out)
        report = asyncio.run(service.run_scenario("push_friction_fixed", checkpoint, modes, [0, 1]))
        return service, report

    service, report = run("s1")
    assert [(r.mode, r.seed) for r in report.rows] == [
        ("rl_only", 0),
        ("rl_only", 1),
        ("hybrid", 0),
        ("hybrid", 1),
    ]
    assert report.aggregates == aggregate_rows(report.rows, modes)
    table = pd.read_csv(service.root / "summary.csv")
    assert len(table) == 4
    frame = pd.read_csv(service.root / "trajectories/push_friction_fixed_hybrid_seed1.csv")
    assert len(frame) <= 10

    again, _ = run("s2")
    for name in ("summary.csv", "trajectories/push_friction_fixed_rl_only_seed0.csv"):
        assert (service.root / name).read_bytes() == (again.root / name).read_bytes()


def test_aggregate_skips_absent_modes(tmp_path: Path) -> None:
    assert aggregate_rows([], ["hybrid"]) == []


def test_es_verify_writes_sweep(tmp_path: Path) -> None:
    service = ExperimentService(tiny_config(), output_dir=tmp_path)
    rows = service.es_verify([25.0, 50.0], dim=1, horizon=1.0)
    assert [r.omega for r in rows] == [25.0, 50.0]
    assert (tmp_path / "averaging/omega_25.csv").exists()
    table = pd.read_csv(tmp_path / "averaging.csv")
    assert table["gap"].tolist() == pytest.approx([r.gap for r in rows])


def test_es_verify_requires_ascending_sweep(tmp_path: Path) -> None:
    service = ExperimentService(tiny_config(), output_dir=tmp_path)
    with pytest.raises(ValueError):
        service.es_verify([50.0, 25.0])


def test_paper_scale_swaps_buffer_size(tmp_path: Path) -> None:
    service = ExperimentService(tiny_config(), output_dir=tmp_path, paper_scale=True)
    assert service.config.agent.buffer_size == 1_000_000


def test_train_rejects_bad_goal_before_writing(tmp_path: Path) -> None:
    # model_copy skips validation, as a config assembled in code might
    config = tiny_config().model_copy(update={"goal": FixedGoal(g=(1.5, 0.5, 0.475))})
    service = ExperimentService(config, output_dir=tmp_path)
    with pytest.raises(ConfigError):
        service.train()
    assert not (tmp_path / "curve.jsonl").exists()
