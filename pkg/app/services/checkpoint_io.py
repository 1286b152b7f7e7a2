"""JSON persistence for agents and experiment configs.

Floats are written through ``json`` which uses Python's shortest round-trip
repr, so every float64 parameter is restored bit for bit.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from app.core.config import get_settings
from app.core.errors import (
    ArchitectureMismatchError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
)
from app.schemas.experiment import AgentHyperparams, ExperimentConfig
from app.services.ddpg import DdpgAgent
from app.services.tensor_core import MlpParams, MlpSpec, OptimizerState

settings = get_settings()

PathLike = Union[str, Path]
NETWORKS = ("actor", "critic", "target_actor", "target_critic")
OPTIMIZERS = ("actor", "critic")


def _tensor_records(tensors: Dict[str, np.ndarray]) -> list:
    return [
        {"name": name, "shape": list(t.shape), "data": t.ravel().tolist()}
        for name, t in tensors.items()
    ]


def _tensors_from_records(records: list) -> Dict[str, np.ndarray]:
    tensors = {}
    for record in records:
        data = np.array(record["data"], dtype=np.float64)
        shape = tuple(int(d) for d in record["shape"])
        if data.size != int(np.prod(shape)):
            raise CheckpointFormatError(
                f"tensor {record['name']} holds {data.size} values for shape {shape}"
            )
        tensors[record["name"]] = data.reshape(shape)
    return tensors


def _network_payload(params: MlpParams) -> dict:
    return {
        "spec": params.spec.to_dict(),
        "epsilons": [n.epsilon for n in params.norms],
        "tensors": _tensor_records(params.named_tensors()),
    }


def _optimizer_payload(state: OptimizerState) -> dict:
    return {
        "step": state.step,
        "learning_rate": state.learning_rate,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "epsilon": state.epsilon,
        "first_moment": _tensor_records(state.first_moment),
        "second_moment": _tensor_records(state.second_moment),
    }


def agent_to_payload(agent: DdpgAgent) -> dict:
    return {
        "format": settings.checkpoint_format,
        "version": settings.checkpoint_version,
        "hyperparameters": agent.hyper.model_dump(mode="json"),
        "networks": {
            "actor": _network_payload(agent.actor),
            "critic": _network_payload(agent.critic),
            "target_actor": _network_payload(agent.target_actor),
            "target_critic": _network_payload(agent.target_critic),
        },
        "optimizers": {
            "actor": _optimizer_payload(agent.actor_opt),
            "critic": _optimizer_payload(agent.critic_opt),
        },
    }


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_agent(agent: DdpgAgent, path: PathLike) -> Path:
    path = Path(path)
    _write_atomic(path, json.dumps(agent_to_payload(agent), indent=1))
    logger.info(f"Saved checkpoint to {path}")
    return path


def read_checkpoint(path: PathLike) -> Dict[str, Any]:
    """Parse and validate the envelope of a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"checkpoint {path} is corrupt or truncated: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != settings.checkpoint_format:
        raise CheckpointFormatError(f"{path} is not an {settings.checkpoint_format} file")
    version = payload.get("version")
    if version != settings.checkpoint_version:
        raise CheckpointVersionError(
            f"checkpoint {path} has version {version}, this build reads version "
            f"{settings.checkpoint_version}; re-export it with a matching release "
            f"or retrain with `esdrl train`"
        )
    for key in ("hyperparameters", "networks", "optimizers"):
        if key not in payload:
            raise CheckpointFormatError(f"checkpoint {path} is missing '{key}'")
    return payload


def _network_from_payload(data: dict) -> MlpParams:
    spec = MlpSpec.from_dict(data["spec"])
    return MlpParams.from_named(spec, _tensors_from_records(data["tensors"]), data.get("epsilons"))


def _optimizer_from_payload(data: dict) -> OptimizerState:
    return OptimizerState(
        learning_rate=float(data["learning_rate"]),
        first_moment=_tensors_from_records(data["first_moment"]),
        second_moment=_tensors_from_records(data["second_moment"]),
        step=int(data["step"]),
        beta1=float(data["beta1"]),
        beta2=float(data["beta2"]),
        epsilon=float(data["epsilon"]),
    )


def load_agent(
    path: PathLike, expected: Optional[AgentHyperparams] = None, seed: int = 0
) -> DdpgAgent:
    """Rebuild an agent; ``expected`` rejects checkpoints of another architecture."""
    payload = read_checkpoint(path)
    try:
        hyper = AgentHyperparams.model_validate(payload["hyperparameters"])
        networks = {name: _network_from_payload(payload["networks"][name]) for name in NETWORKS}
        optimizers = {
            name: _optimizer_from_payload(payload["optimizers"][name]) for name in OPTIMIZERS
        }
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise CheckpointFormatError(f"checkpoint {path} has a malformed body: {e}") from e

    if expected is not None:
        stored = (hyper.state_dim, hyper.action_dim, tuple(hyper.hidden_dims))
        wanted = (expected.state_dim, expected.action_dim, tuple(expected.hidden_dims))
        if stored != wanted:
            raise ArchitectureMismatchError(
                f"checkpoint architecture (state, action, hidden) = {stored} "
                f"does not match the config's {wanted}"
            )
    try:
        return DdpgAgent.from_components(
            hyper,
            networks["actor"],
            networks["critic"],
            networks["target_actor"],
            networks["target_critic"],
            optimizers["actor"],
            optimizers["critic"],
            seed=seed,
        )
    except ValueError as e:
        raise ArchitectureMismatchError(f"checkpoint {path}: {e}") from e


def inspect_checkpoint(path: PathLike) -> Dict[str, Any]:
    payload = read_checkpoint(path)
    networks = {}
    for name in NETWORKS:
        data = payload["networks"][name]
        networks[name] = {
            "spec": data["spec"],
            "parameters": int(sum(np.prod(t["shape"]) for t in data["tensors"])),
        }
    return {
        "format": payload["format"],
        "version": payload["version"],
        "hyperparameters": payload["hyperparameters"],
        "networks": networks,
        "optimizer_steps": {name: payload["optimizers"][name]["step"] for name in OPTIMIZERS},
    }


def save_config(config: ExperimentConfig, path: PathLike) -> Path:
    path = Path(path)
    _write_atomic(path, json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
    return path


def load_config(path: PathLike) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_file(path)
    except ConfigError:
        logger.error(f"Could not load config from {path}")
        raise
