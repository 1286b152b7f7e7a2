import argparse
import asyncio
import json
from typing import List, Optional, Sequence

from loguru import logger

from app.core.config import get_settings
from app.core.errors import CheckpointError, ConfigError, DivergenceError, EsDrlError
from app.core.logger import configure_logging
from app.schemas.experiment import ExperimentConfig
from app.services.checkpoint_io import inspect_checkpoint
from app.services.es_control import DEFAULT_SWEEP
from app.services.experiment_service import ALL_MODES, ExperimentService

settings = get_settings()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CHECKPOINT = 4


def parse_seeds(text: str) -> List[int]:
    """Accepts ``0,3,5`` or an inclusive range ``0-19``."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def parse_floats(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def load_config(args: argparse.Namespace, **overrides: object) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    updates = {key: value for key, value in overrides.items() if value is not None}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        config = ExperimentConfig.from_mapping({**config.model_dump(mode="json"), **updates})
    return config


def _service(args: argparse.Namespace, config: ExperimentConfig) -> ExperimentService:
    return ExperimentService(config, paper_scale=args.paper_scale)


def _emit(data: object) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(
        args,
        task=args.task,
        epochs=args.epochs,
        episodes_per_epoch=args.episodes_per_epoch,
    )
    service = _service(args, config)
    _, curve = service.train()
    for record in curve:
        print(f"epoch {record.epoch}: smoothed success {record.smoothed_success_rate:.3f}")
    logger.info(f"Training artifacts written to {service.root}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args, mode=args.mode)
    episodes = args.episodes if args.episodes is not None else settings.eval_seed_count
    metrics = _service(args, config).evaluate(args.checkpoint, episodes, mode=config.mode)
    _emit(metrics.model_dump(mode="json"))
    return EXIT_OK


def cmd_scenario(args: argparse.Namespace) -> int:
    config = load_config(args, scenario=args.name)
    if config.scenario is None:
        raise ConfigError("no scenario given", ["scenario: pass a name or set it in the config"])
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = [m for m in modes if m not in ALL_MODES]
    if unknown:
        issues = [f"modes: {m!r} is not one of {ALL_MODES}" for m in unknown]
        raise ConfigError("unknown modes", issues)
    seeds = parse_seeds(args.seeds) if args.seeds else None
    service = _service(args, config)
    report = asyncio.run(service.run_scenario(config.scenario, args.checkpoint, modes, seeds))
    _emit([a.model_dump(mode="json") for a in report.aggregates])
    return EXIT_OK


def cmd_es_verify(args: argparse.Namespace) -> int:
    config = load_config(args)
    omegas = parse_floats(args.omegas) if args.omegas else list(DEFAULT_SWEEP)
    rows = _service(args, config).es_verify(omegas, dim=args.dim, horizon=args.horizon)
    _emit([r.model_dump(mode="json") for r in rows])
    return EXIT_OK


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    _emit(inspect_checkpoint(args.path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esdrl",
        description="Hybrid DDPG + bounded extremum seeking for desk-scale manipulation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  esdrl --seed 0 --out runs/push train --task push
  esdrl --out runs/eval eval --checkpoint runs/push/checkpoint.json --episodes 20
  esdrl --out runs/ood scenario push_friction_fixed --checkpoint runs/push/checkpoint.json
  esdrl --out runs/avg es-verify --omegas 25,50,100,200
  esdrl inspect-checkpoint runs/push/checkpoint.json
""",
    )
    parser.add_argument("--config", default=None, help="Experiment config (TOML or JSON)")
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument(
        "--paper-scale",
        "--full-scale",
        dest="paper_scale",
        action="store_true",
        help="Use the 10^6 replay buffer instead of the desk-scale one",
    )
    parser.add_argument("--log-level", default=settings.log_level, help="loguru level")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_train = sub.add_parser("train", help="Train a DDPG agent on the nominal task")
    p_train.add_argument("--task", choices=["push", "pick_place"], default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--episodes-per-epoch", type=int, default=None)

    p_eval = sub.add_parser("eval", help="Noise-free evaluation of a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument(
        "--mode", choices=list(ALL_MODES), default=None, help="defaults to the config mode"
    )

    p_scn = sub.add_parser("scenario", help="Compare controllers on an OOD scenario")
    p_scn.add_argument(
        "name",
        nargs="?",
        default=None,
        help="push_friction_fixed, push_friction_moving or pp_track3d; "
        "defaults to the config scenario",
    )
    p_scn.add_argument("--checkpoint", required=True)
    p_scn.add_argument("--modes", default=",".join(ALL_MODES))
    p_scn.add_argument("--seeds", default=None, help="e.g. 0-19 or 0,1,2")

    p_avg = sub.add_parser("es-verify", help="ES versus averaged-flow gap sweep")
    p_avg.add_argument("--omegas", default=None, help="ascending, comma-separated")
    p_avg.add_argument("--dim", type=int, choices=[1, 2], default=2)
    p_avg.add_argument("--horizon", type=float, default=5.0)

    p_inspect = sub.add_parser("inspect-checkpoint", help="Print checkpoint metadata")
    p_inspect.add_argument("path")
    return parser


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "scenario": cmd_scenario,
    "es-verify": cmd_es_verify,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return HANDLERS[args.cmd](args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        return EXIT_CONFIG
    except DivergenceError as e:
        logger.error(f"Training diverged: {str(e)}")
        return EXIT_DIVERGENCE
    except CheckpointError as e:
        logger.error(f"Checkpoint error: {str(e)}")
        return EXIT_CHECKPOINT
    except (EsDrlError, ValueError) as e:
        logger.error(f"{args.cmd} failed: {str(e)}")
        return EXIT_FAILURE
