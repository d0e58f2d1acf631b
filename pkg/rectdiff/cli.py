"""
Command-line entry point: ``python -m rectdiff <command> <config> [options]``.
"""
import argparse
import json
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

from . import experiments
from .config import ExperimentConfig, load_config, load_environment, snapshot
from .errors import ConfigError, MissingCheckpointError, RectDiffError
from .registry import get_session
from .run_manager import finish_run, get_or_create_run, get_run_summary, save_metric_batch

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_CODES = {ConfigError: 2, MissingCheckpointError: 3}


def _sweep(cfg: ExperimentConfig, args) -> experiments.RunOutcome:
    if args.kind == "lambda":
        return experiments.run_lambda_sweep(cfg)
    return experiments.run_step_sweep(cfg)


COMMANDS: Dict[str, Callable[[ExperimentConfig, argparse.Namespace], experiments.RunOutcome]] = {
    "gen-data": lambda cfg, args: experiments.generate_data(cfg),
    "pretrain": lambda cfg, args: experiments.run_pretrain(cfg),
    "train-recon": lambda cfg, args: experiments.run_train_recon(cfg),
    "train-edit": lambda cfg, args: experiments.run_train_edit(cfg, args.strategy),
    "sample": lambda cfg, args: experiments.run_sample(cfg, args.rectifier, args.unconditional, args.count),
    "invert": lambda cfg, args: experiments.run_invert(cfg, args.rectifier),
    "sweep": _sweep,
    "ablate": lambda cfg, args: experiments.run_loss_ablation(cfg),
    "eval": lambda cfg, args: experiments.run_eval(cfg),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rectdiff",
                                     description="Rectifier-modulated diffusion reconstruction and editing")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="experiment config file (KEY=VALUE lines)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
        return p

    command("gen-data", "generate the train, edit and held-out disc datasets")
    command("pretrain", "pretrain the denoiser")
    command("train-recon", "train the reconstruction rectifier")
    p = command("train-edit", "train an editing rectifier")
    p.add_argument("--strategy", choices=("sm", "markov"), default="sm")
    p = command("sample", "write graymaps of held-out reconstructions or edits")
    p.add_argument("--rectifier", default=None, help="rectifier checkpoint; frozen model if omitted")
    p.add_argument("--unconditional", action="store_true", help="sample from noise with the frozen model")
    p.add_argument("--count", type=int, default=experiments.PGM_LIMIT)
    p = command("invert", "invert the held-out set to latents")
    p.add_argument("--rectifier", default=None)
    p = command("sweep", "run the step-count or lambda sweep")
    p.add_argument("--kind", choices=("steps", "lambda"), default="steps")
    command("ablate", "compare the reconstruction losses")
    command("eval", "evaluate frozen vs. rectified reconstruction")
    p = command("runs", "print recent runs from the registry")
    p.add_argument("--experiment", default=None)
    p.add_argument("--lookback", type=int, default=10)
    return parser


def configure_logging(level: Optional[str]) -> None:
    name = (level or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"unknown log level {level!r}")
    logging.basicConfig(level=name, format=LOG_FORMAT, force=True)


def _record(cfg: ExperimentConfig, command: str, fn: Callable[[], experiments.RunOutcome]) -> experiments.RunOutcome:
    """Run ``fn`` inside a registry run; the run is marked failed if it raises."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    session = get_session(cfg.registry_url)
    try:
        run = get_or_create_run(session, command.replace("-", "_"), command, cfg.seed, cfg.config_hash(),
                                mode=cfg.mode, snapshot=snapshot(cfg))
        try:
            outcome = fn()
        except Exception as e:
            finish_run(session, run, status="failed", error=f"{type(e).__name__}: {e}")
            raise
        run.experiment = outcome.experiment
        save_metric_batch(session, run, outcome.rows)
        finish_run(session, run, final_loss=outcome.final_loss, checkpoint_path=outcome.checkpoint_path,
                   checkpoint_sha256=outcome.checkpoint_sha256)
        logger.info("run %d (%s) completed: %d metric rows", run.id, outcome.experiment, len(outcome.rows))
        return outcome
    finally:
        session.close()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        env = load_environment()
        configure_logging(args.log_level or env["log_level"])
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "runs":
            session = get_session(cfg.registry_url)
            try:
                print(json.dumps(get_run_summary(session, args.experiment, args.lookback), indent=2))
            finally:
                session.close()
            return 0
        outcome = _record(cfg, args.command, lambda: COMMANDS[args.command](cfg, args))
        for name, path in outcome.outputs.items():
            logger.info("%s: %s", name, path)
        return 0
    except RectDiffError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES.get(type(e), 1)
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
