"""
Bodyimage CLI - Command Line Interface for the self-body-image experiments
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from bodyimage import experiments
from bodyimage.config import ModelFile, ScheduleSpec, load_model_file, resolve_log_dir
from bodyimage.errors import BodyImageError, ModelFileError
from bodyimage.journal import ExperimentJournal, get_db_path, write_csv
from bodyimage.self_body_image import SelfBodyImage, build_initial_self_body_image

logger = logging.getLogger("bodyimage")

COMMANDS = ("init-train", "online-learn", "estimate", "grasp", "tension-sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bodyimage",
        description="Bodyimage - online self-body-image learning on a simulated tendon-driven arm"
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", default="planar_2dof",
                        help="Model file path or built-in fixture name (default: planar_2dof)")
    common.add_argument("--seed", type=int, default=None, help="Seed (default: the model file's seed)")
    common.add_argument("--out-dir", default=None,
                        help="Output root (default: $BODYIMAGE_LOG_DIR or ~/.bodyimage/runs)")
    common.add_argument("--batch", type=int, default=1,
                        help="Run seeds seed..seed+N-1 in parallel worker processes")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    with_sbi = argparse.ArgumentParser(add_help=False)
    with_sbi.add_argument("--sbi", default=None,
                          help="Trained self-body image (default: train one from the model file)")
    with_sbi.add_argument("--disable-mrcm", action="store_true",
                          help="Replace the muscle-route change model with zeros")

    subparsers.add_parser("init-train", parents=[common],
                          help="Train the initial self-body image from the geometric model")
    online = subparsers.add_parser("online-learn", parents=[common, with_sbi],
                                   help="Run the online learning schedule against the perturbed plant")
    online.add_argument("--schedule", default="default",
                        help="default | control (no updates) | path to a JSON schedule block")
    subparsers.add_parser("estimate", parents=[common, with_sbi],
                          help="Joint estimation under hand loads, with and without the MRCM")
    grasp = subparsers.add_parser("grasp", parents=[common, with_sbi],
                                  help="Hold the dumbbell posture with tension compensation")
    grasp.add_argument("--mass", type=float, default=None, help="Dumbbell mass in kg (default: model file)")
    subparsers.add_parser("tension-sweep", parents=[common, with_sbi],
                          help="Peak tension over a posture sweep before and after antagonism learning")
    return parser


def main(argv: Optional[list] = None) -> int:
    """Main entry point for the bodyimage CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command not in COMMANDS:
        parser.print_help()
        return 2

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        model = load_model_file(args.model)
        seed = model.seed if args.seed is None else args.seed
        options = _options(args)
        if args.batch > 1:
            with ProcessPoolExecutor() as pool:
                futures = [pool.submit(run_command, args.command, args.model, seed + i, options)
                           for i in range(args.batch)]
                for future in futures:
                    future.result()
        else:
            run_command(args.command, model, seed, options)
    except BodyImageError as exc:
        logger.error("%s", exc)
        return 2
    except OSError as exc:
        logger.error("%s", exc)
        return 2
    return 0


def _options(args: argparse.Namespace) -> dict:
    return {
        "out_dir": args.out_dir,
        "sbi": getattr(args, "sbi", None),
        "disable_mrcm": getattr(args, "disable_mrcm", False),
        "schedule": getattr(args, "schedule", "default"),
        "mass": getattr(args, "mass", None),
    }


def _schedule(model: ModelFile, choice: str) -> ScheduleSpec:
    if choice == "default":
        return model.schedule
    if choice == "control":
        return model.schedule.without_updates()
    path = Path(choice)
    try:
        return ScheduleSpec.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, OSError) as exc:
        raise ModelFileError(f"{choice}: invalid schedule: {exc}") from exc


def _self_body_image(model: ModelFile, path: Optional[str], seed: int) -> SelfBodyImage:
    if path:
        return SelfBodyImage.from_bytes(Path(path).read_bytes())
    logger.info("no --sbi given; training the initial self-body image")
    chain = model.build_chain()
    sbi, _ = build_initial_self_body_image(chain, model.build_routing(chain), model.learner, seed)
    return sbi


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def run_command(command: str, model, seed: int, options: dict) -> dict:
    """Run one command for one seed, write its outputs and journal the run"""
    if not isinstance(model, ModelFile):
        model = load_model_file(model)
    log_dir = resolve_log_dir(options["out_dir"])
    run_dir = log_dir / f"{command}-seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    run_id = f"{model.name}:{command}:seed{seed}"
    journal = ExperimentJournal(get_db_path(log_dir))
    journal.start_run(run_id, command, model.name, seed)

    try:
        if command == "init-train":
            result = experiments.run_init_train(model, seed)
        else:
            schedule = _schedule(model, options["schedule"]) if command == "online-learn" else None
            sbi = _self_body_image(model, options["sbi"], seed)
            if command == "online-learn":
                if options["disable_mrcm"]:
                    sbi = sbi.without_mrcm()
                result = experiments.run_online_learn(model, sbi, seed, schedule, journal, run_id)
            elif command == "estimate":
                result = experiments.run_estimate(model, sbi, seed, options["disable_mrcm"])
            elif command == "grasp":
                result = experiments.run_grasp(model, sbi, options["mass"], options["disable_mrcm"])
            else:
                if options["disable_mrcm"]:
                    sbi = sbi.without_mrcm()
                result = experiments.run_tension_sweep(model, sbi, seed)
    except BodyImageError:
        journal.finish_run(run_id, "failed")
        raise

    for name, frame in result["frames"].items():
        journal.log_artifact(run_id, "csv", write_csv(frame, run_dir / f"{name}.csv"))
    if "sbi" in result:
        sbi_path = run_dir / "self_body_image.sbi"
        sbi_path.write_bytes(result["sbi"].to_bytes())
        journal.log_artifact(run_id, "sbi", sbi_path)
    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(result["summary"], indent=2, sort_keys=True, default=_jsonable) + "\n",
                            encoding="utf-8")
    journal.log_artifact(run_id, "summary", summary_path)

    status = "aborted" if result["summary"].get("aborted") else "done"
    journal.finish_run(run_id, status, result["summary"])
    logger.info("%s seed %d %s; outputs in %s", command, seed, status, run_dir)
    return result["summary"]


if __name__ == "__main__":
    sys.exit(main())
