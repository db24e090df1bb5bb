import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from tabulate import tabulate

from modules.data.load.loaders import LOADERS
from modules.evaluation.harness import METRICS
from modules.pipeline.config import load_config
from modules.pipeline.runner import evaluate_run, run_pipeline, stage_directories
from modules.utils.exceptions import ConfigError, PipelineError
from modules.utils.utils import (
    describe_affinity,
    describe_scene,
    describe_trajectories,
    setup_logging,
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

# Flag -> configuration key it overrides.
FLAG_OVERRIDES = {
    "lambda_": "energy.lambda_",
    "tau": "affinity.tau",
    "dropout": "affinity.dropout",
    "cameras": "semantics.n_cameras",
}


@dataclass
class CommandOutcome:
    r"""Result of a command.

    Parameters
    ----------
    exit_code : int
        0 on success, 1 for invalid input, 2 when a stage failed.
    summary : str
        One-line human-readable summary.
    paths : list of str
        Artifacts written.
    details : dict
        Machine-readable summary printed by ``--json``.
    """

    exit_code: int
    summary: str
    paths: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "summary": self.summary,
            "paths": self.paths,
            "details": self.details,
        }


def parse_seeds(text: str) -> list[int]:
    r"""Parses ``"0..4"`` (inclusive) or ``"1,3,5"`` into seeds."""
    try:
        if ".." in text:
            start, end = (int(part) for part in text.split("..", 1))
            if end < start:
                raise ValueError
            return list(range(start, end + 1))
        return [int(part) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"invalid seed list '{text}', expected e.g. 0..4 or 1,3,5"
        ) from None


def config_overrides(args) -> list[str]:
    r"""Dotted overrides from the command-line flags."""
    overrides = list(getattr(args, "set", None) or [])
    for flag, key in FLAG_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "out", None):
        overrides.append(f"output_dir={args.out}")
    return overrides


def _stage_table(manifest) -> str:
    rows = [
        (stage, record.status, "yes" if record.cached else "no", f"{record.seconds:.2f}")
        for stage, record in manifest.stages.items()
    ]
    return tabulate(rows, headers=["stage", "status", "cached", "seconds"])


def _headline(manifest) -> dict:
    headline = {}
    infer = manifest.stages.get("infer")
    if infer is not None and infer.status == "done":
        headline["initial_energy"] = infer.summary.get("initial_energy")
        headline["final_energy"] = infer.summary.get("final_energy")
        headline["changed_labels"] = infer.summary.get("changed")
        headline["equals_argmax"] = infer.summary.get("changed") == 0
    evaluation = manifest.stages.get("eval")
    if evaluation is not None and "accuracy" in evaluation.summary:
        for method, value in evaluation.summary["accuracy"].items():
            headline[f"accuracy_{method}"] = value
    return headline


def run_stages(args, until: str) -> CommandOutcome:
    r"""Runs the pipeline up to ``until`` for every requested seed."""
    overrides = config_overrides(args)
    base = load_config(args.config, overrides, scene=args.scene)
    seeds = args.seeds if args.seeds else [None]
    runs, paths = [], []
    for seed in seeds:
        if seed is None:
            config = base
        else:
            config = load_config(
                args.config,
                [
                    *overrides,
                    f"seed={seed}",
                    f"output_dir={Path(base.output_dir) / f'seed_{seed}'}",
                ],
                scene=args.scene,
            )
        manifest = run_pipeline(config, until=until, progress=args.progress)
        if not args.json:
            print(f"\nRun {config.output_dir}\n")
            print(_stage_table(manifest))
        run_dir = Path(config.output_dir)
        paths.append(str(run_dir / "manifest.json"))
        paths.extend(
            str(run_dir / record.directory / name)
            for record in manifest.stages.values()
            for name in record.outputs
        )
        runs.append(
            {
                "output_dir": str(run_dir),
                "seed": config.seed,
                "config_hash": manifest.config_hash,
                "stages": {
                    stage: record.summary for stage, record in manifest.stages.items()
                },
                "headline": _headline(manifest),
            }
        )
    headline = runs[-1]["headline"]
    summary = f"{until}: {len(runs)} run(s) completed"
    if headline:
        summary += ", " + ", ".join(
            f"{key}={value:.4g}" if isinstance(value, float) else f"{key}={value}"
            for key, value in headline.items()
        )
    return CommandOutcome(EXIT_OK, summary, paths, {"runs": runs})


def cmd_stage(stage: str):
    def command(args) -> CommandOutcome:
        return run_stages(args, stage)

    command.__name__ = f"cmd_{stage}"
    return command


cmd_synth = cmd_stage("synth")
cmd_reconstruct = cmd_stage("reconstruct")
cmd_semantics = cmd_stage("semantics")
cmd_affinity = cmd_stage("affinity")
cmd_infer = cmd_stage("infer")
cmd_run = cmd_stage("eval")


def cmd_eval(args) -> CommandOutcome:
    r"""Recomputes one metric (or all configured ones) of a finished run."""
    metrics = [args.metric] if args.metric else None
    output_dir = args.out or Path(args.run_dir) / "reports"
    reports = evaluate_run(args.run_dir, metrics, output_dir)
    paths = []
    for name, report in reports.items():
        paths.append(str(Path(output_dir) / f"{name}.csv"))
        if not args.json:
            print(f"\n{name}\n")
            print(tabulate(report.to_frame(), headers="keys", showindex=False))
    return CommandOutcome(
        EXIT_OK,
        f"eval: {len(reports)} report(s) written to {output_dir}",
        paths,
        {name: report.to_dict() for name, report in reports.items()},
    )


def cmd_describe(args) -> CommandOutcome:
    r"""Prints a description of the artifacts of a run."""
    directories = stage_directories(args.run_dir)
    if "synth" in directories:
        describe_scene(LOADERS["synth"](directories["synth"]).load())
    if "reconstruct" in directories:
        describe_trajectories(LOADERS["reconstruct"](directories["reconstruct"]).load())
    if "affinity" in directories:
        graph, _ = LOADERS["affinity"](directories["affinity"]).load()
        describe_affinity(graph)
    return CommandOutcome(
        EXIT_OK,
        f"described {len(directories)} stage(s)",
        [str(path) for path in directories.values()],
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--json",
        action="store_true",
        help="print a machine-readable summary on stdout",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log debug messages"
    )
    parser.add_argument(
        "-q",
        "--quiet",
        action="store_true",
        help="log warnings only and hide progress bars",
    )


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", help="experiment configuration (YAML or JSON)")
    parser.add_argument(
        "--scene",
        default=None,
        help="named scene of configs/scenes replacing the scene of the file",
    )
    parser.add_argument(
        "--out", default=None, help="run directory (default: output_dir of the config)"
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a configuration value, e.g. --set scene.frames=30; repeatable",
    )
    parser.add_argument(
        "--seeds",
        type=parse_seeds,
        default=None,
        help="master seeds, e.g. 0..4; each seed runs in <out>/seed_<k>",
    )
    parser.add_argument(
        "--lambda",
        dest="lambda_",
        type=float,
        default=None,
        help="smoothness weight of the labeling energy (unitless, >= 0)",
    )
    parser.add_argument(
        "--tau",
        type=float,
        default=None,
        help="affinity error scale in metres (> 0)",
    )
    parser.add_argument(
        "--dropout",
        type=float,
        default=None,
        help="probability of dropping a candidate affinity edge, in [0, 1)",
    )
    parser.add_argument(
        "--cameras",
        type=int,
        default=None,
        help="pool semantics from a seeded subset of this many cameras (0: all)",
    )
    _add_common(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semtraj",
        description="Reconstruct and semantically label dense 3D trajectories.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "synth": "generate the scene, its observations and confidence fields",
        "reconstruct": "run up to the trajectory reconstruction",
        "semantics": "run up to the view-pooled semantic maps",
        "affinity": "run up to the rigid-motion affinity graph",
        "infer": "run up to the label inference",
        "run": "run the full pipeline including evaluation",
    }
    commands = {
        "synth": cmd_synth,
        "reconstruct": cmd_reconstruct,
        "semantics": cmd_semantics,
        "affinity": cmd_affinity,
        "infer": cmd_infer,
        "run": cmd_run,
    }
    for name, help_text in descriptions.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        _add_run_flags(sub)
        sub.set_defaults(func=commands[name])

    evaluate = subparsers.add_parser(
        "eval",
        help="recompute metric reports of a finished run",
        description="recompute metric reports of a finished run",
    )
    evaluate.add_argument("run_dir", help="run directory holding manifest.json")
    evaluate.add_argument(
        "metric",
        nargs="?",
        default=None,
        help=f"metric to compute, one of {sorted(METRICS)} (default: configured ones)",
    )
    evaluate.add_argument(
        "--out", default=None, help="report directory (default: <run_dir>/reports)"
    )
    _add_common(evaluate)
    evaluate.set_defaults(func=cmd_eval)

    describe = subparsers.add_parser(
        "describe",
        help="describe the artifacts of a run",
        description="describe the artifacts of a run",
    )
    describe.add_argument("run_dir", help="run directory holding manifest.json")
    _add_common(describe)
    describe.set_defaults(func=cmd_describe)
    return parser


def execute(args) -> CommandOutcome:
    r"""Runs a parsed command and maps failures to exit codes."""
    try:
        return args.func(args)
    except ConfigError as exc:
        return CommandOutcome(EXIT_INVALID, f"invalid configuration: {exc}")
    except ValueError as exc:
        return CommandOutcome(EXIT_INVALID, str(exc))
    except PipelineError as exc:
        return CommandOutcome(EXIT_FAILED, str(exc), details={"stage": exc.stage})
    except FileNotFoundError as exc:
        return CommandOutcome(EXIT_INVALID, str(exc))


def main(argv=None) -> int:
    r"""Entry point of the ``semtraj`` console script."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(verbose=args.verbose, quiet=args.quiet)
    args.progress = not args.quiet and sys.stderr.isatty()
    outcome = execute(args)
    if args.json:
        print(json.dumps(outcome.to_dict(), indent=2, sort_keys=True))
    elif outcome.exit_code == EXIT_OK:
        print(f"\n{outcome.summary}")
    else:
        print(f"error: {outcome.summary}", file=sys.stderr)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
