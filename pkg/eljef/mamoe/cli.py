# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""CLI Application Functionality"""

from collections import namedtuple
from typing import List, Optional, Sequence

import argparse
import logging
import sys

from eljef.mamoe import analytics, fops
from eljef.mamoe.__version__ import VERSION
from eljef.mamoe.applog import setup_app_logging
from eljef.mamoe.checkpoint import CheckpointError, load_checkpoint
from eljef.mamoe.mamoe import VARIANTS, EventFormatError
from eljef.mamoe.model import Model, ModelConfig, gradcheck_model, load_model_config
from eljef.mamoe.numkit import EvaluationError
from eljef.mamoe.settings import ConfigError
from eljef.mamoe.stream import write_fixture
from eljef.mamoe.trainer import NonFiniteError, Trainer, evaluate_fixture, load_run_config, model_from_checkpoint

LOGGER = logging.getLogger(__name__)

PROG = 'mamoe'
GRADCHECK_TOLERANCE = 1e-4
"""Largest relative gradient error ``gradcheck`` accepts"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

Arg = namedtuple('Arg', 'flags opts', defaults=[[], {}])
"""Arg holds information needed to add a CLI argument.

Attributes:
    flags (list): List of flags to add. ie: [-f, --flag]
    opts (dict): Dictionary of keyword arguments for argparse.add_argument
"""

Command = namedtuple('Command', 'name help args handler')
"""Command holds one subcommand.

Attributes:
    name (str): Subcommand name.
    help (str): One-line description.
    args (list): List of :class:`Arg`
    handler (callable): Receives the parsed namespace, returns an exit status.
"""


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(',') if v.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {value}") from error


def _variant_list(value: str) -> List[str]:
    variants = [v.strip() for v in value.split(',') if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise argparse.ArgumentTypeError(f"variants must be from {', '.join(VARIANTS)}: {value}")
    return variants


def print_version(name: str, version: str) -> None:
    """Prints a uniform version to the terminal, then exits.

    Args:
        name: Program name.
        version: Program version.

    Raises:
        SystemExit: Always 0
    """
    print(f"{name} - {version}")
    raise SystemExit(0)


def cmd_train(args: argparse.Namespace) -> int:
    """Runs one training stage into ``--out``."""
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, args.out, args.steps)
    else:
        run = load_run_config(args.config)
        cfg = run.stage(args.stage)
        if args.steps is not None:
            cfg = cfg._replace(total_steps=args.steps)
        model = Model(run.model)
        if args.init:
            model.load_state_dict(load_checkpoint(args.init).params)
            LOGGER.info("Initialized weights from %s", args.init)
        trainer = Trainer(model, cfg, args.stage, args.out)
    history = trainer.run()
    if history:
        print(f"step {history[-1].step} loss {history[-1].loss:.6f}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    """Writes a metrics report of an event or heatmap CSV."""
    part = load_model_config(args.config).partition() if args.config else None
    report = analytics.analyze(args.events, part, args.per_token)
    fops.file_write(args.report, report.serialize() + '\n', newline='\n')
    entry = report.entries[0]
    print(f"entropy text {entry.entropy_text} audio {entry.entropy_audio} gini {entry.gini_overall} "
          f"violations {entry.violations}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    """Trains every variant for every seed and compares them."""
    run = load_run_config(args.config)
    report = analytics.compare_variants(run, args.variants, args.seeds, args.stage, args.steps)
    if args.out:
        fops.file_write(args.out, report.serialize() + '\n', newline='\n')
    else:
        print(report.serialize())
    for metric, variant in sorted(report.winners.items()):
        LOGGER.info("best %s: %s", metric, variant)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Scores next-token prediction over a sequence fixture."""
    if args.checkpoint:
        model = model_from_checkpoint(args.checkpoint)
    else:
        model = Model(load_model_config(args.config))
    score = evaluate_fixture(model, args.fixture)
    if args.predictions:
        write_fixture(args.predictions, score.predictions)
    print(f"sequences {score.sequences} positions {score.positions} loss {score.loss:.6f} "
          f"accuracy {score.accuracy:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Compares tape gradients with finite differences on a tiny model.

    Fails when a parameter group has a relative error at or above
    :data:`GRADCHECK_TOLERANCE`, or had no coordinate with stable routing.
    """
    config = load_model_config(args.config) if args.config else ModelConfig()
    reports = gradcheck_model(config)
    failed = []
    for name, report in reports.items():
        LOGGER.debug("%s: max_rel_err %.3e max_abs_err %.3e over %d coords (%d unstable)", name,
                     report.max_rel_err, report.max_abs_err, report.checked, report.unstable)
        if report.checked == 0:
            LOGGER.error("%s: no coordinate kept its routing, nothing was compared", name)
        if not report.passed(GRADCHECK_TOLERANCE):
            failed.append(name)
    worst = max(report.max_rel_err for report in reports.values())
    worst_abs = max(report.max_abs_err for report in reports.values())
    print(f"max_rel_err {worst:.3e} max_abs_err {worst_abs:.3e}")
    if failed:
        LOGGER.error("gradient check failed for %s (tolerance %.0e)", ', '.join(failed), GRADCHECK_TOLERANCE)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_heatmap(args: argparse.Namespace) -> int:
    """Exports the modality x expert counts of an event CSV."""
    u = analytics.accumulate(analytics.read_events(args.events))
    if u.tokens == 0:
        raise ValueError(f"no events in {args.events}")
    analytics.write_heatmap(args.out, u, args.normalize)
    return EXIT_OK


COMMANDS = [
    Command('train', 'run one training stage', [
        Arg(['--config'], {'help': 'JSON or YAML run config'}),
        Arg(['--stage'], {'type': int, 'choices': [1, 2], 'default': 1, 'help': 'training stage'}),
        Arg(['--out'], {'required': True, 'help': 'output directory'}),
        Arg(['--steps'], {'type': int, 'help': 'override total steps'}),
        Arg(['--resume'], {'help': 'checkpoint to resume from'}),
        Arg(['--init'], {'help': 'checkpoint to take initial weights from'}),
    ], cmd_train),
    Command('analyze', 'report routing metrics of an event or heatmap CSV', [
        Arg(['--events'], {'required': True, 'help': 'routing-event or heatmap CSV'}),
        Arg(['--report'], {'required': True, 'help': 'report JSON to write'}),
        Arg(['--config'], {'help': 'model config giving the expert groups'}),
        Arg(['--per-token'], {'action': 'store_true', 'help': 'add per-token gate entropy'}),
    ], cmd_analyze),
    Command('ablate', 'compare variants over seeds', [
        Arg(['--config'], {'help': 'JSON or YAML run config'}),
        Arg(['--variants'], {'type': _variant_list, 'required': True, 'help': 'comma-separated variants'}),
        Arg(['--seeds'], {'type': _int_list, 'required': True, 'help': 'comma-separated seeds'}),
        Arg(['--stage'], {'type': int, 'choices': [1, 2], 'default': 1, 'help': 'training stage'}),
        Arg(['--steps'], {'type': int, 'help': 'override total steps'}),
        Arg(['--out'], {'help': 'comparison JSON to write, stdout when omitted'}),
    ], cmd_ablate),
    Command('evaluate', 'score next-token prediction over a sequence fixture', [
        Arg(['--fixture'], {'required': True, 'help': 'JSON-lines sequence fixture'}),
        Arg(['--checkpoint'], {'help': 'checkpoint holding the model, default is an untrained model'}),
        Arg(['--config'], {'help': 'model config of the untrained model'}),
        Arg(['--predictions'], {'help': 'fixture file to write greedy predictions to'}),
    ], cmd_evaluate),
    Command('gradcheck', 'check gradients against finite differences', [
        Arg(['--config'], {'help': 'model config supplying variant and seeds'}),
    ], cmd_gradcheck),
    Command('heatmap', 'export modality x expert routing counts', [
        Arg(['--events'], {'required': True, 'help': 'routing-event CSV'}),
        Arg(['--out'], {'required': True, 'help': 'heatmap CSV to write'}),
        Arg(['--normalize'], {'action': 'store_true', 'help': 'write per-modality frequencies'}),
    ], cmd_heatmap),
]


def build_parser(commands: Sequence[Command] = None) -> argparse.ArgumentParser:
    """Builds the ``mamoe`` parser with one subparser per :class:`Command`."""
    parser = _Parser(prog=PROG, description='Modality-aware mixture of experts toolkit')
    parser.add_argument('--debug', action='store_true', help='enable debug logging')
    parser.add_argument('--log-file', help='also log to this file')
    parser.add_argument('--version', action='store_true', help='print version and exit')
    subparsers = parser.add_subparsers(dest='command', parser_class=_Parser)
    for command in commands or COMMANDS:
        sub = subparsers.add_parser(command.name, help=command.help, description=command.help)
        for arg in command.args:
            sub.add_argument(*arg.flags, **arg.opts)
        sub.set_defaults(handler=command.handler)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``mamoe`` command.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime failure.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as error:
        sys.stderr.write(str(error))
        return EXIT_USAGE
    if args.version:
        print_version(PROG, VERSION)
    if not args.command:
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE

    setup_app_logging(args.debug, args.log_file)
    try:
        return args.handler(args)
    except (CheckpointError, ConfigError, EvaluationError, EventFormatError, NonFiniteError, OSError,
            ValueError) as error:
        LOGGER.error("%s", error)
        return EXIT_FAILURE
