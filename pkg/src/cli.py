# src/cli.py
"""
Command-line entry point.

Exit codes: 0 all asserted criteria passed, 1 usage or configuration error,
2 numerical or output-path error, 3 one or more asserted criteria failed.
"""

import argparse
import logging
import os
import sys

from src.catalog import FUNCTIONAL_CATALOG, TEST_FIELDS
from src.config import default_output_dir, load_config, parse_overrides
from src.errors import ConfigError, DomainError, RoughCalcError, UsageError
from src.experiments import (
    run_adjointness, run_factorization, run_gubinelli_compare, run_isometry_defect, run_mixed,
    run_projection_lemma, run_remainder_scaling, run_simulate, run_verify_all,
)
from src.gaussian_engine import export_ensemble
from src.generate_report import report_stem, write_report
from src.utils import setup_logger

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_FAILED = 3

COMMANDS = {
    'simulate': ('Sample paths, check them against the Gram matrix and export the ensemble', None),
    'adjointness': ('E[F delta(u)] = E[<DF, u>] for functionals and test fields', run_adjointness),
    'factorize': ('Clark-Ocone residual over a grid sweep', run_factorization),
    'remainder': ('Controlled-expansion remainder scaling', run_remainder_scaling),
    'gubinelli': ('Pairing against regression slope for the controlled derivative',
                  run_gubinelli_compare),
    'isometry': ('Isometry defect of affine test fields', run_isometry_defect),
    'lemma': ('Energy projection against Gaussian regression', run_projection_lemma),
    'mixed': ('Direct-sum pipeline for alpha B + beta B^H', run_mixed),
    'verify-all': ('Every acceptance experiment', run_verify_all),
    'list': ('List functionals, test fields and subcommands', None),
}

# Convenience flags mapped onto configuration keys
FLAG_KEYS = ('seed', 'hurst', 'grid_n', 'paths', 'functional', 'workers')


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument('--config', help='key = value configuration file')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='configuration override (repeatable)')
    common.add_argument('--output-dir', help='report directory (default $ROUGHCALC_OUTPUT_DIR or reports)')
    common.add_argument('--seed', type=int)
    common.add_argument('--hurst', type=float)
    common.add_argument('--grid-n', dest='grid_n', type=int)
    common.add_argument('--paths', type=int)
    common.add_argument('--functional')
    common.add_argument('--workers', type=int)
    common.add_argument('--log-file', help='write log records to this file instead of stderr')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = _Parser(prog='roughcalc',
                     description='Operator calculus experiments for rough fractional Brownian motion')
    sub = parser.add_subparsers(dest='command')
    for name, (text, _) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _overrides(args):
    out = parse_overrides(args.set)
    for key in FLAG_KEYS:
        value = getattr(args, key)
        if value is not None:
            out[key] = value
    return out


def _print_listing():
    print('Functionals:')
    for name, (_, text) in FUNCTIONAL_CATALOG.items():
        print(f'  {name:<16} {text}')
    print('Test fields:')
    for name in TEST_FIELDS:
        print(f'  {name}')
    print('Subcommands:')
    for name, (text, _) in COMMANDS.items():
        print(f'  {name:<16} {text}')


def _run(command, cfg, directory):
    if command == 'simulate':
        report, ensemble = run_simulate(cfg)
        # write_report creates the directory and maps OSError to ReportPathError
        written = list(write_report(report, directory))
        written.append(export_ensemble(ensemble, os.path.join(directory, report_stem(report) + '.bin')))
        return [report], written

    result = COMMANDS[command][1](cfg)
    reports = result if isinstance(result, list) else [result]
    written = []
    for report in reports:
        written.extend(write_report(report, directory))
    return reports, written


def parse_and_dispatch(argv=None):
    """Parse argv, run one subcommand and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f'roughcalc: usage error: {e}', file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        print('roughcalc: usage error: a subcommand is required', file=sys.stderr)
        return EXIT_USAGE
    if args.command == 'list':
        _print_listing()
        return EXIT_OK

    logger = setup_logger('src', args.log_file, logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = load_config(args.config, _overrides(args))
        cfg.validate()
        directory = args.output_dir or default_output_dir()
        reports, written = _run(args.command, cfg, directory)
    except (UsageError, ConfigError, DomainError) as e:
        print(f'roughcalc: configuration error: {e}', file=sys.stderr)
        return EXIT_USAGE
    except RoughCalcError as e:
        print(f'roughcalc: {type(e).__name__}: {e}', file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        for handler in list(logger.handlers):
            handler.close()
            logger.removeHandler(handler)

    for path in written:
        print(f'written: {path}')
    failed = [f'{r.experiment}: {", ".join(r.failed)}' for r in reports if not r.passed]
    for line in failed:
        print(f'roughcalc: criteria failed in {line}', file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def main():
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
