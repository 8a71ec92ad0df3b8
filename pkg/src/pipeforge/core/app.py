#!/usr/bin/env python3
"""
Main Application Class

Parses the command line, loads the configuration, dispatches to the
command handlers and turns errors into exit codes:
0 ok, 2 input error, 3 empty result, 4 no successful evaluation, 1 anything else.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from .. import __description__, __version__
from .app_config import AppConfig
from .errors import (
    ConfigError,
    DataError,
    MetaBaseError,
    NoEvaluationsError,
    PipeForgeError,
)
from ..ui.command_service import (
    BUILTIN_CORPUS,
    EXIT_INPUT,
    EXIT_NO_EVALUATIONS,
    CommandService,
)
from ..utils.logging_utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_UNEXPECTED = 1

# flag dest -> configuration key
_OVERRIDES = {
    "metric": "metric",
    "budget": "budget",
    "seed": "seed",
    "workers": "workers",
    "metabase": "metabase",
    "target": "target",
    "max_iterations": "max_iterations",
    "cache_mib": "cache_mib",
    "eval_timeout": "eval_timeout",
    "missing_tokens": "missing_tokens",
    "log_level": "log_level",
    "log_file": "log_file",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (default config/pipeforge.conf)")
    common.add_argument("--seed", type=int, help="seed for every stochastic component")
    common.add_argument("--workers", type=int, help="parallel evaluation workers")
    common.add_argument("--metric", help="balanced_accuracy, accuracy, roc_auc or logloss")
    common.add_argument("--missing-tokens", dest="missing_tokens", help="comma-separated cell values read as missing")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--log-file", dest="log_file", help="also write the log to this file")

    parser = argparse.ArgumentParser(prog="pipeforge", description=__description__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    build = commands.add_parser("build-metabase", parents=[common], help="enumerate a corpus and train the prior surrogates")
    build.add_argument("--corpus", default=BUILTIN_CORPUS, help="directory of CSV files, or 'builtin'")
    build.add_argument("--out", required=True, help="output directory")
    build.add_argument("--max-depth", dest="max_depth", type=int, default=3, help="longest enumerated sequence (at most 5)")
    build.add_argument("--target", help="class column of the corpus files (default: last column)")

    fit = commands.add_parser("fit", parents=[common], help="search pipelines for one dataset")
    fit.add_argument("--data", required=True, help="training CSV")
    fit.add_argument("--target", help="class column")
    fit.add_argument("--budget", type=float, help="wall-clock budget in seconds")
    fit.add_argument("--metabase", help="meta-base directory used for priors")
    fit.add_argument("--no-prior", dest="no_prior", action="store_true", help="search without meta-learned priors")
    fit.add_argument("--max-iterations", dest="max_iterations", type=int, help="stop after this many search iterations")
    fit.add_argument("--cache-mib", dest="cache_mib", type=int, help="intermediate cache budget")
    fit.add_argument("--eval-timeout", dest="eval_timeout", type=float, help="per-evaluation time limit in seconds")
    fit.add_argument("--out", help="run directory (default runs/run_<timestamp>)")

    pred = commands.add_parser("predict", parents=[common], help="apply a fitted model to a CSV")
    pred.add_argument("--model", required=True, help="run directory holding model.json")
    pred.add_argument("--data", required=True, help="CSV to predict")
    pred.add_argument("--target", help="class column to ignore if present")
    pred.add_argument("--out", required=True, help="output CSV")

    rep = commands.add_parser("report", parents=[common], help="summarize a run directory")
    rep.add_argument("--run", required=True, help="run directory")
    rep.add_argument("--dot", help="write the visited search graph in DOT format")
    return parser


class PipeForgeApp:
    """Main application class for pipeforge"""

    def __init__(self, argv: Optional[List[str]] = None):
        self.args = build_parser().parse_args(argv)
        self.app_config: Optional[AppConfig] = None

    def _overrides(self) -> Dict[str, Any]:
        values = vars(self.args)
        overrides = {key: values.get(dest) for dest, key in _OVERRIDES.items()}
        if values.get("no_prior"):
            overrides["use_prior"] = False
        return overrides

    def _dispatch(self, commands: CommandService) -> int:
        args = self.args
        if args.command == "build-metabase":
            return commands.handle_build_metabase(args.corpus, args.out, args.max_depth, args.target)
        if args.command == "fit":
            return commands.handle_fit(args.data, args.out)
        if args.command == "predict":
            return commands.handle_predict(args.model, args.data, args.out)
        return commands.handle_report(args.run, args.dot)

    def run(self) -> int:
        """
        Run the selected subcommand

        Returns:
            int: process exit code
        """
        try:
            self.app_config = AppConfig(self.args.config, self._overrides())
            setup_logging(self.app_config.get_log_level(), self.app_config.get_log_file())
            return self._dispatch(CommandService(self.app_config))
        except NoEvaluationsError as e:
            print(f"❌ {e}", file=sys.stderr)
            return EXIT_NO_EVALUATIONS
        except (ConfigError, DataError, MetaBaseError) as e:
            print(f"❌ {e}", file=sys.stderr)
            return EXIT_INPUT
        except PipeForgeError as e:
            print(f"❌ Error: {e}", file=sys.stderr)
            logger.debug("Unhandled pipeforge error", exc_info=True)
            return EXIT_UNEXPECTED


def main(argv: Optional[List[str]] = None) -> int:
    """Console entry point"""
    try:
        return PipeForgeApp(argv).run()
    except KeyboardInterrupt:
        print("\n\n👋 Interrupted by user.", file=sys.stderr)
        return 130
    except Exception as e:
        print(f"\n❌ Fatal error: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
