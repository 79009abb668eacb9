#!/usr/bin/env python3
# Copyright 2024 Canonical Ltd.
# See LICENSE file for licensing details.
#

"""Command line entry point of the distancing solver."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from exceptions import EXIT_OK, ErrorWithExitCode, InvalidSpecError
from scenario import (
    FORMATS,
    START_CHOICES,
    ScenarioSpec,
    export,
    get_preset,
    load_spec,
    log_grid,
    render_presets,
    run_scan,
    run_scenario,
)
from services.artifacts import S3ArtifactStore

ROOT = Path(__file__).resolve().parent.parent
CONFIG_FILE = ROOT / "config.yaml"
ACTIONS_FILE = ROOT / "actions.yaml"
METADATA_FILE = ROOT / "metadata.yaml"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

ROLE_BY_COMMAND = {
    "baseline": "baseline",
    "nash": "nash",
    "utilitarian": "utilitarian",
    "govern": "government",
}

# config option -> (spec section, field); i_hc and sigma also reach the government profile
OPTION_FIELDS = {
    "kappa_star": ("epidemic", "kappa_star"),
    "i0": ("epidemic", "i0"),
    "tf": ("epidemic", "t_f"),
    "grid": ("epidemic", "n_grid"),
    "alpha0": ("individual_cost", "alpha0"),
    "alpha1": ("individual_cost", "alpha1"),
    "i_hc": ("individual_cost", "i_hc"),
    "sigma": ("individual_cost", "sigma"),
    "beta": ("individual_cost", "beta"),
    "f": ("individual_cost", "f"),
    "alpha_g0": ("government_prefs", "alpha0"),
    "alpha_g1": ("government_prefs", "alpha1"),
    "beta_g": ("government_prefs", "beta"),
    "f_g": ("government_prefs", "f"),
    "gamma_g": ("government_prefs", "gamma"),
    "damping": ("sweep", "damping"),
    "tol": ("sweep", "tol"),
    "max_iter": ("sweep", "max_iter"),
    "adaptive": ("sweep", "adaptive"),
    "outer_damping": ("outer_sweep", "damping"),
    "outer_tol": ("outer_sweep", "tol"),
    "outer_max_iter": ("outer_sweep", "max_iter"),
    "starts": (None, "starts"),
}
SHARED_OPTIONS = ("i_hc", "sigma")
OPTION_TYPES = {"float": float, "int": int, "string": str}


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as invalid specs."""

    def error(self, message):
        """Raise instead of exiting with the argparse status."""
        raise InvalidSpecError(f"{self.prog}: {message}")


def read_yaml(path: Path) -> dict:
    """Return the mapping stored in a YAML file, empty if the file is empty."""
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def config_options() -> Dict[str, dict]:
    """Return the option schema of config.yaml."""
    return read_yaml(CONFIG_FILE)["options"]


class SolverCli:
    """Command line runner: builds the parser from the manifests and dispatches subcommands."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self._metadata = read_yaml(METADATA_FILE)
        self._options = config_options()
        self._actions = read_yaml(ACTIONS_FILE)
        self.parser = self._build_parser()

    def _build_parser(self) -> ArgumentParser:
        common = ArgumentParser(add_help=False)
        common.add_argument("--preset", help="named scenario preset to start from")
        common.add_argument("--config", help="scenario file (.json, .yaml or .yml)")
        common.add_argument("--out", help="export destination, a path or s3://bucket/key")
        common.add_argument("--format", choices=FORMATS, help="export format")
        common.add_argument("--log-level", choices=LOG_LEVELS, default="INFO")
        for name, option in self._options.items():
            self._add_option(common, name, option)

        parser = ArgumentParser(
            prog=self._metadata["name"], description=self._metadata["summary"].strip()
        )
        subparsers = parser.add_subparsers(dest="command", required=True)
        for command, action in self._actions.items():
            sub = subparsers.add_parser(
                command,
                parents=[common],
                help=action["description"].strip().split(". ")[0],
                description=action["description"].strip(),
            )
            for name, param in (action.get("params") or {}).items():
                self._add_option(sub, name, param, apply_default=True)
        return parser

    @staticmethod
    def _add_option(
        parser: argparse.ArgumentParser, name: str, option: dict, apply_default: bool = False
    ) -> None:
        """Add one config option or action parameter as a flag.

        Config options default to None so that unset flags leave the resolved spec alone.
        """
        flag = "--" + name.replace("_", "-")
        dest = name.replace("-", "_")
        help_text = " ".join(option.get("description", "").split())
        if option["type"] == "boolean":
            group = parser.add_mutually_exclusive_group()
            group.add_argument(flag, dest=dest, action="store_true", default=None, help=help_text)
            group.add_argument(
                "--no-" + flag[2:], dest=dest, action="store_false", default=None
            )
            return
        kwargs: Dict[str, Any] = {"type": OPTION_TYPES[option["type"]], "help": help_text}
        if "enum" in option:
            kwargs["choices"] = option["enum"]
        if "nargs" in option:
            kwargs["nargs"] = option["nargs"]
        if name == "starts":
            kwargs["choices"] = list(START_CHOICES)
        if apply_default and "default" in option:
            kwargs["default"] = option["default"]
        parser.add_argument(flag, dest=dest, **kwargs)

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Run one subcommand and return the process exit code."""
        try:
            args = self.parser.parse_args(argv)
        except InvalidSpecError as err:
            logging.basicConfig(format=LOG_FORMAT)
            self.logger.error("invalid command line: %s", err.msg)
            return err.exit_code

        logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
        try:
            self._dispatch(args)
        except ErrorWithExitCode as err:
            self.logger.error("%s stopped early with message: %s", args.command, err.msg)
            return err.exit_code
        return EXIT_OK

    def _dispatch(self, args: argparse.Namespace) -> None:
        if args.command == "presets":
            print(render_presets())
            return
        if args.command == "scan":
            self._scan(args)
            return
        spec = self.resolve_spec(args, role=ROLE_BY_COMMAND[args.command])
        result = run_scenario(spec)
        self._emit(
            {
                "role": result.role,
                "metrics": result.metrics.to_dict(),
                "metadata": result.metadata,
            }
        )
        if args.out:
            self._export(result, args, default_format="csv")

    def _scan(self, args: argparse.Namespace) -> None:
        spec = self.resolve_spec(args, role=args.role, keep_scan=True)
        axis = args.axis or (spec.scan.name if spec.scan else None)
        if axis is None:
            raise InvalidSpecError("scan needs --axis or a preset with a scan axis")
        if args.values and args.range:
            raise InvalidSpecError("pass either --values or --range, not both")
        if args.values:
            values = parse_values(args.values)
        elif args.range:
            values = log_grid(args.range[0], args.range[1], args.per_decade)
        elif spec.scan is not None and spec.scan.name == axis:
            values = spec.scan.values
        else:
            raise InvalidSpecError(f"scan over '{axis}' needs --values or --range")
        spec = ScenarioSpec.from_dict(
            {"scan": {"name": axis, "values": list(values)}}, base=spec
        )
        result = run_scan(spec, jobs=args.jobs, with_references=bool(args.with_references))
        summary = result.to_dict()
        self._emit({key: summary[key] for key in ("axis", "values", "metrics", "crossover")})
        if args.out:
            self._export(result, args, default_format="json")

    def resolve_spec(
        self, args: argparse.Namespace, role: Optional[str] = None, keep_scan: bool = False
    ) -> ScenarioSpec:
        """Resolve the scenario: defaults, then preset, then config file, then flags."""
        spec = get_preset(args.preset).spec if args.preset else ScenarioSpec()
        if args.config:
            spec = load_spec(args.config, base=spec)
            self.logger.debug("loaded scenario file %s", args.config)

        overrides = flag_overrides(args, role or spec.role)
        if role is not None:
            overrides["role"] = role
        if not keep_scan:
            overrides["scan"] = None
        spec = ScenarioSpec.from_dict(overrides, base=spec)
        self.logger.debug("resolved scenario: %s", json.dumps(spec.to_dict()))
        return spec

    def _export(self, result, args: argparse.Namespace, default_format: str) -> None:
        fmt = args.format or ("json" if str(args.out).endswith(".json") else default_format)
        store = S3ArtifactStore(create_bucket_if_missing=bool(args.create_bucket_if_missing))
        destination = export(result, fmt, args.out, store=store)
        self.logger.info("exported %s result to %s", fmt, destination)

    @staticmethod
    def _emit(payload: dict) -> None:
        json.dump(payload, sys.stdout, indent=1)
        sys.stdout.write("\n")


def flag_overrides(args: argparse.Namespace, role: str) -> Dict[str, Any]:
    """Return the scenario fields set on the command line as nested overrides."""
    overrides: Dict[str, Any] = {}
    for name, (section, key) in OPTION_FIELDS.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        if section is None:
            overrides[key] = value
            continue
        if section == "government_prefs" and role != "government":
            raise InvalidSpecError(f"--{name.replace('_', '-')} needs the government role")
        overrides.setdefault(section, {})[key] = value
        if name == "adaptive":
            overrides.setdefault("outer_sweep", {})[key] = value
        if name in SHARED_OPTIONS and role == "government":
            overrides.setdefault("government_prefs", {})[key] = value
    if getattr(args, "check_starts", None) is not None:
        overrides["check_starts"] = args.check_starts
    return overrides


def parse_values(text: str) -> List[float]:
    """Parse a comma separated list of numbers."""
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise InvalidSpecError(f"--values must be comma separated numbers - got '{text}'")


def main():
    """Run the command line and exit with its code."""
    sys.exit(SolverCli().run())


if __name__ == "__main__":
    main()
