"""Command-line driver.

Subcommands ``simulate``, ``sweep`` and ``ablate``. Exit codes: 0 success,
2 configuration error (diagnostics on stderr), 1 any other failure.
"""

import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional, Sequence

from .config import DEFAULT_CONFIG_PATH, ExperimentConfig, SolarisSettings, load_experiment_config
from .errors import ConfigError
from .workflows.experiment_flow import run_ablation, run_paired_simulation, run_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def print_banner(text: str):
    width = 60
    print("\n" + "=" * width)
    print(text.center(width))
    print("=" * width)


def _levels(text: str) -> List[float]:
    try:
        levels = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid coverage levels {text!r}") from e
    if not levels or levels != sorted(levels) or any(not 0.0 <= level <= 1.0 for level in levels):
        raise argparse.ArgumentTypeError(f"coverage levels must be sorted values in [0, 1], got {text!r}")
    return levels


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solaris", description="Speculative embedding-precompute simulator")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", help="Experiment file (.yaml, .yml or .json)")
        sub.add_argument("--out", help="Output directory (overrides output_dir)")
        sub.add_argument("--seed-override", type=int, help="Replace the world seed and the seed list")

    simulate = subparsers.add_parser("simulate", help="Paired baseline/treatment run on one trace")
    common(simulate)
    simulate.add_argument("--trace", help="Replay a requests.jsonl trace instead of generating one")

    sweep = subparsers.add_parser("sweep", help="Oracle coverage sweep")
    common(sweep)
    sweep.add_argument("--levels", type=_levels, help="Comma-separated coverage levels, e.g. 0,0.2,0.5,1.0")
    sweep.add_argument("--quality", action="store_true", help="Also run the exact-vs-imputed quality study")

    ablate = subparsers.add_parser("ablate", help="Enrichment ablation grid")
    common(ablate)
    return parser


def resolve_config(args: argparse.Namespace, settings: SolarisSettings) -> ExperimentConfig:
    path = args.config or settings.config or DEFAULT_CONFIG_PATH
    config = load_experiment_config(path)
    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    return config


def resolve_output_dir(args: argparse.Namespace, settings: SolarisSettings, config: ExperimentConfig) -> Path:
    return Path(args.out or settings.output_dir or config.output_dir)


def cmd_simulate(config: ExperimentConfig, out: Path, trace: Optional[str] = None) -> int:
    reports = run_paired_simulation(config, out, trace)
    treatment = reports["treatment"]
    print_banner("SOLARIS simulate")
    print(f"  baseline BCE:          {reports['baseline'].bce:.5f}")
    print(f"  treatment BCE:         {treatment.bce:.5f}")
    print(f"  relative reduction:    {treatment.relative_bce_reduction_pct:.3f}%")
    print(f"  coverage exact:        {treatment.coverage_exact:.3f}")
    print(f"  coverage effective:    {treatment.coverage_effective:.3f}")
    print(f"  coverage any signal:   {treatment.coverage_any_signal:.3f}")
    print(f"  reports written to {out}")
    return EXIT_OK


def cmd_sweep(config: ExperimentConfig, out: Path, levels: Optional[Sequence[float]] = None, quality: bool = False) -> int:
    results = run_sweep(config, out, levels, quality)
    print_banner("SOLARIS sweep")
    print(results["summary"].to_string(index=False))
    if "quality" in results:
        print()
        print(results["quality"].to_string(index=False))
    return EXIT_OK


def cmd_ablate(config: ExperimentConfig, out: Path) -> int:
    table = run_ablation(config, out)
    print_banner("SOLARIS ablate")
    print(table[["arm", "coverage_exact", "coverage_effective", "coverage_any_signal", "bce"]].to_string(index=False))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = SolarisSettings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args, settings)
        out = resolve_output_dir(args, settings, config)
        logger.info(f"Running {args.command} with config digest {config.digest()[:12]} into {out}")
        if args.command == "simulate":
            return cmd_simulate(config, out, args.trace)
        if args.command == "sweep":
            return cmd_sweep(config, out, args.levels, args.quality)
        return cmd_ablate(config, out)
    except ConfigError as e:
        logger.error(e.args[0])
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        traceback.print_exc()
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
