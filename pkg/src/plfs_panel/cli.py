"""Command-line entry point: ``plfs-panel <subcommand> --manifest run.ini``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .manifest import STAGES, ManifestError, load_manifest, render_manifest
from .pipeline import EXIT_FAILED, EXIT_OK, EXIT_USAGE, RunContext, StageFailed, run_pipeline, run_stage
from .schema import load_schema
from .synth import CorruptionSpec, SynthConfig, SynthError, corrupt, generate, write_synth_files

log = logging.getLogger("plfs_panel")

SYNTH_INT_KEYS = ("districts", "fsus_per_district", "households_per_fsu", "min_stable")
SYNTH_FLOAT_KEYS = ("churn_fraction", "dropout", "zero_earnings_prob", "weight_jitter")
CORRUPT_PREFIX = "corrupt_"


def packaged_schema() -> Path:
    return Path(str(resources.files("plfs_panel") / "data" / "synthetic_schema.ini"))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, help="run manifest (INI)")
    common.add_argument("--out", type=Path, help="output directory (overrides the manifest)")
    common.add_argument("--threads", type=int, default=1, help="worker cap for parallel steps")
    common.add_argument("--seed", type=int, help="random seed (synth); overrides the manifest")
    common.add_argument("--alpha", type=float, help="significance level for coefficient flags")
    common.add_argument("--emp-dichotomy", choices=("table3", "strict"),
                        help="which labour states count as employed in the features")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="plfs-panel", description="Rotating-panel labour-flow pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("pipeline", parents=[common], help="run every enabled stage in order")
    sub.add_parser("synth", parents=[common], help="write synthetic inputs, ground truth and a manifest")
    return p


def _context(args) -> RunContext:
    if args.manifest is None:
        raise ManifestError("--manifest is required")
    m = load_manifest(args.manifest)
    out = args.out if args.out is not None else m.out
    return RunContext(
        manifest=m, out=Path(out), threads=max(1, args.threads),
        alpha=args.alpha if args.alpha is not None else m.thresholds.alpha,
        dichotomy=args.emp_dichotomy or m.emp_dichotomy,
    )


def synth_config(values: dict, seed: int) -> tuple[SynthConfig, CorruptionSpec]:
    cfg = SynthConfig(seed=seed)
    spec = CorruptionSpec()
    for key, value in values.items():
        if key in SYNTH_INT_KEYS:
            setattr(cfg, key, int(value))
        elif key in SYNTH_FLOAT_KEYS:
            setattr(cfg, key, float(value))
        elif key == "permutation":
            cfg.permutation = value.strip()
        elif key.startswith(CORRUPT_PREFIX) and hasattr(spec, key[len(CORRUPT_PREFIX):]):
            setattr(spec, key[len(CORRUPT_PREFIX):], int(value))
        elif key != "seed":
            raise ManifestError(f"unknown [synth] key {key!r}")
    return cfg, spec


def run_synth(args) -> int:
    values = {}
    seed = 0
    if args.manifest is not None:
        m = load_manifest(args.manifest, require_inputs=False)
        values, seed = m.synth, int(m.synth.get("seed", m.seed))
    if args.seed is not None:
        seed = args.seed
    out = args.out or Path("synthetic")
    cfg, spec = synth_config(values, seed)
    data = generate(cfg, threads=max(1, args.threads))
    first = cfg.years[0]
    data.years[first], corruption_log = corrupt(data.years[first], spec, seed)
    data.truth.corruptions = corruption_log
    inputs = out / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)
    schema_path = inputs / "schema.ini"
    shutil.copyfile(packaged_schema(), schema_path)
    files = write_synth_files(data, inputs, load_schema(schema_path))
    meta = {"stage": "synth", "seed": seed}
    data.truth.write(out / "truth", meta)
    listing = {year: [f"inputs/{files[f'year{i}_{kind}'].name}" for kind in ("first", "revisit")]
               for i, year in enumerate(cfg.years, start=1)}
    window = ("2017-Q3", "2019-Q2") if cfg.years == ("2017-18", "2018-19") else None
    # Synthetic weights are far smaller than real multipliers, so the cell-mass floors shrink with them.
    extra = {"thresholds": {"female_mass": "2000", "male_mass": "4000"}}
    text = render_manifest("inputs/schema.ini", listing, out="results", seed=seed, extra=extra,
                           **({"window": window} if window else {}))
    (out / "manifest.ini").write_text(text, encoding="utf-8")
    log.info("synthetic bundle written to %s", out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return run_synth(args)
        ctx = _context(args)
        if args.command == "pipeline":
            return run_pipeline(ctx)
        return run_stage(ctx, args.command)
    except (ManifestError, SynthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
