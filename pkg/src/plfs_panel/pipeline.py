"""Pipeline stages.  Each stage reads earlier artifacts from the output directory.

A stage writes into a staging directory first.  On success its files move
into the output directory; on failure they move to ``failed/<stage>/``.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import pandas as pd

from .artifacts import read_table, same_file, write_table
from .flows import (RATE_KINDS, average_matrices, cell_filter, earnings_ratio_ecdf, flow_matrices,
                    observation_pairs, rate_table)
from .fsu_match import apply_mapping, match_fsus, validate_mapping
from .manifest import STAGES, Manifest
from .models import FitError
from .panel import build_histories, features_frame, filter_working_age, histories_frame, histories_from_frame
from .records import (HH_COLS, PERSON_COLS, ParseError, assign_panels, canonicalize, fix_revisit_quarters,
                      parse_visit_file, sort_records, visits_to_frame)
from .regressions import ame_table, coefficient_table, fit_gross_flow, fit_transition_models
from .schedule import DEFAULT_SCHEDULE, quarter_ordinal
from .schema import load_schema
from .validate import attrition_table, validate_households

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_REMOVALS = 0, 1, 2, 3
REGIMES = ("old", "new")


class StageError(RuntimeError):
    pass


@dataclass
class RunContext:
    manifest: Manifest
    out: Path
    threads: int = 1
    alpha: float = 0.05
    dichotomy: str = "table3"

    def meta(self, stage: str, **extra) -> dict:
        return {"stage": stage, "manifest_sha256": self.manifest.digest, "seed": self.manifest.seed, **extra}

    def read(self, name: str) -> pd.DataFrame:
        path = self.out / name
        if not path.exists():
            raise StageError(f"{name} not found in {self.out}; run the stage that produces it first")
        return read_table(path)

    def records(self, regime: str, prefix: str = "records") -> pd.DataFrame:
        return canonicalize(self.read(f"{prefix}_{regime}.tsv"))


class Writer:
    def __init__(self, ctx: RunContext, stage: str, staging: Path):
        self.ctx, self.stage, self.staging = ctx, stage, staging
        self.names: list[str] = []

    def write(self, name: str, frame: pd.DataFrame, **meta) -> None:
        final = self.ctx.out / name
        if any(same_file(final, p) for p in self.ctx.manifest.input_paths()):
            raise StageError(f"artifact {final} would overwrite an input file")
        write_table(frame, self.staging / name, self.ctx.meta(self.stage, **meta))
        self.names.append(name)


# Stages.  Each returns an exit status (0, or 3 for validation removals).

def stage_ingest(ctx: RunContext, w: Writer) -> int:
    schema = load_schema(ctx.manifest.schema)
    frames = {r: [] for r in REGIMES}
    for year, paths in sorted(ctx.manifest.inputs.items()):
        recs = []
        for path in paths:
            with open(path, "rb") as fh:
                try:
                    parsed = parse_visit_file(fh, schema, survey_year=year)
                except ParseError as exc:
                    raise StageError(f"{path}: {exc}") from exc
            wrong = {r.survey_year for r in parsed} - {year}
            if wrong:
                raise StageError(f"{path} holds survey year(s) {sorted(wrong)}, listed under {year}")
            recs += parsed
        recs = assign_panels(fix_revisit_quarters(recs, year), DEFAULT_SCHEDULE)
        frames[ctx.manifest.regime(year)].append(visits_to_frame(recs))
    for regime in REGIMES:
        parts = frames[regime]
        frame = sort_records(pd.concat(parts, ignore_index=True)) if parts else canonicalize(
            pd.DataFrame(columns=["survey_year", "quarter"]))
        dup = frame.duplicated(PERSON_COLS + ["year_quarter"])
        if dup.any():
            row = frame[dup].iloc[0]
            raise StageError(f"person {tuple(row[PERSON_COLS])} appears twice in {row['year_quarter']} across files")
        w.write(f"records_{regime}.tsv", frame)
    return EXIT_OK


def stage_validate(ctx: RunContext, w: Writer) -> int:
    th = ctx.manifest.thresholds
    reports = []
    removed = 0
    for regime in REGIMES:
        clean, report = validate_households(ctx.records(regime), th.size_tolerance, th.age_tolerance)
        w.write(f"clean_{regime}.tsv", clean, households_checked=report.households_checked,
                households_removed=report.households_removed, size_mismatches=report.size_mismatches)
        reports.append(report.rejections.assign(regime=regime))
        removed += report.households_removed
    w.write("validation_report.tsv", pd.concat(reports, ignore_index=True), households_removed=removed)
    return EXIT_REMOVALS if removed else EXIT_OK


def stage_match(ctx: RunContext, w: Writer) -> int:
    m = ctx.manifest
    old, new = ctx.records("old", "clean"), ctx.records("new", "clean")
    mapping, scores = match_fsus(old, new, m.member_mode, m.thresholds.min_score)
    w.write("fsu_scores.tsv", scores)
    w.write("fsu_mapping.tsv", mapping.to_frame(), accepted=len(mapping.accepted),
            conflicted=len(mapping.conflicted), unmatched=len(mapping.unmatched))
    rewritten, _ = apply_mapping(old, mapping)
    clash = set(rewritten.loc[~rewritten["fsu"].isin(list(mapping.accepted.values())), "fsu"]) & set(new["fsu"])
    if clash:
        log.warning("%d unlinked old FSU numbers reappear in the new frame; kept apart with suffix '~old'", len(clash))
        rewritten.loc[rewritten["fsu"].isin(clash), "fsu"] = rewritten["fsu"] + "~old"
    check = validate_mapping(rewritten, new, m.thresholds.size_tolerance, m.thresholds.age_tolerance)
    w.write("mapping_validation.tsv", check.report.rejections, linked_households=check.linked_households,
            failures=check.failures)
    linked = pd.concat([rewritten, new], ignore_index=True)
    if check.failures:
        bad = check.failed_keys.assign(_bad=True)
        linked = linked.merge(bad, on=HH_COLS, how="left")
        linked = linked[linked["_bad"].isna()].drop(columns="_bad")
    linked = sort_records(linked)
    w.write("linked.tsv", linked)
    table = attrition_frame(linked, m.window)
    w.write("attrition_table.tsv", table)
    return EXIT_OK


def attrition_frame(linked: pd.DataFrame, window) -> pd.DataFrame:
    return attrition_table(linked, DEFAULT_SCHEDULE, window).reset_index()


def _in_window(frame: pd.DataFrame, window) -> pd.DataFrame:
    q = frame["year_quarter"].map(quarter_ordinal)
    return frame[(q >= quarter_ordinal(window[0])) & (q <= quarter_ordinal(window[1]))]


def stage_panel(ctx: RunContext, w: Writer) -> int:
    m = ctx.manifest
    linked = _in_window(canonicalize(ctx.read("linked.tsv")), m.window)
    histories = filter_working_age(build_histories(linked, window_end=m.window[1]), m.thresholds.working_age)
    w.write("histories.tsv", histories_frame(histories), persons=len(histories))
    w.write("features.tsv", features_frame(histories, ctx.dichotomy), emp_dichotomy=ctx.dichotomy)
    return EXIT_OK


def _pairs(ctx: RunContext) -> pd.DataFrame:
    return observation_pairs(histories_from_frame(ctx.read("histories.tsv")))


def stage_flows(ctx: RunContext, w: Writer) -> int:
    matrices = flow_matrices(_pairs(ctx))
    if not matrices:
        raise StageError("no consecutive-quarter observations; flow matrices are empty")
    parts = [fm.to_frame() for fm in matrices]
    for gender in sorted({fm.gender for fm in matrices}):
        avg = average_matrices([fm for fm in matrices if fm.gender == gender])
        parts.append(avg.to_frame())
    w.write("flow_matrices.tsv", pd.concat(parts, ignore_index=True))
    return EXIT_OK


def stage_rates(ctx: RunContext, w: Writer) -> int:
    pairs = _pairs(ctx)
    masses = ctx.manifest.thresholds.masses
    parts = []
    for kind in RATE_KINDS:
        t = rate_table(pairs, kind)
        kept = cell_filter(t.assign(_row=range(len(t))), masses)["_row"]
        t["kept"] = 0
        t.loc[kept.to_numpy(), "kept"] = 1
        parts.append(t)
    cols = ["cell_kind", "gender", "emp_type", "state", "industry", "period", "mass_t", "mass_next",
            "entry_rate", "exit_rate", "gross_flow", "weight_mass", "kept"]
    out = pd.concat(parts, ignore_index=True).reindex(columns=cols)
    w.write("rates.tsv", out, female_mass=masses["Female"], male_mass=masses["Male"])
    return EXIT_OK


def _with_significance(table: pd.DataFrame, alpha: float) -> pd.DataFrame:
    """Flag rows with p strictly below ``alpha``, the same rule as :func:`significance_filter`."""
    if "p" not in table:
        return table
    return table.assign(significant=table["p"].lt(alpha).astype(int))


def stage_regress(ctx: RunContext, w: Writer) -> int:
    rates = ctx.read("rates.tsv")
    cells = rates[(rates["cell_kind"] == "state_industry") & (rates["kept"] == 1)]
    try:
        ols = fit_gross_flow(cells).table().assign(status="ok", n=len(cells))
    except FitError as exc:
        log.warning("gross-flow regression not fitted: %s", exc)
        ols = pd.DataFrame([{"term": None, "status": "failed", "error": str(exc), "n": len(cells)}])
    w.write("regression_ols.tsv", _with_significance(ols, ctx.alpha), alpha=ctx.alpha)
    models = fit_transition_models(ctx.read("features.tsv"), threads=ctx.threads)
    w.write("regression_logit.tsv", _with_significance(coefficient_table(models), ctx.alpha), alpha=ctx.alpha)
    w.write("ame.tsv", _with_significance(ame_table(models), ctx.alpha), alpha=ctx.alpha)
    return EXIT_OK


def stage_ecdf(ctx: RunContext, w: Writer) -> int:
    series = earnings_ratio_ecdf(_pairs(ctx))
    frame = pd.concat([s.to_frame() for s in series.values()], ignore_index=True)
    meta = {}
    for kind, s in series.items():
        meta[f"{kind}:n"] = s.n
        meta[f"{kind}:excluded_zero_before"] = s.excluded_zero_before
        meta[f"{kind}:excluded_missing"] = s.excluded_missing
    w.write("ecdf.tsv", frame, **meta)
    return EXIT_OK


STAGE_FUNCS: dict[str, Callable[[RunContext, Writer], int]] = {
    "ingest": stage_ingest,
    "validate": stage_validate,
    "match-fsu": stage_match,
    "build-panel": stage_panel,
    "flows": stage_flows,
    "rates": stage_rates,
    "regress": stage_regress,
    "ecdf": stage_ecdf,
}
assert tuple(STAGE_FUNCS) == STAGES


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, quarantine: Path):
        self.stage, self.cause, self.quarantine = stage, cause, quarantine
        super().__init__(f"stage {stage} failed: {cause}; partial artifacts in {quarantine}")


def run_stage(ctx: RunContext, stage: str) -> int:
    ctx.out.mkdir(parents=True, exist_ok=True)
    staging = ctx.out / ".staging" / stage
    failed = ctx.out / "failed" / stage
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir(parents=True)
    writer = Writer(ctx, stage, staging)
    log.info("stage %s", stage)
    try:
        status = STAGE_FUNCS[stage](ctx, writer)
    except Exception as exc:
        shutil.rmtree(failed, ignore_errors=True)
        failed.parent.mkdir(parents=True, exist_ok=True)
        shutil.move(str(staging), str(failed))
        _cleanup(ctx.out)
        raise StageFailed(stage, exc, failed) from exc
    for name in writer.names:
        (staging / name).replace(ctx.out / name)
    shutil.rmtree(staging)
    shutil.rmtree(failed, ignore_errors=True)
    _cleanup(ctx.out)
    return status


def _cleanup(out: Path) -> None:
    for d in (out / ".staging", out / "failed"):
        if d.exists() and not any(d.iterdir()):
            d.rmdir()


def run_pipeline(ctx: RunContext, stages: Optional[list[str]] = None) -> int:
    """Run the enabled stages in order; stops at the first failure.

    Validation removals do not stop the run, but the final status reports them.
    """
    status = EXIT_OK
    for stage in stages or [s for s in STAGES if ctx.manifest.stages.get(s, True)]:
        status = max(status, run_stage(ctx, stage))
    return status
