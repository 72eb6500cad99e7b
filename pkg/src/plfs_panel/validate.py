"""Household consistency checks across visits and attrition tabulation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .records import HH_COLS, PERSON_COLS, HouseholdKey
from .schedule import PanelSchedule, quarter_ordinal

log = logging.getLogger(__name__)

RULE_RELIGION = "religion_social_group"
RULE_SIZE = "household_size"
RULE_SEX_RELATION = "sex_relation"
RULE_AGE = "age_drift"
RULES = (RULE_RELIGION, RULE_SIZE, RULE_SEX_RELATION, RULE_AGE)

REPORT_COLUMNS = HH_COLS + ["rule", "person_no", "values"]


@dataclass
class ValidationReport:
    rejections: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=REPORT_COLUMNS))
    households_checked: int = 0
    size_mismatches: int = 0

    @property
    def counts(self) -> dict[str, int]:
        """Households rejected under each rule (a household may count under several)."""
        per_rule = self.rejections.drop_duplicates(HH_COLS + ["rule"])["rule"].value_counts()
        return {rule: int(per_rule.get(rule, 0)) for rule in RULES}

    @property
    def household_keys(self) -> set[HouseholdKey]:
        keys = self.rejections[HH_COLS].drop_duplicates()
        return {HouseholdKey(*k) for k in keys.itertuples(index=False, name=None)}

    @property
    def households_removed(self) -> int:
        return len(self.household_keys)

    def summary(self) -> pd.DataFrame:
        rows = [{"rule": r, "households": n} for r, n in self.counts.items()]
        rows.append({"rule": "total_removed", "households": self.households_removed})
        rows.append({"rule": "households_checked", "households": self.households_checked})
        return pd.DataFrame(rows)


def _values(frame: pd.DataFrame, keys: list[str], failing: pd.DataFrame, cols: list[str]) -> pd.Series:
    sub = frame.merge(failing[keys], on=keys)
    parts = []
    for col in cols:
        vals = sub.groupby(keys, sort=True)[col].agg(lambda s: ",".join(str(v) for v in sorted(set(s))))
        parts.append(col + ":" + vals)
    out = parts[0]
    for p in parts[1:]:
        out = out + " " + p
    return out


def _failures(frame, keys, mask_cols, spread, tolerance, rule) -> pd.DataFrame:
    g = frame.groupby(keys, sort=True)
    if spread:
        stat = g[mask_cols].max() - g[mask_cols].min()
        bad = (stat > tolerance).any(axis=1)
    else:
        stat = g[mask_cols].nunique()
        bad = (stat > 1).any(axis=1)
    failing = bad[bad].index.to_frame(index=False)
    if failing.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    vals = _values(frame, keys, failing, mask_cols).reset_index(drop=True)
    out = failing.copy()
    out["rule"] = rule
    if "person_no" not in out:
        out["person_no"] = None
    out["values"] = vals.values
    return out[REPORT_COLUMNS]


def validate_households(
    frame: pd.DataFrame, size_tolerance: int = 3, age_tolerance: int = 4
) -> tuple[pd.DataFrame, ValidationReport]:
    """Drop every household that fails any consistency rule over any pair of its visits.

    Rules: religion or social group changed; reported household size changed
    by more than ``size_tolerance``; a member's sex or relation to head
    changed; a member's age changed by more than ``age_tolerance`` years.
    Removal is household-atomic.
    """
    if frame.empty:
        return frame.copy(), ValidationReport()
    found = [
        _failures(frame, HH_COLS, ["religion", "social_group"], False, None, RULE_RELIGION),
        _failures(frame, HH_COLS, ["hh_size"], True, size_tolerance, RULE_SIZE),
        _failures(frame, PERSON_COLS, ["sex", "relation_to_head"], False, None, RULE_SEX_RELATION),
        _failures(frame, PERSON_COLS, ["age"], True, age_tolerance, RULE_AGE),
    ]
    found = [f for f in found if not f.empty]
    rejections = (
        pd.concat(found, ignore_index=True) if found else pd.DataFrame(columns=REPORT_COLUMNS)
    )
    rejections = rejections.sort_values(HH_COLS + ["rule"], kind="mergesort").reset_index(drop=True)

    visit_counts = frame.groupby(HH_COLS + ["year_quarter"], sort=False).agg(
        members=("person_no", "size"), reported=("hh_size", "max"))
    mismatches = int((visit_counts["members"] != visit_counts["reported"]).sum())
    if mismatches:
        log.warning("%d household-visits report a size different from their member count", mismatches)

    n_households = frame[HH_COLS].drop_duplicates().shape[0]
    report = ValidationReport(rejections, households_checked=n_households, size_mismatches=mismatches)
    if rejections.empty:
        return frame.copy(), report
    bad = rejections[HH_COLS].drop_duplicates()
    keep = frame.merge(bad.assign(_bad=True), on=HH_COLS, how="left")["_bad"].isna().values
    return frame[keep].reset_index(drop=True), report


def attrition_table(
    frame: pd.DataFrame, schedule: PanelSchedule, window: Optional[tuple[str, str]] = None
) -> pd.DataFrame:
    """Percent of each panel's first-visit households missing at visits 2-4.

    Rows are visit numbers, columns panel labels; cells whose visit falls
    outside ``window`` (or panels with no first-visit households) are NaN.
    """
    if window is None:
        window = (frame["year_quarter"].min(), frame["year_quarter"].max())
    lo, hi = quarter_ordinal(window[0]), quarter_ordinal(window[1])
    hh = frame[HH_COLS + ["panel_id", "visit_no"]].drop_duplicates()
    table = pd.DataFrame(index=pd.Index([2, 3, 4], name="visit"), dtype=float)
    for panel in schedule.labels():
        col = pd.Series(np.nan, index=table.index)
        first_q = quarter_ordinal(schedule.quarter_of(panel, 1))
        if not lo <= first_q <= hi:
            continue
        base = hh[(hh["panel_id"] == panel) & (hh["visit_no"] == 1)][HH_COLS]
        n = len(base)
        if n == 0:
            continue
        for v in (2, 3, 4):
            if quarter_ordinal(schedule.quarter_of(panel, v)) > hi:
                continue
            seen = hh[(hh["panel_id"] == panel) & (hh["visit_no"] == v)][HH_COLS]
            present = base.merge(seen, on=HH_COLS).shape[0]
            col[v] = 100.0 * (n - present) / n
        if col.notna().any():
            table[panel] = col
    return table
