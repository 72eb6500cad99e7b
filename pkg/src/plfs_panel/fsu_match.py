"""Inference of a first-stage-unit renumbering between two survey years.

Every (old FSU, new FSU) pair in the same district is a candidate.  A pair
scores one point per household (same sub-block, second-stage stratum and
household number, size above two in both years) whose panel, religion and
social group agree and whose members agree on sex, relation to head and
education.  Year-one households are compared at their last visit, year-two
households at their first.  Each old FSU takes its top-scoring new FSU; a new
FSU claimed by several old ones, or a tie at the top, drops every pair involved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import pandas as pd

from .records import HH_COLS
from .schedule import quarter_ordinal
from .validate import ValidationReport, validate_households

log = logging.getLogger(__name__)

DISTRICT = ["state", "district"]
SLOT = ["sub_block", "stratum2", "hh_no"]
MAPPING_COLUMNS = ["fsu_old", "fsu_new", "score", "status"]


class MappingError(ValueError):
    pass


class CandidateScore(NamedTuple):
    state: str
    district: str
    fsu_old: str
    fsu_new: str
    score: int
    eligible_households: int


def household_signatures(frame: pd.DataFrame, visit: str = "last", member_mode: str = "person_no") -> pd.DataFrame:
    """One row per household at its last (or first) visit, with a comparison signature.

    ``member_mode="multiset"`` compares the multiset of member attribute
    tuples instead of aligning members by person number.
    """
    if visit not in ("last", "first"):
        raise ValueError("visit must be 'last' or 'first'")
    if member_mode not in ("person_no", "multiset"):
        raise ValueError("member_mode must be 'person_no' or 'multiset'")
    if frame.empty:
        return pd.DataFrame(columns=DISTRICT + HH_COLS + ["panel_id", "hh_size", "signature"])
    f = frame.assign(_q=frame["year_quarter"].map(quarter_ordinal))
    pick = f.groupby(HH_COLS)["_q"].transform("max" if visit == "last" else "min")
    f = f[f["_q"] == pick].sort_values(HH_COLS + ["person_no"], kind="mergesort")
    attrs = f["sex"].astype(str) + ":" + f["relation_to_head"].astype(str) + ":" + f["education"].astype(str)
    if member_mode == "person_no":
        f = f.assign(_tok=f["person_no"].astype(str) + "=" + attrs)
    else:
        f = f.assign(_tok=attrs).sort_values(HH_COLS + ["_tok"], kind="mergesort")
    g = f.groupby(HH_COLS, sort=True)
    out = g.agg(
        state=("state", "first"), district=("district", "first"), panel_id=("panel_id", "first"),
        religion=("religion", "first"), social_group=("social_group", "first"),
        hh_size=("hh_size", "max"), members=("_tok", ";".join),
    ).reset_index()
    out["signature"] = (out["panel_id"].astype(str) + "|" + out["religion"].astype(str) + "|"
                        + out["social_group"].astype(str) + "|" + out["members"])
    return out[DISTRICT + HH_COLS + ["panel_id", "hh_size", "signature"]]


def score_candidate(fsu_old: str, fsu_new: str, year1: pd.DataFrame, year2: pd.DataFrame) -> CandidateScore:
    """Score one renumbering candidate from household signature tables."""
    old = year1[year1["fsu"] == fsu_old]
    new = year2[year2["fsu"] == fsu_new]
    state, district = (old["state"].iloc[0], old["district"].iloc[0]) if len(old) else ("", "")
    by_slot = {tuple(r[:3]): r for r in new[SLOT + ["hh_size", "signature"]].itertuples(index=False, name=None)}
    score = eligible = 0
    for sb, st, hh, size, sig in old[SLOT + ["hh_size", "signature"]].itertuples(index=False, name=None):
        if size <= 2:
            continue
        other = by_slot.get((sb, st, hh))
        if other is None or other[3] <= 2:
            continue
        eligible += 1
        score += other[4] == sig
    return CandidateScore(state, district, fsu_old, fsu_new, score, eligible)


def score_candidates(year1: pd.DataFrame, year2: pd.DataFrame) -> pd.DataFrame:
    """Scores of all within-district candidate pairs that share at least one eligible household slot.

    Equivalent to calling :func:`score_candidate` over the full within-district
    cross product; pairs with no shared slot score zero and are omitted.
    """
    a = year1[year1["hh_size"] > 2]
    b = year2[year2["hh_size"] > 2]
    joined = a.merge(b, on=DISTRICT + SLOT, suffixes=("_old", "_new"))
    joined["agree"] = (joined["signature_old"] == joined["signature_new"]).astype(int)
    scores = (
        joined.groupby(DISTRICT + ["fsu_old", "fsu_new"], sort=True)
        .agg(score=("agree", "sum"), eligible_households=("agree", "size"))
        .reset_index()
    )
    return scores


@dataclass
class FsuMapping:
    accepted: dict[str, str] = field(default_factory=dict)
    scores: dict[str, int] = field(default_factory=dict)
    conflicts: pd.DataFrame = field(
        default_factory=lambda: pd.DataFrame(columns=["fsu_old", "fsu_new", "score", "reason"]))
    unmatched: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.accepted.values())) != len(self.accepted):
            raise MappingError("accepted mapping is not one-to-one")

    @property
    def conflicted(self) -> set[str]:
        return set(self.conflicts["fsu_old"])

    @property
    def known(self) -> set[str]:
        return set(self.accepted) | self.conflicted | set(self.unmatched)

    def to_frame(self) -> pd.DataFrame:
        rows = [(o, n, self.scores[o], "accepted") for o, n in self.accepted.items()]
        rows += [(o, n, s, "conflict") for o, n, s in
                 self.conflicts[["fsu_old", "fsu_new", "score"]].itertuples(index=False, name=None)]
        rows += [(o, None, 0, "unmatched") for o in self.unmatched]
        out = pd.DataFrame(rows, columns=MAPPING_COLUMNS)
        out["score"] = out["score"].astype(int)
        return out.sort_values(["fsu_old", "status", "fsu_new"], kind="mergesort", na_position="first").reset_index(drop=True)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "FsuMapping":
        bad = set(frame["status"]) - {"accepted", "conflict", "unmatched"}
        if bad:
            raise MappingError(f"unknown mapping status {sorted(bad)}")
        acc = frame[frame["status"] == "accepted"]
        con = frame[frame["status"] == "conflict"]
        counts = con.groupby("fsu_old")["fsu_new"].transform("size")
        con = con.assign(reason=["tie" if c > 1 else "collision" for c in counts])
        return cls(
            accepted=dict(zip(acc["fsu_old"], acc["fsu_new"])),
            scores=dict(zip(acc["fsu_old"], acc["score"].astype(int))),
            conflicts=con[["fsu_old", "fsu_new", "score", "reason"]].reset_index(drop=True),
            unmatched=sorted(frame.loc[frame["status"] == "unmatched", "fsu_old"]),
        )


def infer_mapping(scores: pd.DataFrame, old_fsus: Optional[Iterable[str]] = None, min_score: int = 1) -> FsuMapping:
    """Select best matches, drop collisions and ties, and list unmatched old FSUs."""
    if old_fsus is None:
        old_fsus = scores["fsu_old"]
    old_fsus = sorted(set(old_fsus))
    live = scores[scores["score"] >= min_score]
    top = live.groupby("fsu_old")["score"].transform("max")
    best = live[live["score"] == top][["fsu_old", "fsu_new", "score"]]
    n_best = best.groupby("fsu_old")["fsu_new"].transform("size")
    ties = best[n_best > 1].assign(reason="tie")
    single = best[n_best == 1]
    claims = single.groupby("fsu_new")["fsu_old"].transform("size")
    collisions = single[claims > 1].assign(reason="collision")
    winners = single[claims == 1]
    conflicts = (
        pd.concat([ties, collisions], ignore_index=True)
        .sort_values(["fsu_old", "fsu_new"], kind="mergesort").reset_index(drop=True)
    )
    matched = set(best["fsu_old"])
    mapping = FsuMapping(
        accepted=dict(zip(winners["fsu_old"], winners["fsu_new"])),
        scores={o: int(s) for o, s in zip(winners["fsu_old"], winners["score"])},
        conflicts=conflicts[["fsu_old", "fsu_new", "score", "reason"]],
        unmatched=[o for o in old_fsus if o not in matched],
    )
    log.info("fsu mapping: %d accepted, %d conflicted, %d unmatched",
             len(mapping.accepted), len(mapping.conflicted), len(mapping.unmatched))
    return mapping


def match_fsus(year1: pd.DataFrame, year2: pd.DataFrame, member_mode: str = "person_no", min_score: int = 1) -> tuple[FsuMapping, pd.DataFrame]:
    """Signatures, candidate scores and the inferred mapping in one call."""
    s1 = household_signatures(year1, "last", member_mode)
    s2 = household_signatures(year2, "first", member_mode)
    scores = score_candidates(s1, s2)
    return infer_mapping(scores, old_fsus=year1["fsu"].unique(), min_score=min_score), scores


def apply_mapping(year1: pd.DataFrame, mapping: FsuMapping) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Rewrite old FSU numbers; households of conflicted/unmatched FSUs are returned as attrited."""
    fsus = year1["fsu"]
    unknown = sorted(set(fsus) - mapping.known)
    if unknown:
        raise MappingError(f"records reference FSUs absent from the mapping: {unknown[:10]}")
    out = year1.copy()
    hit = fsus.isin(list(mapping.accepted))
    out.loc[hit, "fsu"] = fsus[hit].map(mapping.accepted)
    attrited = year1.loc[~hit, HH_COLS].drop_duplicates().sort_values(HH_COLS).reset_index(drop=True)
    return out, attrited


@dataclass
class MappingCheck:
    linked_households: int
    report: ValidationReport

    @property
    def failures(self) -> int:
        return self.report.households_removed

    @property
    def failed_keys(self):
        return self.report.household_keys


def validate_mapping(rewritten_year1: pd.DataFrame, year2: pd.DataFrame, size_tolerance: int = 3, age_tolerance: int = 4) -> MappingCheck:
    """Rerun the household checks on households present in both years after rewriting."""
    k1 = rewritten_year1[HH_COLS].drop_duplicates()
    k2 = year2[HH_COLS].drop_duplicates()
    linked = k1.merge(k2, on=HH_COLS)
    both = pd.concat([rewritten_year1.merge(linked, on=HH_COLS), year2.merge(linked, on=HH_COLS)], ignore_index=True)
    _, report = validate_households(both, size_tolerance, age_tolerance)
    return MappingCheck(len(linked), report)
