"""Weighted gross-flow matrices, entry/exit rates and earnings-ratio distributions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .panel import EMPLOYMENT_TYPES, FLOW_STATES, LaborState, PersonHistory
from .records import PERSON_COLS
from .schedule import quarter_ordinal

log = logging.getLogger(__name__)

GENDERS = {1: "Male", 2: "Female"}
ORIGINS = [s.value for s in FLOW_STATES]
DESTINATIONS = ORIGINS + [LaborState.ATTRIT.value]
ALL = "ALL"
DEFAULT_THRESHOLDS = {"Female": 5e7, "Male": 1e8}

PAIR_COLUMNS = PERSON_COLS + ["sex", "state", "period", "from_state", "to_state", "weight", "weight_next",
                              "industry_from", "industry_to", "earnings_from", "earnings_to"]


def observation_pairs(histories: Iterable[PersonHistory]) -> pd.DataFrame:
    """Consecutive-quarter observations; a missed next visit gives destination ``attrit``."""
    rows = []
    for h in histories:
        es = h.entries
        for a, b in zip(es, es[1:]):
            rows.append((*h.key, h.sex, h.state, a.year_quarter, a.labor_state.value, b.labor_state.value,
                         a.weight, b.weight, a.industry, b.industry, a.earnings, b.earnings))
        if h.attrition is not None and es:
            a = es[-1]
            rows.append((*h.key, h.sex, h.state, a.year_quarter, a.labor_state.value, LaborState.ATTRIT.value,
                         a.weight, np.nan, a.industry, None, a.earnings, None))
    out = pd.DataFrame(rows, columns=PAIR_COLUMNS)
    out["earnings_from"] = out["earnings_from"].astype(float)
    out["earnings_to"] = out["earnings_to"].astype(float)
    out["weight_next"] = out["weight_next"].astype(float)
    return out


@dataclass
class FlowMatrix:
    """Shares (percent of the gender's population at t) and row-normalized transition percentages."""

    gender: str
    period: str
    shares: pd.DataFrame
    probabilities: pd.DataFrame

    def to_frame(self) -> pd.DataFrame:
        parts = []
        for kind, table in (("share", self.shares), ("probability", self.probabilities)):
            t = table.copy()
            t.insert(0, "origin", t.index)
            t.insert(0, "kind", kind)
            t.insert(0, "period", self.period)
            t.insert(0, "gender", self.gender)
            parts.append(t.reset_index(drop=True))
        return pd.concat(parts, ignore_index=True)


def _empty_table() -> pd.DataFrame:
    return pd.DataFrame(0.0, index=pd.Index(ORIGINS + [ALL], name=None), columns=DESTINATIONS + [ALL])


def flow_matrix(pairs: pd.DataFrame, gender: str, period: str) -> Optional[FlowMatrix]:
    """Flow matrix for one gender and origin quarter; ``None`` when the cell is empty."""
    sex = {v: k for k, v in GENDERS.items()}[gender]
    sub = pairs[(pairs["sex"] == sex) & (pairs["period"] == period)]
    total = sub["weight"].sum()
    if sub.empty or total <= 0:
        log.info("no observations for %s in %s; matrix skipped", gender, period)
        return None
    mass = sub.groupby(["from_state", "to_state"])["weight"].sum()
    counts = _empty_table()
    for (i, j), w in mass.items():
        counts.loc[i, j] = w
    counts[ALL] = counts[DESTINATIONS].sum(axis=1)
    counts.loc[ALL] = counts.loc[ORIGINS].sum(axis=0)
    shares = 100.0 * counts / total
    row_tot = shares[ALL]
    probs = 100.0 * shares.div(row_tot.where(row_tot > 0), axis=0)
    return FlowMatrix(gender, period, shares, probs)


def flow_matrices(pairs: pd.DataFrame) -> list[FlowMatrix]:
    out = []
    for gender in ("Female", "Male"):
        for period in sorted(pairs["period"].unique(), key=quarter_ordinal):
            m = flow_matrix(pairs, gender, period)
            if m is not None:
                out.append(m)
    return out


def average_matrices(matrices: Sequence[FlowMatrix], weighting: str = "simple") -> FlowMatrix:
    """Element-wise mean over quarters of shares and of probabilities.

    ``weighting="occupancy"`` instead weights each quarter's probability row
    by that quarter's origin occupancy.
    """
    if not matrices:
        raise ValueError("need at least one matrix")
    first = matrices[0]
    for m in matrices[1:]:
        if not (m.shares.index.equals(first.shares.index) and m.shares.columns.equals(first.shares.columns)):
            raise ValueError("matrices have different state sets")
    shares = np.stack([m.shares.to_numpy() for m in matrices])
    probs = np.stack([m.probabilities.to_numpy() for m in matrices])
    if weighting == "simple":
        with np.errstate(invalid="ignore"):
            mean_p = np.nanmean(probs, axis=0) if np.isnan(probs).any() else probs.mean(axis=0)
    elif weighting == "occupancy":
        occ = shares[:, :, -1:]
        ok = ~np.isnan(probs)
        num = np.where(ok, probs * occ, 0.0).sum(axis=0)
        den = np.where(ok, occ, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_p = np.where(den > 0, num / den, np.nan)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    genders = {m.gender for m in matrices}
    gender = first.gender if len(genders) == 1 else "mixed"
    idx, cols = first.shares.index, first.shares.columns
    return FlowMatrix(gender, "average", pd.DataFrame(shares.mean(axis=0), index=idx, columns=cols),
                      pd.DataFrame(mean_p, index=idx, columns=cols))


@dataclass
class RateCell:
    key: dict
    entry_rate: Optional[float]
    exit_rate: Optional[float]
    weight_mass: float

    @property
    def gross_flow(self) -> Optional[float]:
        if self.entry_rate is None:
            return None
        return self.entry_rate + self.exit_rate


def entry_exit_rates(members_t: Mapping[Hashable, float], members_next: Mapping[Hashable, float],
                     key: Optional[dict] = None) -> RateCell:
    """Entry and exit rates of one cell from weighted membership at t and t+1.

    Each mapping sends a person id to that person's weight in the quarter.
    Rates use the mean of the two occupancies as denominator.
    """
    mass_t = float(sum(members_t.values()))
    mass_n = float(sum(members_next.values()))
    denom = (mass_t + mass_n) / 2.0
    if denom <= 0:
        log.info("cell %s has no occupancy; rates undefined", key)
        return RateCell(key or {}, None, None, 0.0)
    entered = sum(w for p, w in members_next.items() if p not in members_t)
    exited = sum(w for p, w in members_t.items() if p not in members_next)
    return RateCell(key or {}, entered / denom, exited / denom, denom)


RATE_KINDS = {
    "industry": ["industry"],
    "state": ["state"],
    "state_industry": ["state", "industry"],
}


def rate_table(pairs: pd.DataFrame, kind: str = "industry",
               types: Sequence[LaborState] = EMPLOYMENT_TYPES) -> pd.DataFrame:
    """Entry, exit and gross-flow rates per (gender, type, cell, quarter).

    Only persons observed in both quarters enter.  A person belongs to the
    cell at t through (type, industry or state) at t, likewise at t+1;
    persons with no industry are left out of industry cells.
    """
    by = RATE_KINDS[kind]
    type_names = [t.value for t in types]
    p = pairs[pairs["to_state"] != LaborState.ATTRIT.value]
    p = p[p["sex"].isin(list(GENDERS))]
    p = p.assign(gender=p["sex"].map(GENDERS))

    def side(state_col, ind_col, w_col):
        s = p[p[state_col].isin(type_names)]
        if "industry" in by:
            s = s[s[ind_col].notna()]
        return pd.DataFrame({"gender": s["gender"], "period": s["period"], "emp_type": s[state_col],
                             "state": s["state"], "industry": s[ind_col], "w": s[w_col], "pid": s.index})

    keys = ["gender", "emp_type"] + by + ["period"]
    a = side("from_state", "industry_from", "weight")
    b = side("to_state", "industry_to", "weight_next")
    mass_t = a.groupby(keys)["w"].sum().rename("mass_t")
    mass_n = b.groupby(keys)["w"].sum().rename("mass_next")
    stay = a.merge(b, on=keys + ["pid"], suffixes=("", "_n"))
    stay_t = stay.groupby(keys)["w"].sum().rename("stay_t")
    stay_n = stay.groupby(keys)["w_n"].sum().rename("stay_next")
    t = pd.concat([mass_t, mass_n, stay_t, stay_n], axis=1).fillna(0.0).reset_index()
    denom = (t["mass_t"] + t["mass_next"]) / 2.0
    t["entry_rate"] = (t["mass_next"] - t["stay_next"]) / denom
    t["exit_rate"] = (t["mass_t"] - t["stay_t"]) / denom
    t["gross_flow"] = t["entry_rate"] + t["exit_rate"]
    t["weight_mass"] = denom
    t.insert(0, "cell_kind", kind)
    t = t.sort_values(keys, key=lambda c: c.map(quarter_ordinal) if c.name == "period" else c, kind="mergesort")
    cols = ["cell_kind"] + keys + ["mass_t", "mass_next", "entry_rate", "exit_rate", "gross_flow", "weight_mass"]
    return t[cols].reset_index(drop=True)


def cell_filter(cells: pd.DataFrame, thresholds: Mapping[str, float] = DEFAULT_THRESHOLDS) -> pd.DataFrame:
    """Keep cells whose total sampling multiplier exceeds the gender's threshold."""
    limit = cells["gender"].map(dict(thresholds))
    keep = limit.notna() & (cells["weight_mass"] > limit)
    return cells[keep].reset_index(drop=True)


def average_rates(cells: pd.DataFrame) -> pd.DataFrame:
    """Mean entry and exit rate of each cell over quarters."""
    keys = [c for c in cells.columns if c in ("cell_kind", "gender", "emp_type", "state", "industry")]
    out = cells.groupby(keys, sort=True)[["entry_rate", "exit_rate", "gross_flow", "weight_mass"]].mean()
    return out.reset_index()


@dataclass
class EcdfSeries:
    kind: str
    values: np.ndarray
    cumulative: np.ndarray
    n: int
    excluded_zero_before: int = 0
    excluded_missing: int = 0

    def __call__(self, x: float) -> float:
        i = np.searchsorted(self.values, x, side="right")
        return 0.0 if i == 0 else float(self.cumulative[i - 1])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"kind": self.kind, "ratio": self.values, "cumulative": self.cumulative})


ECDF_KINDS = {
    "sal-emp->nwrk": (LaborState.SAL_EMP.value, LaborState.NWRK.value),
    "slf-emp->nwrk": (LaborState.SLF_EMP.value, LaborState.NWRK.value),
}


def weighted_ecdf(kind: str, ratios: np.ndarray, weights: np.ndarray) -> EcdfSeries:
    order = np.argsort(ratios, kind="mergesort")
    r, w = ratios[order], weights[order]
    values, start = np.unique(r, return_index=True)
    cum = np.cumsum(w)
    ends = np.append(start[1:], len(r)) - 1
    total = cum[-1] if len(cum) else 0.0
    cumulative = cum[ends] / total if len(cum) else np.array([])
    if len(cumulative):
        cumulative[-1] = 1.0
    return EcdfSeries(kind, values, cumulative, len(r))


def earnings_ratio_ecdf(pairs: pd.DataFrame) -> dict[str, EcdfSeries]:
    """Weighted ECDF of earnings after / before for moves into ``nwrk``.

    Moves with zero earnings before are excluded and tallied.
    """
    out = {}
    for kind, (src, dst) in ECDF_KINDS.items():
        sub = pairs[(pairs["from_state"] == src) & (pairs["to_state"] == dst)]
        missing = sub["earnings_from"].isna() | sub["earnings_to"].isna()
        sub_ok = sub[~missing]
        zero = sub_ok["earnings_from"] == 0
        use = sub_ok[~zero]
        series = weighted_ecdf(kind, (use["earnings_to"] / use["earnings_from"]).to_numpy(float),
                               use["weight"].to_numpy(float))
        series.excluded_zero_before = int(zero.sum())
        series.excluded_missing = int(missing.sum())
        out[kind] = series
    return out
