"""Per-person visit histories, labour-state recoding and regression features."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .records import HH_COLS, PERSON_COLS, PersonKey
from .schedule import ordinal_quarter, quarter_ordinal


class LaborState(str, enum.Enum):
    SLF_EMP = "slf-emp"
    CSL_EMP = "csl-emp"
    SAL_EMP = "sal-emp"
    SCK_EMP = "sck-emp"
    NWRK = "nwrk"
    UNEMP = "unemp"
    NOPART = "nopart"
    ATTRIT = "attrit"

    def __str__(self) -> str:
        return self.value


STATUS_CODES: dict[LaborState, tuple[int, ...]] = {
    LaborState.SLF_EMP: (11, 12, 21),
    LaborState.CSL_EMP: (41, 42, 51),
    LaborState.SAL_EMP: (31,),
    LaborState.SCK_EMP: (61, 71),
    LaborState.NWRK: (62, 72),
    LaborState.UNEMP: (81, 82),
    LaborState.NOPART: (91, 92, 93, 94, 95, 97, 98, 99),
}
CODE_TO_STATE = {code: state for state, codes in STATUS_CODES.items() for code in codes}

# Row and column order of flow matrices.
FLOW_STATES = [LaborState.SLF_EMP, LaborState.CSL_EMP, LaborState.SAL_EMP, LaborState.UNEMP,
               LaborState.NOPART, LaborState.SCK_EMP, LaborState.NWRK]
EMPLOYMENT_TYPES = [LaborState.SLF_EMP, LaborState.CSL_EMP, LaborState.SAL_EMP]

# "table3": having work but not working (sick or otherwise) counts as employed.
EMPLOYED_STATES = {
    "table3": frozenset({LaborState.SLF_EMP, LaborState.CSL_EMP, LaborState.SAL_EMP,
                         LaborState.SCK_EMP, LaborState.NWRK}),
    "strict": frozenset({LaborState.SLF_EMP, LaborState.CSL_EMP, LaborState.SAL_EMP}),
}

GRADUATE_CODES = frozenset({12, 13})
MARRIED_CODE = 2
CHILD_AGE = 5
WORKING_AGE = (15, 65)


class PanelError(ValueError):
    pass


def recode_labor_state(status_code: int) -> LaborState:
    try:
        return CODE_TO_STATE[int(status_code)]
    except KeyError:
        raise PanelError(f"unknown activity status code {status_code}") from None


def is_employed(state: LaborState, dichotomy: str = "table3") -> bool:
    return state in EMPLOYED_STATES[dichotomy]


@dataclass(frozen=True)
class VisitEntry:
    year_quarter: str
    visit_no: int
    labor_state: LaborState
    age: int
    education: int
    marital: int
    industry: Optional[str]
    earnings: Optional[float]
    weight: float
    has_child: bool
    status_code: int


@dataclass
class PersonHistory:
    key: PersonKey
    sex: int
    state: str
    district: str
    panel_id: Optional[str]
    entries: list[VisitEntry] = field(default_factory=list)
    attrition: Optional[tuple[str, int]] = None  # (quarter, visit) of the first missed visit


def build_histories(frame: pd.DataFrame, window_end: Optional[str] = None) -> list[PersonHistory]:
    """Group clean, single-regime records into one history per person.

    A missing next visit inside the study window (ending ``window_end``)
    marks terminal attrition; records after a gap are discarded.  The
    child flag is set when any co-resident member that quarter is under five.
    """
    if frame.empty:
        return []
    if window_end is None:
        window_end = frame["year_quarter"].max()
    end = quarter_ordinal(window_end)
    f = frame.assign(_q=frame["year_quarter"].map(quarter_ordinal))
    dup = f.duplicated(PERSON_COLS + ["_q"])
    if dup.any():
        row = f[dup].iloc[0]
        raise PanelError(f"person {tuple(row[PERSON_COLS])} observed twice in {row['year_quarter']}")
    unknown = sorted(set(f["status_code"]) - set(CODE_TO_STATE))
    if unknown:
        raise PanelError(f"unknown activity status code {unknown[0]}")
    child = f.groupby(HH_COLS + ["_q"])["age"].transform("min") < CHILD_AGE
    f = f.assign(_child=child).sort_values(PERSON_COLS + ["_q"], kind="mergesort")

    cols = PERSON_COLS + ["_q", "year_quarter", "visit_no", "status_code", "age", "education", "marital",
                          "industry", "earnings", "weight", "_child", "sex", "state", "district", "panel_id"]
    histories: list[PersonHistory] = []
    current: Optional[PersonHistory] = None
    last_q = None
    broken = False
    for row in f[cols].itertuples(index=False, name=None):
        key = PersonKey(*row[:5])
        (q, yq, visit, code, age, edu, marital, industry, earnings, weight, has_child,
         sex, state, district, panel) = row[5:]
        if current is None or key != current.key:
            if current is not None:
                _close(current, last_q, end, broken)
            current = PersonHistory(key, int(sex), state, district, panel)
            histories.append(current)
            last_q, broken = None, False
        elif broken:
            continue
        elif q != last_q + 1:
            broken = True
            continue
        earnings = None if earnings is None or (isinstance(earnings, float) and np.isnan(earnings)) else float(earnings)
        current.entries.append(VisitEntry(
            yq, int(visit), CODE_TO_STATE[int(code)], int(age), int(edu), int(marital),
            industry, earnings, float(weight), bool(has_child), int(code)))
        last_q = q
    _close(current, last_q, end, broken)
    return histories


def _close(h: PersonHistory, last_q: int, end: int, broken: bool) -> None:
    last = h.entries[-1]
    if last.visit_no < 4 and (broken or last_q + 1 <= end):
        h.attrition = (ordinal_quarter(last_q + 1), last.visit_no + 1)


def filter_working_age(histories: Iterable[PersonHistory], bounds: tuple[int, int] = WORKING_AGE) -> list[PersonHistory]:
    """Keep visits with age inside ``bounds`` (inclusive).

    Only the first contiguous run of in-range visits survives, so histories
    stay gap-free; attrition is kept only if the run reaches the last visit.
    """
    lo, hi = bounds
    out = []
    for h in histories:
        run: list[VisitEntry] = []
        started = False
        for e in h.entries:
            if lo <= e.age <= hi:
                run.append(e)
                started = True
            elif started:
                break
        if not run:
            continue
        keep_attrit = h.attrition if run[-1] is h.entries[-1] else None
        out.append(replace(h, entries=run, attrition=keep_attrit))
    return out


@dataclass(frozen=True)
class FeatureRow:
    very_young: int
    young: int
    graduate: int
    has_child: int
    married: int
    e_ratio: float
    en_streak: int
    lost: int
    gained: int
    period: str
    visit_no: int
    employed: int


FEATURE_NAMES = {
    "very_young": "Very.Young", "young": "Young", "graduate": "Graduate", "has_child": "Has.Child",
    "married": "Married", "e_ratio": "E.Ratio", "en_streak": "EN.Streak", "lost": "Lost", "gained": "Gained",
}


def derive_features(history: PersonHistory, dichotomy: str = "table3",
                    graduate_codes=GRADUATE_CODES, married_code: int = MARRIED_CODE) -> list[FeatureRow]:
    """Feature rows for every observed visit except the last one.

    With E employed and N non-employed quarters observed up to visit V
    (so E + N = V), the employment ratio is (E - N) / V; the streak counts
    consecutive visits up to now in the current employment status.
    """
    emp = [is_employed(e.labor_state, dichotomy) for e in history.entries]
    rows = []
    n_emp = n_non = 0
    streak = 0
    for k, entry in enumerate(history.entries[:-1]):
        if emp[k]:
            n_emp += 1
        else:
            n_non += 1
        streak = streak + 1 if k > 0 and emp[k] == emp[k - 1] else 1
        v = k + 1
        nxt = emp[k + 1]
        rows.append(FeatureRow(
            very_young=int(entry.age < 21),
            young=int(21 <= entry.age <= 30),
            graduate=int(entry.education in graduate_codes),
            has_child=int(entry.has_child),
            married=int(entry.marital == married_code),
            e_ratio=(n_emp - n_non) / v,
            en_streak=streak,
            lost=int(emp[k] and not nxt),
            gained=int(not emp[k] and nxt),
            period=entry.year_quarter,
            visit_no=v,
            employed=int(emp[k]),
        ))
    return rows


def features_frame(histories: Sequence[PersonHistory], dichotomy: str = "table3", **kwargs) -> pd.DataFrame:
    records = []
    for h in histories:
        for r in derive_features(h, dichotomy, **kwargs):
            records.append((*h.key, h.sex, *r.__dict__.values()))
    cols = PERSON_COLS + ["sex"] + list(FeatureRow.__dataclass_fields__)
    return pd.DataFrame(records, columns=cols)


HISTORY_COLUMNS = PERSON_COLS + ["sex", "state", "district", "panel_id", "year_quarter", "visit_no",
                                 "labor_state", "status_code", "age", "education", "marital", "industry",
                                 "earnings", "weight", "has_child"]


def histories_frame(histories: Sequence[PersonHistory]) -> pd.DataFrame:
    """Long table, one row per observed visit plus one ``attrit`` row per attrition point."""
    rows = []
    for h in histories:
        head = (*h.key, h.sex, h.state, h.district, h.panel_id)
        for e in h.entries:
            rows.append(head + (e.year_quarter, e.visit_no, e.labor_state.value, e.status_code, e.age,
                                e.education, e.marital, e.industry, e.earnings, e.weight, int(e.has_child)))
        if h.attrition is not None:
            rows.append(head + (h.attrition[0], h.attrition[1], LaborState.ATTRIT.value,
                                None, None, None, None, None, None, None, None))
    out = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    for col in ("status_code", "age", "education", "marital", "has_child"):
        out[col] = out[col].astype("Int64")
    return out


def histories_from_frame(frame: pd.DataFrame) -> list[PersonHistory]:
    """Inverse of :func:`histories_frame`."""
    out: list[PersonHistory] = []
    current = None
    for row in frame[HISTORY_COLUMNS].itertuples(index=False, name=None):
        key = PersonKey(str(row[0]), *(int(x) for x in row[1:5]))
        sex, state, district, panel, yq, visit, ls = row[5:12]
        if current is None or key != current.key:
            current = PersonHistory(key, int(sex), state, district, panel)
            out.append(current)
        if ls == LaborState.ATTRIT.value:
            current.attrition = (yq, int(visit))
            continue
        code, age, edu, marital, industry, earnings, weight, child = row[12:]
        earnings = None if pd.isna(earnings) else float(earnings)
        industry = None if industry is None or (isinstance(industry, float) and np.isnan(industry)) else str(industry)
        current.entries.append(VisitEntry(yq, int(visit), LaborState(ls), int(age), int(edu), int(marital),
                                          industry, earnings, float(weight), bool(child), int(code)))
    return out
