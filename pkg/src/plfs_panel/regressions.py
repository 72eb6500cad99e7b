"""The two pooled models: gross-flow rate OLS over cells, and job loss/gain logits."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import pandas as pd

from .design import DesignSpec, build_design
from .flows import GENDERS
from .models import FitError, RegressionResult, average_marginal_effects, logit_fit, ols_fit
from .panel import FEATURE_NAMES
from .schedule import quarter_ordinal

log = logging.getLogger(__name__)

BASELINE_STATE = "27"  # Maharashtra
LOGIT_BINARY = ["Very.Young", "Young", "Graduate", "Has.Child", "Married"]
LOGIT_CONTINUOUS = ["E.Ratio"]
OUTCOMES = {"Lost": 1, "Gained": 0}  # outcome -> employment status of the rows it is fitted on


def gross_flow_spec(baseline_state: str = BASELINE_STATE) -> DesignSpec:
    """No intercept; one baseline state per gender and a dropped first period keep the design full rank."""
    return DesignSpec(
        response="gross_flow",
        terms=[("industry", "emp_type", "gender"), ("state", "gender"), ("period",)],
        categorical=frozenset({"industry", "emp_type", "gender", "state", "period"}),
        baselines=[{"state": baseline_state, "gender": g} for g in GENDERS.values()],
        drop_first=frozenset({"period"}),
        intercept=False,
    )


def _ordered_periods(frame: pd.DataFrame) -> pd.DataFrame:
    # Quarter labels sort correctly as strings, but be explicit about it.
    return frame.sort_values("period", key=lambda c: c.map(quarter_ordinal), kind="mergesort")


def fit_gross_flow(cells: pd.DataFrame, baseline_state: str = BASELINE_STATE, **kwargs) -> RegressionResult:
    """OLS of the gross-flow rate on filtered (state, industry, type, gender, quarter) cells."""
    if cells.empty:
        raise FitError("no cells survive the mass filter")
    data = _ordered_periods(cells).assign(state=cells["state"].astype(str), industry=cells["industry"].astype(str))
    for gender in data["gender"].unique():
        if not (data.loc[data["gender"] == gender, "state"] == baseline_state).any():
            raise FitError(f"baseline state {baseline_state} has no {gender} cells; choose another baseline")
    return ols_fit(build_design(gross_flow_spec(baseline_state), data), **kwargs)


def logit_spec(outcome: str) -> DesignSpec:
    terms = [(c,) for c in LOGIT_BINARY + LOGIT_CONTINUOUS] + [("EN.Streak",), ("period",), ("visit",)]
    return DesignSpec(
        response=outcome,
        terms=terms,
        categorical=frozenset({"EN.Streak", "period", "visit"}),
        drop_first=frozenset({"EN.Streak", "period", "visit"}),
    )


def logit_data(features: pd.DataFrame) -> pd.DataFrame:
    """Rename feature columns to regressor labels such as ``Very.Young``."""
    return features.rename(columns=FEATURE_NAMES).rename(columns={"visit_no": "visit"})


@dataclass
class ModelOutcome:
    gender: str
    outcome: str
    result: Optional[RegressionResult]
    ame: Optional[pd.DataFrame]
    error: Optional[str] = None


def _fit_one(data: pd.DataFrame, sex: int, gender: str, outcome: str, employed: int, kwargs) -> ModelOutcome:
    sub = _ordered_periods(data[(data["sex"] == sex) & (data["employed"] == employed)])
    try:
        if sub.empty:
            raise FitError("no observations")
        res = logit_fit(build_design(logit_spec(outcome), sub), **kwargs)
        return ModelOutcome(gender, outcome, res, average_marginal_effects(res, continuous=LOGIT_CONTINUOUS))
    except FitError as exc:
        log.warning("%s %s model not fitted: %s", gender, outcome, exc)
        return ModelOutcome(gender, outcome, None, None, str(exc))


def fit_transition_models(features: pd.DataFrame, threads: int = 1, **kwargs) -> list[ModelOutcome]:
    """Lost on employed and Gained on non-employed person-quarters, separately by gender.

    A model that cannot be fitted is reported with its error instead of
    stopping the others.  The four fits are independent and may run in
    parallel; results come back in a fixed order.
    """
    data = logit_data(features)
    jobs = [(sex, gender, outcome, employed) for sex, gender in GENDERS.items()
            for outcome, employed in OUTCOMES.items()]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda j: _fit_one(data, *j, kwargs), jobs))


def coefficient_table(models: list[ModelOutcome]) -> pd.DataFrame:
    parts = []
    for m in models:
        if m.result is None:
            parts.append(pd.DataFrame([{"gender": m.gender, "outcome": m.outcome, "status": "failed", "error": m.error}]))
            continue
        t = m.result.table()
        t.insert(0, "outcome", m.outcome)
        t.insert(0, "gender", m.gender)
        t["status"] = "ok"
        t["n"] = m.result.nobs
        parts.append(t)
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame()


def ame_table(models: list[ModelOutcome]) -> pd.DataFrame:
    parts = []
    for m in models:
        if m.ame is None:
            continue
        t = m.ame.copy()
        t.insert(0, "outcome", m.outcome)
        t.insert(0, "gender", m.gender)
        parts.append(t)
    return pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(
        columns=["gender", "outcome", "term", "ame", "se", "p", "stars", "kind"])
