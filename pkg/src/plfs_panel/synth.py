"""Synthetic two-year rotating-panel microdata with a known ground truth.

Every household draws from its own random stream keyed by the master seed
and its indices, so changing one household never perturbs another and the
output does not depend on the worker count.
"""

from __future__ import annotations

import bisect
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .artifacts import read_table, write_table
from .design import DesignSpec, build_design
from .panel import FLOW_STATES, STATUS_CODES, LaborState
from .records import CANONICAL_COLUMNS, HH_COLS, PERSON_COLS, canonicalize, write_visit_frame
from .schedule import DEFAULT_SCHEDULE, PanelSchedule, calendar_to_cycle, quarter_ordinal
from .schema import SchemaConfig

log = logging.getLogger(__name__)

ORIGINS = [s.value for s in FLOW_STATES]
DESTINATIONS = ORIGINS + [LaborState.ATTRIT.value]
GENDER_SEX = {"Male": 1, "Female": 2}

# Stream tags keep the keyed generators of different entity kinds apart.
_TAG_HH, _TAG_PERM, _TAG_CHURN, _TAG_CORRUPT, _TAG_FRESH = 1, 3, 4, 5, 6
_OLD_BASE, _NEW_BASE = 100000, 500000

WORKER_STATES = {LaborState.SLF_EMP, LaborState.CSL_EMP, LaborState.SAL_EMP, LaborState.SCK_EMP, LaborState.NWRK}
PAID_STATES = {LaborState.SLF_EMP, LaborState.CSL_EMP, LaborState.SAL_EMP}

DEFAULT_STATES = ["27", "09", "19", "33", "29", "24", "08", "10"]
DEFAULT_INDUSTRIES = ["01", "10", "14", "41", "46", "47", "49", "56", "84", "85"]

LOGIT_TRUTH = {
    "Intercept": -2.0, "Very.Young": 0.4, "Young": 0.2, "Graduate": -0.5, "Has.Child": 0.3,
    "Married": -0.4, "E.Ratio": -0.8, "EN.Streak=2": -0.3, "EN.Streak=3": -0.6,
}


class SynthError(ValueError):
    pass


def sticky_kernel(stay: float = 0.9, attrit: float = 0.0) -> pd.DataFrame:
    """Kernel staying put with probability ``stay`` and otherwise moving uniformly."""
    k = len(ORIGINS)
    move = (1.0 - stay - attrit) / (k - 1)
    m = np.full((k, k), move)
    np.fill_diagonal(m, stay)
    out = pd.DataFrame(m, index=ORIGINS, columns=ORIGINS)
    out[LaborState.ATTRIT.value] = attrit
    return out


def _default_kernels():
    return {"Male": sticky_kernel(0.9), "Female": sticky_kernel(0.92)}


def _default_initial():
    return {
        "Male": dict(zip(ORIGINS, [0.3, 0.15, 0.2, 0.05, 0.2, 0.05, 0.05])),
        "Female": dict(zip(ORIGINS, [0.1, 0.05, 0.1, 0.05, 0.6, 0.05, 0.05])),
    }


@dataclass
class SynthConfig:
    seed: int = 0
    districts: int = 10
    fsus_per_district: int = 16
    households_per_fsu: int = 8
    household_size: tuple[int, int] = (1, 6)
    min_stable: int = 3  # households per FSU of size >= 3 that never drop out
    permutation: str = "random"  # or "identity"
    churn_fraction: float = 0.0
    dropout: float = 0.05  # per revisit, terminal, households beyond min_stable only
    kernel: dict = field(default_factory=_default_kernels)
    initial: dict = field(default_factory=_default_initial)
    weight_range: tuple[float, float] = (200.0, 20000.0)
    weight_jitter: float = 0.1
    states: Sequence[str] = tuple(DEFAULT_STATES)
    industries: Sequence[str] = tuple(DEFAULT_INDUSTRIES)
    nwrk_earnings_ratios: Sequence[float] = (0.0, 0.5, 1.0)
    zero_earnings_prob: float = 0.02
    years: tuple[str, str] = ("2017-18", "2018-19")
    panels: Sequence[str] = ("P11", "P12", "P13", "P14", "P15", "P16", "P17", "P18")
    miscoded_years: frozenset = frozenset({"2017-18"})
    logit_coefficients: dict = field(default_factory=lambda: dict(LOGIT_TRUTH))

    def check(self) -> None:
        if min(self.districts, self.fsus_per_district, self.households_per_fsu) <= 0:
            raise SynthError("districts, FSUs and households must all be positive")
        if self.districts * self.fsus_per_district >= _NEW_BASE - _OLD_BASE:
            raise SynthError("too many FSUs for the six-digit identifier space")
        lo, hi = self.household_size
        if not 1 <= lo <= hi or hi < 3 or hi > 30:
            raise SynthError("household_size must satisfy 1 <= lo <= hi, 3 <= hi <= 30")
        if not 0 <= self.min_stable <= self.households_per_fsu:
            raise SynthError("min_stable must lie between 0 and households_per_fsu")
        if self.households_per_fsu > 12:
            raise SynthError("at most 12 households fit the slot layout")
        if self.permutation not in ("random", "identity"):
            raise SynthError("permutation must be 'random' or 'identity'")
        for name in ("churn_fraction", "dropout", "zero_earnings_prob", "weight_jitter"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthError(f"{name} must lie in [0, 1]")
        if not 0 < self.weight_range[0] <= self.weight_range[1]:
            raise SynthError("weight_range must be positive and ordered")
        for gender in GENDER_SEX:
            k = self.kernel[gender].reindex(index=ORIGINS, columns=DESTINATIONS).fillna(0.0)
            if (k.to_numpy() < 0).any() or not np.allclose(k.sum(axis=1), 1.0, atol=1e-12):
                raise SynthError(f"{gender} kernel rows must be probabilities summing to 1")
            init = np.array([self.initial[gender].get(s, 0.0) for s in ORIGINS])
            if (init < 0).any() or not np.isclose(init.sum(), 1.0):
                raise SynthError(f"{gender} initial distribution must sum to 1")
        unknown = set(self.panels) - set(DEFAULT_SCHEDULE.labels())
        if unknown:
            raise SynthError(f"panels outside the schedule: {sorted(unknown)}")


@dataclass
class GroundTruth:
    permutation: pd.DataFrame
    paths: pd.DataFrame
    kernel: pd.DataFrame
    coefficients: pd.DataFrame
    corruptions: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=CORRUPTION_COLUMNS))

    FILES = ("permutation", "paths", "kernel", "coefficients", "corruptions")

    def mapping(self, crossing_only: bool = True) -> dict[str, str]:
        p = self.permutation
        if crossing_only:
            p = p[p["crosses_years"] == 1]
        return dict(zip(p["fsu_old"], p["fsu_new"]))

    def write(self, directory, meta: Optional[Mapping[str, object]] = None) -> list[Path]:
        return [write_table(getattr(self, name), Path(directory) / f"truth_{name}.tsv", meta)
                for name in self.FILES]

    @classmethod
    def load(cls, directory) -> "GroundTruth":
        return cls(**{name: read_table(Path(directory) / f"truth_{name}.tsv") for name in cls.FILES})


@dataclass
class SynthData:
    years: dict[str, pd.DataFrame]  # survey year -> canonical records, quarters already correct
    truth: GroundTruth
    config: SynthConfig


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _pick(cdf: list, u: float) -> int:
    return min(bisect.bisect_right(cdf, u), len(cdf) - 1)


def _cdfs(cfg: SynthConfig) -> dict:
    """Cumulative initial and transition distributions per gender."""
    out = {}
    for gender in GENDER_SEX:
        init = np.array([cfg.initial[gender].get(s, 0.0) for s in ORIGINS])
        kern = cfg.kernel[gender].reindex(index=ORIGINS, columns=DESTINATIONS).fillna(0.0).to_numpy()
        out[gender] = (np.cumsum(init / init.sum()).tolist(),
                       np.cumsum(kern / kern.sum(axis=1, keepdims=True), axis=1).tolist())
    return out


class _Fsu:
    """Identity and panel of one first-stage unit."""

    def __init__(self, cfg: SynthConfig, k: int, new_index: int, churned: bool):
        self.k = k
        self.d = k // cfg.fsus_per_district
        self.state = cfg.states[self.d % len(cfg.states)]
        self.district = f"{self.d + 1:03d}"
        self.panel = cfg.panels[k % len(cfg.panels)]
        self.old_id = f"{_OLD_BASE + k}"
        self.new_id = self.old_id if cfg.permutation == "identity" else f"{_NEW_BASE + new_index}"
        self.churned = churned
        self.visits = []
        for yq, v in DEFAULT_SCHEDULE.panels[self.panel]:
            year, q = calendar_to_cycle(yq)
            if year in cfg.years:
                self.visits.append((yq, v, year, q))
        years = {v[2] for v in self.visits}
        self.crosses = len(years) == 2

    def fsu_id(self, year: str, cfg: SynthConfig) -> str:
        return self.old_id if year == cfg.years[0] else self.new_id


def _simulate_household(cfg: SynthConfig, fsu: _Fsu, h: int, fresh: bool, cdfs: dict):
    """Rows for one household over its FSU's visits, plus its true state paths."""
    tag = _TAG_FRESH if fresh else _TAG_HH
    rng = np.random.default_rng([cfg.seed, tag, fsu.k, h])
    lo, hi = cfg.household_size
    stable = h < cfg.min_stable
    size = int(rng.integers(3, hi + 1)) if stable else int(rng.integers(lo, hi + 1))
    religion = (1, 1, 1, 2, 3)[int(rng.integers(5))]
    social = int(rng.integers(1, 5))
    weight = _log_uniform(rng, *cfg.weight_range)
    n = len(fsu.visits)
    jitter = np.exp(rng.uniform(-cfg.weight_jitter, cfg.weight_jitter, size=n))
    drop_draws = rng.random(n)
    present = n
    if not stable:
        for i in range(1, n):
            if drop_draws[i] < cfg.dropout:
                present = i
                break

    sub_block, stratum2, hh_no = 1 + h % 2, 1 + (h // 2) % 3, h + 1
    members = []
    head_sex, head_age = 1, 30
    industries = list(cfg.industries)
    ratios = list(cfg.nwrk_earnings_ratios)
    uniforms = rng.random((size, 10 + 3 * n)).tolist()
    normals = rng.standard_normal((size, n)).tolist()
    for p in range(size):
        u, z = uniforms[p], normals[p]
        if p == 0:
            sex, rel = 1 + int(u[0] < 0.5), 1
            age = 25 + int(u[1] * 46)
            head_sex, head_age = sex, age
        elif p == 1:
            sex, rel = 3 - head_sex, 2
            age = min(max(head_age - 5 + int(u[1] * 11), 18), 80)
        else:
            sex, rel = 1 + int(u[0] < 0.5), (5, 5, 5, 7, 9)[int(u[2] * 5)]
            age = int(u[1] * max(1, head_age - 17))
        if rel in (1, 2):
            marital = 2
        else:
            marital = 1 if age < 18 else 1 + int(u[3] < 0.5)
        edu = 1 if age < 5 else 1 + int(u[4] * 13)
        birthday = int(u[5] * 4)
        industry = industries[int(u[6] * len(industries))]
        base_earn = 0.0 if u[7] < cfg.zero_earnings_prob else float(round(3000 * math.exp(u[8] * math.log(40000 / 3000))))
        gender = "Male" if sex == 1 else "Female"
        init_cdf, kern_cdf = cdfs[gender]
        path = [ORIGINS[_pick(init_cdf, u[9])]]
        for i in range(1, n):
            nxt = DESTINATIONS[_pick(kern_cdf[ORIGINS.index(path[-1])], u[9 + i])]
            path.append(nxt)
            if nxt == LaborState.ATTRIT.value:
                break
        visits = []
        for i, ls in enumerate(path):
            st = LaborState(ls)
            if st is LaborState.ATTRIT:
                visits.append((st, None, None, None))
                continue
            codes = STATUS_CODES[st]
            code = codes[int(u[9 + n + i] * len(codes))]
            if st in PAID_STATES:
                earn = float(round(base_earn * math.exp(0.05 * z[i])))
            elif st is LaborState.SCK_EMP:
                earn = base_earn
            elif st is LaborState.NWRK:
                earn = float(round(base_earn * ratios[int(u[9 + 2 * n + i] * len(ratios))]))
            else:
                earn = None
            visits.append((st, code, industry if st in WORKER_STATES else None, earn))
        members.append(dict(person_no=p + 1, sex=sex, rel=rel, age=age, marital=marital, edu=edu,
                            birthday=birthday, visits=visits))

    rows, paths = [], []
    for i, (yq, v, year, q) in enumerate(fsu.visits):
        emit = (not fsu.churned) or (year == cfg.years[0]) != fresh
        fid = fsu.fsu_id(year, cfg)
        w = round(weight * jitter[i], 2)
        for m in members:
            if i >= len(m["visits"]):
                continue
            st, code, industry, earn = m["visits"][i]
            if not emit:
                continue
            base = (fsu.k, fid, yq, v, sub_block, stratum2, hh_no, m["person_no"], m["sex"])
            if i >= present:
                if i == present:
                    paths.append(base + ("dropout", int(fresh)))
                continue
            paths.append(base + (st.value, int(fresh)))
            if st is LaborState.ATTRIT:
                continue
            age = m["age"] + (1 if 0 < m["birthday"] <= i else 0)
            rows.append((year, q, yq, v, fsu.panel, fsu.state, fsu.district, fid, sub_block, stratum2, hh_no,
                         m["person_no"], m["sex"], age, m["rel"], m["marital"], m["edu"], religion, social,
                         size, code, industry, earn, w, ""))
    return rows, paths


PATH_COLUMNS = ["fsu_index", "fsu", "year_quarter", "visit_no", "sub_block", "stratum2", "hh_no", "person_no",
                "sex", "labor_state", "fresh"]
PERMUTATION_COLUMNS = ["fsu_index", "state", "district", "panel_id", "fsu_old", "fsu_new", "crosses_years", "churned"]


def _district(cfg: SynthConfig, d: int, churned: set, cdfs: dict):
    F = cfg.fsus_per_district
    perm = np.random.default_rng([cfg.seed, _TAG_PERM, d]).permutation(F)
    rows, paths, perm_rows = [], [], []
    for j in range(F):
        k = d * F + j
        fsu = _Fsu(cfg, k, d * F + int(perm[j]), k in churned)
        if fsu.visits:
            perm_rows.append((k, fsu.state, fsu.district, fsu.panel, fsu.old_id, fsu.new_id,
                              int(fsu.crosses), int(fsu.churned)))
        for h in range(cfg.households_per_fsu):
            r, p = _simulate_household(cfg, fsu, h, False, cdfs)
            rows += r
            paths += p
            if fsu.churned:
                r, p = _simulate_household(cfg, fsu, h, True, cdfs)
                rows += r
                paths += p
    return rows, paths, perm_rows


def _churned_fsus(cfg: SynthConfig) -> set:
    crossing = [k for k in range(cfg.districts * cfg.fsus_per_district)
                if _Fsu(cfg, k, k, False).crosses]
    n = int(round(cfg.churn_fraction * len(crossing)))
    if n == 0:
        return set()
    rng = np.random.default_rng([cfg.seed, _TAG_CHURN])
    return set(int(x) for x in rng.choice(crossing, size=n, replace=False))


def generate(cfg: SynthConfig, threads: int = 1) -> SynthData:
    """Simulate both survey years; output is identical for any ``threads``."""
    cfg.check()
    churned = _churned_fsus(cfg)
    cdfs = _cdfs(cfg)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(lambda d: _district(cfg, d, churned, cdfs), range(cfg.districts)))
    rows = [r for part in parts for r in part[0]]
    if not rows:
        raise SynthError("configuration produced no records")
    frame = pd.DataFrame(rows, columns=CANONICAL_COLUMNS)
    frame = canonicalize(frame)
    years = {}
    for year in cfg.years:
        sub = frame[frame["survey_year"] == year]
        years[year] = sub.sort_values(["quarter", "visit_no", "fsu", "sub_block", "stratum2", "hh_no", "person_no"],
                                      kind="mergesort").reset_index(drop=True)
    paths = pd.DataFrame([p for part in parts for p in part[1]], columns=PATH_COLUMNS)
    perm = pd.DataFrame([p for part in parts for p in part[2]], columns=PERMUTATION_COLUMNS)
    kernel = pd.concat([
        cfg.kernel[g].reindex(index=ORIGINS, columns=DESTINATIONS).fillna(0.0)
        .rename_axis("origin").reset_index().melt(id_vars="origin", var_name="destination", value_name="probability")
        .assign(gender=g)[["gender", "origin", "destination", "probability"]]
        for g in GENDER_SEX
    ], ignore_index=True)
    coefs = pd.DataFrame(list(cfg.logit_coefficients.items()), columns=["term", "value"])
    truth = GroundTruth(perm, paths, kernel, coefs)
    log.info("synthetic data: %d records, %d FSUs, %d churned", len(frame), len(perm), len(churned))
    return SynthData(years, truth, cfg)


def write_synth_files(data: SynthData, directory, schema: SchemaConfig) -> dict[str, Path]:
    """First-visit and revisit files per year; miscoded years get revisit quarters one too high."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for i, (year, frame) in enumerate(data.years.items(), start=1):
        for kind, mask in (("first", frame["visit_no"] == 1), ("revisit", frame["visit_no"] > 1)):
            part = frame[mask]
            if kind == "revisit" and year in data.config.miscoded_years:
                part = part.assign(quarter=part["quarter"] + 1)
            path = directory / f"year{i}_{kind}.txt"
            with open(path, "wb") as fh:
                write_visit_frame(part, schema, fh)
            out[f"year{i}_{kind}"] = path
    return out


# Corruption of household records so that the validator's rules fire.

CORRUPTION_KINDS = ("religion", "size_jump", "sex_change", "age_drift", "size_boundary", "age_boundary")
REJECTED_KINDS = frozenset({"religion", "size_jump", "sex_change", "age_drift"})
CORRUPTION_COLUMNS = HH_COLS + ["kind", "person_no", "detail", "expect_rejected"]


@dataclass
class CorruptionSpec:
    religion: int = 0
    size_jump: int = 0
    sex_change: int = 0
    age_drift: int = 0
    size_boundary: int = 0
    age_boundary: int = 0
    size_tolerance: int = 3
    age_tolerance: int = 4

    @property
    def total(self) -> int:
        return sum(getattr(self, k) for k in CORRUPTION_KINDS)


def corrupt(frame: pd.DataFrame, spec: CorruptionSpec, seed: int,
            fsus: Optional[Sequence[str]] = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Inject rule violations into distinct households; returns (records, injection log).

    Only households with some member seen in two or more quarters are
    eligible (optionally restricted to ``fsus``).  Each change lands on
    the household's last quarter.  Boundary kinds move size by exactly the
    size tolerance, or age by exactly the age tolerance, and must survive.
    """
    if any(getattr(spec, k) < 0 for k in CORRUPTION_KINDS):
        raise SynthError("corruption counts must be non-negative")
    out = frame.copy()
    if spec.total == 0:
        return out, pd.DataFrame(columns=CORRUPTION_COLUMNS)
    f = out if fsus is None else out[out["fsu"].isin(list(fsus))]
    seen = f.groupby(PERSON_COLS)["year_quarter"].nunique()
    multi = seen[seen >= 2].reset_index()[PERSON_COLS]
    households = multi[HH_COLS].drop_duplicates().sort_values(HH_COLS).reset_index(drop=True)
    if spec.total > len(households):
        raise SynthError(f"{spec.total} corruptions requested but only {len(households)} eligible households")
    rng = np.random.default_rng([seed, _TAG_CORRUPT])
    chosen = households.iloc[np.sort(rng.choice(len(households), size=spec.total, replace=False))]
    order = rng.permutation(spec.total)
    kinds = [k for k in CORRUPTION_KINDS for _ in range(getattr(spec, k))]
    hh_rows = {key: idx for key, idx in out.groupby(HH_COLS).groups.items()}
    log_rows = []
    for slot, key in zip(order, chosen.itertuples(index=False, name=None)):
        kind = kinds[slot]
        idx = hh_rows[key]
        rows = out.loc[idx]
        last_q = max(rows["year_quarter"], key=quarter_ordinal)
        last = rows.index[rows["year_quarter"] == last_q]
        person = None
        if kind == "religion":
            new = int(rows.loc[last, "religion"].iloc[0]) % 3 + 1
            out.loc[last, "religion"] = new
            detail = f"religion->{new}"
        elif kind in ("size_jump", "size_boundary"):
            others = rows.loc[rows.index.difference(last), "hh_size"]
            step = spec.size_tolerance + (1 if kind == "size_jump" else 0)
            new = int(others.min()) + step
            out.loc[last, "hh_size"] = new
            detail = f"hh_size->{new}"
        else:
            cands = multi[(multi[HH_COLS].apply(tuple, axis=1)) == key]["person_no"].tolist()
            person = int(cands[int(rng.integers(len(cands)))])
            prow = rows[rows["person_no"] == person]
            plast_q = max(prow["year_quarter"], key=quarter_ordinal)
            target = prow.index[prow["year_quarter"] == plast_q]
            if kind == "sex_change":
                new = 3 - int(prow.loc[target, "sex"].iloc[0])
                out.loc[target, "sex"] = new
                detail = f"sex->{new}"
            else:
                others = prow.loc[prow.index.difference(target), "age"]
                step = spec.age_tolerance + (1 if kind == "age_drift" else 0)
                new = int(others.min()) + step
                out.loc[target, "age"] = new
                detail = f"age->{new}"
        log_rows.append((*key, kind, person, detail, int(kind in REJECTED_KINDS)))
    log_frame = pd.DataFrame(log_rows, columns=CORRUPTION_COLUMNS)
    log_frame["person_no"] = log_frame["person_no"].astype("Int64")
    return out, log_frame.sort_values(HH_COLS, kind="mergesort").reset_index(drop=True)


# Logit samples drawn from known coefficients.

LOGIT_SAMPLE_SPEC = DesignSpec(
    response="y",
    terms=[("Very.Young",), ("Young",), ("Graduate",), ("Has.Child",), ("Married",), ("E.Ratio",), ("EN.Streak",)],
    categorical=frozenset({"EN.Streak"}),
    drop_first=frozenset({"EN.Streak"}),
)


def simulate_logit_sample(coefficients: Mapping[str, float], n: int, seed: int) -> pd.DataFrame:
    """Regressors shaped like the panel features and an outcome drawn from the logit model."""
    if n <= 0:
        raise SynthError("sample size must be positive")
    rng = np.random.default_rng([seed, 7])
    age_group = rng.choice(3, size=n, p=[0.2, 0.3, 0.5])
    visits = rng.integers(1, 4, size=n)
    employed_q = rng.binomial(visits, 0.6)
    streak = 1 + (rng.random(n) * visits).astype(int)
    data = pd.DataFrame({
        "Very.Young": (age_group == 0).astype(int),
        "Young": (age_group == 1).astype(int),
        "Graduate": rng.binomial(1, 0.2, n),
        "Has.Child": rng.binomial(1, 0.35, n),
        "Married": rng.binomial(1, 0.6, n),
        "E.Ratio": (2 * employed_q - visits) / visits,
        "EN.Streak": streak,
        "y": 0,
    })
    design = build_design(LOGIT_SAMPLE_SPEC, data)
    missing = set(design.names) - set(coefficients)
    if missing:
        raise SynthError(f"no coefficient for {sorted(missing)}")
    beta = np.array([coefficients[name] for name in design.names])
    p = 1.0 / (1.0 + np.exp(-(design.X @ beta)))
    data["y"] = (rng.random(n) < p).astype(int)
    return data
