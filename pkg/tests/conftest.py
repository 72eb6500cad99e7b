from pathlib import Path

import pandas as pd
import pytest

from plfs_panel.records import canonicalize
from plfs_panel.schema import load_schema
from plfs_panel.synth import SynthConfig, generate

SCHEMA_PATH = Path(__file__).resolve().parents[1] / "src" / "plfs_panel" / "data" / "synthetic_schema.ini"

BASE = dict(
    survey_year="2017-18", quarter=1, visit_no=1, panel_id="P11", state="27", district="001",
    fsu="100001", sub_block=1, stratum2=1, hh_no=1, person_no=1, sex=1, age=30, relation_to_head=1,
    marital=2, education=7, religion=1, social_group=1, hh_size=3, status_code=31, industry="46",
    earnings=10000.0, weight=100.0,
)


def record_frame(rows):
    """Canonical record table from partial row dicts layered over a default person-visit."""
    return canonicalize(pd.DataFrame([{**BASE, **r} for r in rows]))


@pytest.fixture(scope="session")
def schema():
    return load_schema(SCHEMA_PATH)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(seed=11, districts=3, fsus_per_district=16, churn_fraction=0.1))


def brute_force_rejections(frame):
    """Household keys failing any rule, by scanning every pair of a household's records."""
    from plfs_panel.records import HH_COLS, HouseholdKey

    cols = ["person_no", "religion", "social_group", "hh_size", "sex", "relation_to_head", "age"]
    bad = set()
    for key, hh in frame.groupby(HH_COLS):
        rows = list(hh[cols].itertuples(index=False))
        for i, a in enumerate(rows):
            for b in rows[i + 1:]:
                if (a.religion, a.social_group) != (b.religion, b.social_group) or abs(a.hh_size - b.hh_size) > 3:
                    bad.add(HouseholdKey(*key))
                elif a.person_no == b.person_no and (
                        (a.sex, a.relation_to_head) != (b.sex, b.relation_to_head) or abs(a.age - b.age) > 4):
                    bad.add(HouseholdKey(*key))
    return bad


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL/SKIP line per acceptance criterion for the terminal summary."""
    number = request.node.get_closest_marker("criterion").args[0]
    yield number
    rep = getattr(request.node, "rep_call", None)
    if rep is None or rep.skipped:
        status = "SKIP"
    else:
        status = "PASS" if rep.passed else "FAIL"
    line = f"criterion {number:>2}: {status}  {request.node.name}"
    _CRITERIA[number] = line
    print(line)


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
