import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from plfs_panel.fsu_match import (FsuMapping, MappingError, apply_mapping, household_signatures, infer_mapping,
                                  match_fsus, score_candidate, score_candidates, validate_mapping)

from conftest import record_frame


def scores_frame(rows):
    return pd.DataFrame(rows, columns=["fsu_old", "fsu_new", "score"]).assign(state="27", district="001")


def test_hash_join_equals_brute_force(small_synth):
    y1, y2 = small_synth.years["2017-18"], small_synth.years["2018-19"]
    s1, s2 = household_signatures(y1, "last"), household_signatures(y2, "first")
    fast = score_candidates(s1, s2).set_index(["fsu_old", "fsu_new"])
    brute = {}
    for (state, district), olds in s1.groupby(["state", "district"]):
        news = s2[(s2["state"] == state) & (s2["district"] == district)]
        for o, n in itertools.product(olds["fsu"].unique(), news["fsu"].unique()):
            c = score_candidate(o, n, s1, s2)
            if c.eligible_households:
                brute[(o, n)] = (c.score, c.eligible_households)
    assert set(brute) == set(fast.index)
    for key, (score, eligible) in brute.items():
        assert (fast.loc[key, "score"], fast.loc[key, "eligible_households"]) == (score, eligible)


def test_recovers_random_permutation(small_synth):
    y1, y2 = small_synth.years["2017-18"], small_synth.years["2018-19"]
    mapping, _ = match_fsus(y1, y2)
    truth = small_synth.truth.mapping()
    churned = set(small_synth.truth.permutation.query("churned == 1")["fsu_old"])
    assert churned
    expected = {o: n for o, n in truth.items() if o not in churned}
    assert mapping.accepted == expected
    assert mapping.conflicts.empty
    assert churned <= set(mapping.unmatched)
    # panels finishing inside year one have nothing to match
    assert set(mapping.unmatched) == set(y1["fsu"]) - set(expected)


def test_identity_permutation():
    from plfs_panel.synth import SynthConfig, generate
    data = generate(SynthConfig(seed=2, districts=2, permutation="identity"))
    mapping, _ = match_fsus(data.years["2017-18"], data.years["2018-19"])
    assert mapping.accepted and all(o == n for o, n in mapping.accepted.items())


def test_signature_uses_last_and_first_visit():
    rows = [dict(quarter=q, visit_no=q, person_no=p, education=7 if q < 4 else 9, hh_size=3)
            for q in (1, 2, 3, 4) for p in (1, 2, 3)]
    sig = household_signatures(record_frame(rows), "last")
    assert sig["signature"].iloc[0].endswith("3=1:1:9")
    first = household_signatures(record_frame(rows), "first")
    assert first["signature"].iloc[0].endswith("3=1:1:7")


def test_multiset_mode_ignores_person_numbers():
    a = record_frame([dict(person_no=1, sex=1), dict(person_no=2, sex=2), dict(person_no=3, sex=1)])
    b = a.assign(person_no=a["person_no"].map({1: 3, 2: 2, 3: 1}))
    b = b.assign(sex=b["person_no"].map({1: 1, 2: 2, 3: 1}))
    assert household_signatures(a)["signature"].iloc[0] == household_signatures(b)["signature"].iloc[0]
    b2 = b.assign(sex=b["person_no"].map({1: 2, 2: 1, 3: 1}))
    assert household_signatures(a)["signature"].iloc[0] != household_signatures(b2)["signature"].iloc[0]
    assert (household_signatures(a, member_mode="multiset")["signature"].iloc[0]
            == household_signatures(b2, member_mode="multiset")["signature"].iloc[0])


def test_small_households_are_not_eligible():
    y1 = record_frame([dict(person_no=p, hh_size=2) for p in (1, 2)])
    y2 = y1.assign(fsu="500001", survey_year="2018-19")
    s = score_candidates(household_signatures(y1), household_signatures(y2, "first"))
    assert s.empty
    mapping = infer_mapping(s, old_fsus=["100001"])
    assert mapping.unmatched == ["100001"]


def test_ties_and_collisions_become_conflicts():
    scores = scores_frame([
        ("A", "x", 3), ("A", "y", 3),          # tie
        ("B", "z", 4), ("C", "z", 2),          # collision on z
        ("D", "w", 5), ("D", "v", 1),          # clean winner
        ("E", "u", 0),                          # below min_score
    ])
    m = infer_mapping(scores, old_fsus=list("ABCDEF"))
    assert m.accepted == {"D": "w"}
    assert dict(zip(m.conflicts["fsu_old"], m.conflicts["reason"])) == {"A": "tie", "B": "collision", "C": "collision"}
    assert m.unmatched == ["E", "F"]
    assert FsuMapping.from_frame(m.to_frame()).accepted == m.accepted


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.sampled_from("vwxyz"), st.integers(0, 4)),
                unique_by=lambda t: t[:2]))
def test_mapping_against_rule_oracle(rows):
    m = infer_mapping(scores_frame(rows), old_fsus=list("ABCDE"))
    best = {}
    for o, n, s in rows:
        if s >= 1:
            best.setdefault(o, []).append((s, n))
    winner = {}
    for o, cands in best.items():
        top = max(s for s, _ in cands)
        tops = [n for s, n in cands if s == top]
        if len(tops) == 1:
            winner[o] = tops[0]
    claims = {}
    for o, n in winner.items():
        claims.setdefault(n, []).append(o)
    expected = {o: n for o, n in winner.items() if len(claims[n]) == 1}
    assert m.accepted == expected
    assert len(set(m.accepted.values())) == len(m.accepted)
    assert set(m.unmatched) == set("ABCDE") - set(best)


def test_apply_mapping_and_validation(small_synth):
    y1, y2 = small_synth.years["2017-18"], small_synth.years["2018-19"]
    mapping, _ = match_fsus(y1, y2)
    rewritten, attrited = apply_mapping(y1, mapping)
    assert set(rewritten["fsu"]) & set(mapping.accepted) <= set(mapping.accepted.values())
    assert set(attrited["fsu"]) == set(mapping.unmatched) & set(y1["fsu"])
    check = validate_mapping(rewritten, y2)
    assert check.linked_households > 0 and check.failures == 0
    with pytest.raises(MappingError):
        apply_mapping(y1, FsuMapping())


def test_non_injective_mapping_rejected():
    with pytest.raises(MappingError):
        FsuMapping(accepted={"A": "x", "B": "x"})
