import numpy as np
import pandas as pd
import pytest

from plfs_panel.records import HH_COLS
from plfs_panel.synth import (CorruptionSpec, GroundTruth, SynthConfig, SynthError, corrupt, generate,
                              sticky_kernel)
from plfs_panel.validate import validate_households


def small(**kw):
    return SynthConfig(**{"seed": 5, "districts": 2, "fsus_per_district": 8, **kw})


def test_deterministic_and_thread_invariant():
    a = generate(small())
    b = generate(small(), threads=4)
    for year in a.years:
        pd.testing.assert_frame_equal(a.years[year], b.years[year])
    pd.testing.assert_frame_equal(a.truth.paths, b.truth.paths)
    c = generate(small(seed=6))
    assert not c.years["2017-18"].equals(a.years["2017-18"])


def test_adding_districts_leaves_existing_ones_unchanged():
    a = generate(small())
    b = generate(small(districts=3))
    for year in a.years:
        sub = b.years[year][b.years[year]["fsu"].isin(set(a.years[year]["fsu"]))].reset_index(drop=True)
        pd.testing.assert_frame_equal(a.years[year], sub)


def test_permutation_within_district():
    data = generate(small())
    p = data.truth.permutation
    assert p["fsu_new"].is_unique
    for _, g in p.groupby("district"):
        idx = g["fsu_new"].astype(int) - 500000
        assert set(idx // 8) == {int(g["fsu_index"].iloc[0]) // 8}
    ident = generate(small(permutation="identity")).truth.permutation
    assert (ident["fsu_old"] == ident["fsu_new"]).all()


def test_generated_records_pass_validation():
    data = generate(small())
    for frame in data.years.values():
        _, report = validate_households(frame)
        assert report.households_removed == 0


def test_absorbing_kernel_keeps_states():
    kernel = {"Male": sticky_kernel(1.0), "Female": sticky_kernel(1.0)}
    data = generate(small(kernel=kernel))
    paths = data.truth.paths
    paths = paths[~paths["labor_state"].isin(["attrit", "dropout"])]
    per_person = paths.groupby(["fsu_index", "sub_block", "stratum2", "hh_no", "person_no", "fresh"])["labor_state"]
    assert (per_person.nunique() == 1).all()


def test_invalid_config():
    with pytest.raises(SynthError):
        generate(small(districts=0))
    bad = sticky_kernel(0.9)
    bad.iloc[0, 0] = 0.5
    with pytest.raises(SynthError):
        generate(small(kernel={"Male": bad, "Female": bad}))


def test_zero_corruption_is_identity():
    frame = generate(small()).years["2017-18"]
    out, log = corrupt(frame, CorruptionSpec(), seed=1)
    pd.testing.assert_frame_equal(out, frame)
    assert log.empty


def test_corruptions_hit_the_right_households():
    frame = generate(small()).years["2017-18"]
    spec = CorruptionSpec(religion=2, size_jump=2, sex_change=2, age_drift=2, size_boundary=2, age_boundary=2)
    out, log = corrupt(frame, spec, seed=3)
    assert len(log) == 12 and not log.duplicated(HH_COLS).any()
    _, report = validate_households(out)
    expected = {tuple(r) for r in log.loc[log["expect_rejected"] == 1, HH_COLS].itertuples(index=False)}
    assert {tuple(k) for k in report.household_keys} == expected


def test_too_many_corruptions():
    frame = generate(small(districts=1, fsus_per_district=1)).years["2017-18"]
    with pytest.raises(SynthError, match="eligible"):
        corrupt(frame, CorruptionSpec(religion=1000), seed=0)


def test_truth_roundtrip(tmp_path):
    data = generate(small(churn_fraction=0.5))
    data.truth.write(tmp_path, {"seed": 5})
    back = GroundTruth.load(tmp_path)
    assert back.mapping() == data.truth.mapping()
    assert len(back.paths) == len(data.truth.paths)
