import shutil
from pathlib import Path

import pytest

from plfs_panel.artifacts import read_metadata, read_table
from plfs_panel.cli import main
from plfs_panel.pipeline import EXIT_FAILED, EXIT_OK, EXIT_REMOVALS, EXIT_USAGE

ARTIFACTS = ["records_old.tsv", "records_new.tsv", "clean_old.tsv", "clean_new.tsv", "validation_report.tsv",
             "fsu_scores.tsv", "fsu_mapping.tsv", "mapping_validation.tsv", "linked.tsv", "attrition_table.tsv",
             "histories.tsv", "features.tsv", "flow_matrices.tsv", "rates.tsv", "regression_ols.tsv",
             "regression_logit.tsv", "ame.tsv", "ecdf.tsv"]


def synth_bundle(root: Path, **synth) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    spec = root / "synth.ini"
    spec.write_text("[synth]\n" + "".join(f"{k} = {v}\n" for k, v in {"districts": 4, **synth}.items()))
    assert main(["synth", "--manifest", str(spec), "--out", str(root / "bundle"), "--seed", "7"]) == EXIT_OK
    return root / "bundle" / "manifest.ini"


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    return synth_bundle(tmp_path_factory.mktemp("clean"))


def test_pipeline_writes_every_artifact(bundle, tmp_path):
    out = tmp_path / "res"
    assert main(["pipeline", "--manifest", str(bundle), "--out", str(out)]) == EXIT_OK
    for name in ARTIFACTS:
        assert (out / name).exists(), name
    meta = read_metadata(out / "ecdf.tsv")
    assert meta["stage"] == "ecdf" and len(meta["manifest_sha256"]) == 64
    assert not (out / "failed").exists() and not (out / ".staging").exists()


def test_output_independent_of_threads(bundle, tmp_path):
    for threads in ("1", "3"):
        assert main(["pipeline", "--manifest", str(bundle), "--out", str(tmp_path / threads),
                     "--threads", threads]) == EXIT_OK
    for name in ARTIFACTS:
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "3" / name).read_bytes(), name


def test_validate_exit_codes(bundle, tmp_path):
    out = tmp_path / "res"
    assert main(["ingest", "--manifest", str(bundle), "--out", str(out)]) == EXIT_OK
    assert main(["validate", "--manifest", str(bundle), "--out", str(out)]) == EXIT_OK
    dirty = synth_bundle(tmp_path / "dirty", corrupt_religion=3)
    assert main(["ingest", "--manifest", str(dirty), "--out", str(out)]) == EXIT_OK
    assert main(["validate", "--manifest", str(dirty), "--out", str(out)]) == EXIT_REMOVALS
    report = read_table(out / "validation_report.tsv")
    assert report[["fsu", "hh_no"]].drop_duplicates().shape[0] == 3


def test_missing_schema_is_usage_error(bundle, tmp_path, capsys):
    copy = tmp_path / "b"
    shutil.copytree(bundle.parent, copy)
    (copy / "inputs" / "schema.ini").unlink()
    assert main(["pipeline", "--manifest", str(copy / "manifest.ini"), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "schema.ini" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_manifest_values(tmp_path):
    m = tmp_path / "m.ini"
    m.write_text("[run]\nwindow = 2019-Q2, 2017-Q3\n")
    assert main(["ingest", "--manifest", str(m)]) == EXIT_USAGE
    assert main(["ingest"]) == EXIT_USAGE
    assert main(["ingest", "--manifest", str(tmp_path / "none.ini")]) == EXIT_USAGE


def test_failed_stage_is_quarantined(bundle, tmp_path):
    out = tmp_path / "res"
    # panel building before ingest has nothing to read
    assert main(["build-panel", "--manifest", str(bundle), "--out", str(out)]) == EXIT_FAILED
    assert (out / "failed" / "build-panel").is_dir()
    assert not (out / "histories.tsv").exists()


def test_corrupt_input_fails_ingest(bundle, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(bundle.parent, copy)
    path = copy / "inputs" / "year1_first.txt"
    lines = path.read_bytes().splitlines(keepends=True)
    path.write_bytes(b"".join(lines[:5]) + lines[5][:20] + b"\n" + b"".join(lines[6:]))
    assert main(["ingest", "--manifest", str(copy / "manifest.ini")]) == EXIT_FAILED
    assert (copy / "results" / "failed" / "ingest").is_dir()


def test_refuses_to_overwrite_inputs(bundle, tmp_path):
    copy = tmp_path / "b"
    shutil.copytree(bundle.parent, copy)
    before = {p.name: p.read_bytes() for p in (copy / "inputs").iterdir()}
    m = copy / "manifest.ini"
    m.write_text(m.read_text().replace("inputs/year1_first.txt", "inputs/records_old.tsv"))
    (copy / "inputs" / "records_old.tsv").write_bytes(before["year1_first.txt"])
    code = main(["ingest", "--manifest", str(m), "--out", str(copy / "inputs")])
    assert code == EXIT_FAILED
    assert (copy / "inputs" / "records_old.tsv").read_bytes() == before["year1_first.txt"]
