"""Plain-text run manifests.

Example::

    [inputs]
    schema = layout.ini
    2017-18 = year1_first.txt, year1_revisit.txt
    2018-19 = year2_first.txt, year2_revisit.txt

    [run]
    out = results
    seed = 0
    window = 2017-Q3, 2019-Q4
    old_regime = 2017-18
    emp_dichotomy = table3

    [thresholds]
    size_tolerance = 3
    age_tolerance = 4
    female_mass = 5e7
    male_mass = 1e8
    alpha = 0.05

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .schedule import STUDY_WINDOW, quarter_ordinal, survey_year_start

STAGES = ("ingest", "validate", "match-fsu", "build-panel", "flows", "rates", "regress", "ecdf")
_YEAR = re.compile(r"^\d{4}-\d{2}$")


class ManifestError(ValueError):
    pass


@dataclass
class Thresholds:
    size_tolerance: int = 3
    age_tolerance: int = 4
    female_mass: float = 5e7
    male_mass: float = 1e8
    alpha: float = 0.05
    min_score: int = 1
    working_age: tuple[int, int] = (15, 65)

    @property
    def masses(self) -> dict[str, float]:
        return {"Female": self.female_mass, "Male": self.male_mass}


@dataclass
class Manifest:
    path: Optional[Path]
    schema: Optional[Path]
    inputs: dict[str, list[Path]]
    out: Path
    seed: int = 0
    window: tuple[str, str] = STUDY_WINDOW
    old_regime: tuple[str, ...] = ("2017-18",)
    emp_dichotomy: str = "table3"
    member_mode: str = "person_no"
    stages: dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})
    thresholds: Thresholds = field(default_factory=Thresholds)
    synth: dict[str, str] = field(default_factory=dict)
    digest: str = ""

    def input_paths(self) -> list[Path]:
        head = [self.schema] if self.schema is not None else []
        return head + [p for paths in self.inputs.values() for p in paths]

    def check_paths(self) -> None:
        missing = [str(p) for p in self.input_paths() if not p.exists()]
        if missing:
            raise ManifestError(f"missing input files: {', '.join(missing)}")

    def regime(self, year: str) -> str:
        return "old" if year in self.old_regime else "new"


def _split(value: str) -> list[str]:
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


def load_manifest(path, require_inputs: bool = True) -> Manifest:
    """Parse and check a manifest; input files must exist unless ``require_inputs`` is false."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    raw = path.read_bytes()
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    cp.read_string(raw.decode("utf-8"))
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    inputs_sec = cp["inputs"] if cp.has_section("inputs") else {}
    if "schema" not in inputs_sec and require_inputs:
        raise ManifestError("manifest names no schema ([inputs] schema = ...)")
    schema = resolve(inputs_sec["schema"]) if "schema" in inputs_sec else None
    inputs = {}
    for key, value in inputs_sec.items():
        if key == "schema":
            continue
        if not _YEAR.match(key):
            raise ManifestError(f"[inputs] key {key!r} is not a survey year like 2017-18")
        survey_year_start(key)
        inputs[key] = [resolve(p) for p in _split(value)]
    run = cp["run"] if cp.has_section("run") else {}
    out = resolve(run.get("out", "results"))
    window = tuple(_split(run.get("window", ", ".join(STUDY_WINDOW))))
    if len(window) != 2 or quarter_ordinal(window[0]) > quarter_ordinal(window[1]):
        raise ManifestError(f"bad study window {window}")
    years = sorted(inputs)
    old = tuple(_split(run.get("old_regime", years[0] if years else "2017-18")))
    dichotomy = run.get("emp_dichotomy", "table3").strip()
    if dichotomy not in ("table3", "strict"):
        raise ManifestError("emp_dichotomy must be table3 or strict")
    member_mode = run.get("member_mode", "person_no").strip()
    if member_mode not in ("person_no", "multiset"):
        raise ManifestError("member_mode must be person_no or multiset")
    stages = {s: True for s in STAGES}
    if cp.has_section("stages"):
        for key in cp["stages"]:
            if key not in stages:
                raise ManifestError(f"unknown stage {key!r}")
            stages[key] = cp["stages"].getboolean(key)
    th = Thresholds()
    if cp.has_section("thresholds"):
        sec = cp["thresholds"]
        for name in ("size_tolerance", "age_tolerance", "min_score"):
            if name in sec:
                setattr(th, name, sec.getint(name))
        for name in ("female_mass", "male_mass", "alpha"):
            if name in sec:
                setattr(th, name, sec.getfloat(name))
        if "working_age" in sec:
            lo, hi = (int(x) for x in _split(sec["working_age"]))
            th.working_age = (lo, hi)
    if not 0 < th.alpha < 1:
        raise ManifestError("alpha must lie in (0, 1)")
    m = Manifest(
        path=path, schema=schema, inputs=inputs, out=out, seed=int(run.get("seed", 0)),
        window=window, old_regime=old, emp_dichotomy=dichotomy, member_mode=member_mode,
        stages=stages, thresholds=th, synth=dict(cp["synth"]) if cp.has_section("synth") else {},
        digest=hashlib.sha256(raw).hexdigest(),
    )
    if require_inputs:
        m.check_paths()
        if not inputs:
            raise ManifestError("manifest lists no input files")
    return m


def render_manifest(schema: str, inputs: dict[str, list[str]], out: str = "results", seed: int = 0,
                    window: tuple[str, str] = STUDY_WINDOW, extra: Optional[dict[str, dict[str, str]]] = None) -> str:
    lines = ["[inputs]", f"schema = {schema}"]
    lines += [f"{year} = {', '.join(paths)}" for year, paths in inputs.items()]
    lines += ["", "[run]", f"out = {out}", f"seed = {seed}", f"window = {window[0]}, {window[1]}"]
    for section, values in (extra or {}).items():
        lines += ["", f"[{section}]"] + [f"{k} = {v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"
