"""Person-visit records: parsing, serialization and the canonical record table."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, fields, replace
from typing import BinaryIO, Iterable, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from .schedule import PanelSchedule, ScheduleError, cycle_to_calendar
from .schema import FIELD_TYPES, FieldSpec, SchemaConfig

log = logging.getLogger(__name__)

# Survey years whose revisit files carry quarter numbers shifted up by one.
MISCODED_REVISIT_YEARS = frozenset({"2017-18"})
QUARTER_FIXED = "quarter_fixed"


class ParseError(ValueError):
    def __init__(self, record: int, field: Optional[str], reason: str):
        self.record = record
        self.field = field
        self.reason = reason
        where = f"record {record}" + (f", field {field!r}" if field else "")
        super().__init__(f"{where}: {reason}")


class HouseholdKey(NamedTuple):
    fsu: str
    sub_block: int
    stratum2: int
    hh_no: int


class PersonKey(NamedTuple):
    fsu: str
    sub_block: int
    stratum2: int
    hh_no: int
    person_no: int

    @property
    def household(self) -> HouseholdKey:
        return HouseholdKey(*self[:4])


HH_COLS = list(HouseholdKey._fields)
PERSON_COLS = list(PersonKey._fields)


@dataclass(frozen=True)
class PersonVisit:
    fsu: str
    sub_block: int
    stratum2: int
    hh_no: int
    person_no: int
    survey_year: str
    quarter: int  # position in the July-June cycle, 1-4 once repaired
    visit_no: int
    state: str
    district: str
    sex: int
    age: int
    relation_to_head: int
    marital: int
    education: int
    religion: int
    social_group: int
    hh_size: int
    status_code: int
    weight: float
    panel_id: Optional[str] = None
    industry: Optional[str] = None
    earnings: Optional[float] = None
    flags: tuple[str, ...] = ()

    @property
    def year_quarter(self) -> str:
        return cycle_to_calendar(self.survey_year, self.quarter)

    @property
    def household_key(self) -> HouseholdKey:
        return HouseholdKey(self.fsu, self.sub_block, self.stratum2, self.hh_no)

    @property
    def person_key(self) -> PersonKey:
        return PersonKey(self.fsu, self.sub_block, self.stratum2, self.hh_no, self.person_no)


CANONICAL_COLUMNS = [
    "survey_year", "quarter", "year_quarter", "visit_no", "panel_id",
    "state", "district", "fsu", "sub_block", "stratum2", "hh_no", "person_no",
    "sex", "age", "relation_to_head", "marital", "education", "religion",
    "social_group", "hh_size", "status_code", "industry", "earnings", "weight", "flags",
]


def _decode_value(raw: str, spec: FieldSpec, record: int):
    text = raw.strip()
    if text == "":
        return None
    try:
        if spec.vtype == "int":
            return int(text)
        if spec.vtype == "float":
            return float(text)
    except ValueError:
        raise ParseError(record, spec.name, f"cannot decode {text!r} as {spec.vtype}") from None
    return text


def _build(values: dict, schema: SchemaConfig, record: int, survey_year: Optional[str]) -> PersonVisit:
    flags = []
    for name, spec in schema.fields.items():
        v = values.get(name)
        if v is None:
            if name not in ("survey_year", "panel_id", "industry", "earnings"):
                raise ParseError(record, name, "missing value")
            continue
        if not schema.known_code(spec, v):
            flags.append(f"unknown:{name}")
    if values.get("survey_year") is None:
        if survey_year is None:
            raise ParseError(record, "survey_year", "not in layout and not supplied")
        values["survey_year"] = survey_year
    if values["visit_no"] not in (1, 2, 3, 4):
        raise ParseError(record, "visit_no", f"visit number {values['visit_no']} outside 1-4")
    if values["weight"] < 0:
        raise ParseError(record, "weight", "negative weight")
    if values["age"] < 0:
        raise ParseError(record, "age", "negative age")
    return PersonVisit(**values, flags=tuple(flags))


def _fixed_width_rows(stream: BinaryIO, schema: SchemaConfig):
    width = schema.record_width
    for i, line in enumerate(stream, start=1):
        line = line.rstrip(b"\r\n")
        if not line.strip():
            continue
        if len(line) < width:
            raise ParseError(i, None, f"truncated: {len(line)} bytes, layout needs {width}")
        if len(line) > width:
            raise ParseError(i, None, f"overlong: {len(line)} bytes, layout needs {width}")
        values = {}
        for name, spec in schema.fields.items():
            try:
                raw = line[spec.start:spec.end].decode(schema.encoding)
            except UnicodeDecodeError:
                raise ParseError(i, name, f"bytes not decodable as {schema.encoding}") from None
            values[name] = _decode_value(raw, spec, i)
        yield i, values


def _delimited_rows(stream: BinaryIO, schema: SchemaConfig):
    try:
        text = io.TextIOWrapper(stream, encoding=schema.encoding, newline="")
        reader = csv.reader(text, delimiter=schema.delimiter)
        header = next(reader, None) if schema.header else None
    except UnicodeDecodeError as exc:
        raise ParseError(0, None, f"header not decodable: {exc}") from None
    positions = {}
    for name, spec in schema.fields.items():
        col = spec.column
        if header is not None and col in header:
            positions[name] = header.index(col)
        elif col.isdigit():
            positions[name] = int(col) - 1
        else:
            raise ParseError(0, name, f"column {col!r} not in header")
    ncol = max(positions.values()) + 1
    i = 0
    while True:
        try:
            row = next(reader)
        except StopIteration:
            break
        except UnicodeDecodeError:
            raise ParseError(i + 1, None, f"bytes not decodable as {schema.encoding}") from None
        i += 1
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < ncol:
            raise ParseError(i, None, f"truncated: {len(row)} columns, layout needs {ncol}")
        yield i, {name: _decode_value(row[pos], schema.fields[name], i) for name, pos in positions.items()}


def parse_visit_file(
    stream: BinaryIO, schema: SchemaConfig, survey_year: Optional[str] = None
) -> list[PersonVisit]:
    """Decode every record of ``stream`` into a :class:`PersonVisit`, in file order."""
    rows = _fixed_width_rows(stream, schema) if schema.kind == "fixed-width" else _delimited_rows(stream, schema)
    out = []
    seen: dict[tuple, int] = {}
    for i, values in rows:
        rec = _build(values, schema, i, survey_year)
        key = (rec.survey_year, rec.quarter, rec.visit_no, rec.person_key)
        if key in seen:
            raise ParseError(i, None, f"duplicate person key {tuple(rec.person_key)} in quarter "
                                      f"{rec.quarter}, visit {rec.visit_no} (first at record {seen[key]})")
        seen[key] = i
        out.append(rec)
    flagged = sum(1 for r in out if r.flags)
    if flagged:
        log.warning("%d records carry unknown codes", flagged)
    return out


def _format_value(value, vtype: str) -> str:
    if value is None:
        return ""
    if vtype == "float":
        text = repr(float(value))
        return text[:-2] if text.endswith(".0") else text
    return str(value)


def serialize_visit(rec: PersonVisit, schema: SchemaConfig) -> bytes:
    """Encode one record under ``schema``; inverse of parsing for mapped fields."""
    if schema.kind == "fixed-width":
        buf = bytearray(b" " * schema.record_width)
        for name, spec in schema.fields.items():
            text = _format_value(getattr(rec, name), spec.vtype).encode(schema.encoding)
            if len(text) > spec.width:
                raise ValueError(f"value {text!r} does not fit field {name!r} ({spec.width} bytes)")
            text = text.ljust(spec.width) if spec.vtype == "str" else text.rjust(spec.width)
            buf[spec.start:spec.end] = text
        return bytes(buf)
    out = io.StringIO()
    ncol = max(int(s.column) if s.column.isdigit() else 0 for s in schema.fields.values())
    if ncol == 0 or any(not s.column.isdigit() for s in schema.fields.values()):
        row = [_format_value(getattr(rec, s.name), s.vtype) for s in schema.fields.values()]
    else:
        row = [""] * ncol
        for s in schema.fields.values():
            row[int(s.column) - 1] = _format_value(getattr(rec, s.name), s.vtype)
    csv.writer(out, delimiter=schema.delimiter, lineterminator="").writerow(row)
    return out.getvalue().encode(schema.encoding)


def write_visit_file(records: Iterable[PersonVisit], schema: SchemaConfig, stream: BinaryIO) -> None:
    if schema.kind == "delimited" and schema.header:
        specs = list(schema.fields.values())
        if all(s.column.isdigit() for s in specs):
            header = [""] * max(int(s.column) for s in specs)
            for s in specs:
                header[int(s.column) - 1] = s.name
        else:
            header = [s.column for s in specs]
        stream.write(schema.delimiter.join(header).encode(schema.encoding) + b"\n")
    for rec in records:
        stream.write(serialize_visit(rec, schema) + b"\n")


def fix_revisit_quarters(
    records: Sequence[PersonVisit], survey_year: str, miscoded_years=MISCODED_REVISIT_YEARS
) -> list[PersonVisit]:
    """Undo the one-quarter shift in revisit records of the affected survey years.

    Revisit records (visit 2-4) reported in quarters 3, 4, 5 belong to quarters
    2, 3, 4.  First-visit records and other years pass through.  Repaired records
    are flagged so a second pass leaves them alone.
    """
    if survey_year not in miscoded_years:
        return list(records)
    out = []
    for i, rec in enumerate(records, start=1):
        if rec.visit_no == 1 or QUARTER_FIXED in rec.flags:
            out.append(rec)
            continue
        if rec.quarter not in (3, 4, 5):
            raise ParseError(i, "quarter", f"{survey_year} revisit record in quarter {rec.quarter}, expected 3-5")
        out.append(replace(rec, quarter=rec.quarter - 1, flags=rec.flags + (QUARTER_FIXED,)))
    return out


def assign_panels(records: Sequence[PersonVisit], schedule: PanelSchedule) -> list[PersonVisit]:
    """Fill ``panel_id`` from the schedule; a supplied label must agree with it."""
    out = []
    for i, rec in enumerate(records, start=1):
        try:
            label = schedule.infer_panel(rec.year_quarter, rec.visit_no)
        except ScheduleError as exc:
            raise ParseError(i, "visit_no", str(exc)) from None
        if rec.panel_id is not None and rec.panel_id != label:
            raise ParseError(i, "panel_id", f"recorded panel {rec.panel_id} but schedule says {label}")
        out.append(replace(rec, panel_id=label))
    return out


_FRAME_DTYPES = {
    "survey_year": str, "quarter": np.int64, "year_quarter": str, "visit_no": np.int64,
    "panel_id": object, "state": str, "district": str, "fsu": str,
    "sub_block": np.int64, "stratum2": np.int64, "hh_no": np.int64, "person_no": np.int64,
    "sex": np.int64, "age": np.int64, "relation_to_head": np.int64, "marital": np.int64,
    "education": np.int64, "religion": np.int64, "social_group": np.int64,
    "hh_size": np.int64, "status_code": np.int64, "industry": object,
    "earnings": np.float64, "weight": np.float64, "flags": str,
}


def visits_to_frame(records: Iterable[PersonVisit]) -> pd.DataFrame:
    plain = [c for c in CANONICAL_COLUMNS if c not in ("year_quarter", "flags")]
    rows = []
    for rec in records:
        d = {c: getattr(rec, c) for c in plain}
        d["year_quarter"] = rec.year_quarter
        d["flags"] = ";".join(rec.flags)
        rows.append(d)
    frame = pd.DataFrame(rows, columns=CANONICAL_COLUMNS)
    return canonicalize(frame)


def canonicalize(frame: pd.DataFrame) -> pd.DataFrame:
    """Coerce a record table to canonical columns and dtypes."""
    frame = frame.copy()
    if "flags" not in frame:
        frame["flags"] = ""
    if "year_quarter" not in frame:
        frame["year_quarter"] = [cycle_to_calendar(y, q) for y, q in zip(frame["survey_year"], frame["quarter"])]
    for col in ("panel_id", "industry", "earnings"):
        if col not in frame:
            frame[col] = None
    frame = frame[CANONICAL_COLUMNS]
    for col, dtype in _FRAME_DTYPES.items():
        if dtype is object:
            frame[col] = frame[col].astype(object).where(frame[col].notna(), None)
            if col in ("panel_id", "industry"):
                frame[col] = frame[col].map(lambda v: None if v is None or v == "" else str(v))
        elif dtype is str:
            frame[col] = frame[col].fillna("").astype(str)
        else:
            frame[col] = frame[col].astype(dtype)
    return frame.reset_index(drop=True)


def frame_to_visits(frame: pd.DataFrame) -> list[PersonVisit]:
    names = [f.name for f in fields(PersonVisit)]
    out = []
    for row in frame.to_dict("records"):
        d = {k: row[k] for k in names if k != "flags"}
        for k in ("earnings",):
            if d[k] is not None and np.isnan(d[k]):
                d[k] = None
        for k, t in FIELD_TYPES.items():
            if d[k] is None:
                continue
            d[k] = {"int": int, "float": float, "str": str}[t](d[k])
        flags = row.get("flags") or ""
        out.append(PersonVisit(**d, flags=tuple(f for f in flags.split(";") if f)))
    return out


def sort_records(frame: pd.DataFrame) -> pd.DataFrame:
    """Deterministic merge order: person key, then visit quarter."""
    return frame.sort_values(PERSON_COLS + ["year_quarter", "visit_no"], kind="mergesort").reset_index(drop=True)


def _format_column(values: pd.Series, vtype: str) -> pd.Series:
    return values.map(lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else _format_value(v, vtype))


def write_visit_frame(frame: pd.DataFrame, schema: SchemaConfig, stream: BinaryIO) -> None:
    """Column-wise equivalent of :func:`write_visit_file` for record tables."""
    if schema.kind != "fixed-width":
        write_visit_file(frame_to_visits(frame), schema, stream)
        return
    if frame.empty:
        return
    pieces = []
    pos = 0
    for spec in sorted(schema.fields.values(), key=lambda s: s.start):
        if spec.start > pos:
            pieces.append(pd.Series(" " * (spec.start - pos), index=frame.index))
        text = _format_column(frame[spec.name].astype(object), spec.vtype)
        too_long = text.str.len() > spec.width
        if too_long.any():
            raise ValueError(f"value {text[too_long].iloc[0]!r} does not fit field {spec.name!r} ({spec.width} bytes)")
        pieces.append(text.str.ljust(spec.width) if spec.vtype == "str" else text.str.rjust(spec.width))
        pos = spec.end
    lines = pieces[0].str.cat(pieces[1:])
    stream.write(("\n".join(lines) + "\n").encode(schema.encoding))
