"""Record layouts for visit files, loaded from INI-style key-value files.

A layout file looks like::

    [layout]
    kind = fixed-width          ; or: delimited
    encoding = ascii
    delimiter = ,               ; delimited only
    header = yes                ; delimited only

    [fields]
    ; fixed-width: name = first-last type [dictionary]   (1-based, inclusive)
    ; delimited:   name = column type [dictionary]       (header name or 1-based index)
    fsu = 1-6 str
    status_code = 40-41 int status

    [codes]
    status = 11,12,21,31,41..42

Unknown codes in a field that names a dictionary are flagged, not rejected.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from typing import Optional

FIELD_TYPES = {
    "fsu": "str",
    "sub_block": "int",
    "stratum2": "int",
    "hh_no": "int",
    "person_no": "int",
    "survey_year": "str",
    "quarter": "int",
    "visit_no": "int",
    "panel_id": "str",
    "state": "str",
    "district": "str",
    "sex": "int",
    "age": "int",
    "relation_to_head": "int",
    "marital": "int",
    "education": "int",
    "religion": "int",
    "social_group": "int",
    "hh_size": "int",
    "status_code": "int",
    "industry": "str",
    "earnings": "float",
    "weight": "float",
}
OPTIONAL_FIELDS = frozenset({"survey_year", "panel_id", "industry", "earnings"})
REQUIRED_FIELDS = tuple(f for f in FIELD_TYPES if f not in OPTIONAL_FIELDS)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vtype: str
    start: Optional[int] = None  # 0-based byte offset, fixed-width only
    end: Optional[int] = None  # exclusive
    column: Optional[str] = None  # delimited only: header name or 1-based index
    codes: Optional[str] = None

    @property
    def width(self) -> int:
        return self.end - self.start


@dataclass
class SchemaConfig:
    kind: str
    fields: dict[str, FieldSpec]
    encoding: str = "ascii"
    delimiter: str = ","
    header: bool = True
    codes: dict[str, frozenset] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("fixed-width", "delimited"):
            raise SchemaError(f"layout kind must be fixed-width or delimited, got {self.kind!r}")
        missing = [f for f in REQUIRED_FIELDS if f not in self.fields]
        if missing:
            raise SchemaError(f"required fields not mapped: {', '.join(missing)}")
        for spec in self.fields.values():
            if spec.name not in FIELD_TYPES:
                raise SchemaError(f"unknown field {spec.name!r}")
            if spec.vtype != FIELD_TYPES[spec.name]:
                raise SchemaError(
                    f"field {spec.name!r} must have type {FIELD_TYPES[spec.name]}, got {spec.vtype}"
                )
            if spec.codes is not None and spec.codes not in self.codes:
                raise SchemaError(f"field {spec.name!r} references unknown dictionary {spec.codes!r}")
        if self.kind == "fixed-width":
            spans = sorted((s.start, s.end, s.name) for s in self.fields.values())
            for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
                if b0 < a1:
                    raise SchemaError(f"byte ranges of {an!r} and {bn!r} overlap")
            if spans[0][0] < 0:
                raise SchemaError("byte positions are 1-based")
        try:
            "".encode(self.encoding)
        except LookupError:
            raise SchemaError(f"unknown encoding {self.encoding!r}") from None

    @property
    def record_width(self) -> int:
        return max(s.end for s in self.fields.values())

    def known_code(self, spec: FieldSpec, value) -> bool:
        return spec.codes is None or value in self.codes[spec.codes]


def _parse_codes(text: str, vtype: str) -> frozenset:
    out = set()
    for tok in text.replace("\n", ",").split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ".." in tok:
            lo, hi = tok.split("..")
            width = len(lo.strip())
            for v in range(int(lo), int(hi) + 1):
                out.add(v if vtype == "int" else str(v).zfill(width))
        else:
            out.add(int(tok) if vtype == "int" else tok)
    return frozenset(out)


def load_schema(source) -> SchemaConfig:
    """Read a layout from a path or from INI text."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            cp.read_file(fh)
    elif isinstance(source, str) and "[" in source:
        cp.read_file(io.StringIO(source))
    else:
        raise SchemaError(f"schema file not found: {source}")
    if not cp.has_section("layout") or not cp.has_section("fields"):
        raise SchemaError("schema needs [layout] and [fields] sections")
    layout = cp["layout"]
    kind = layout.get("kind", "").strip()
    fields: dict[str, FieldSpec] = {}
    raw_codes: dict[str, str] = dict(cp["codes"]) if cp.has_section("codes") else {}
    code_types: dict[str, str] = {}
    for name, value in cp["fields"].items():
        parts = value.split()
        if len(parts) not in (2, 3):
            raise SchemaError(f"field {name!r}: expected 'position type [dictionary]', got {value!r}")
        pos, vtype = parts[0], parts[1]
        codes = parts[2] if len(parts) == 3 else None
        if vtype not in ("int", "float", "str"):
            raise SchemaError(f"field {name!r}: unknown type {vtype!r}")
        if codes:
            code_types[codes] = vtype
        if kind == "fixed-width":
            try:
                first, last = (int(x) for x in pos.split("-"))
            except ValueError:
                raise SchemaError(f"field {name!r}: bad byte range {pos!r}") from None
            if first < 1 or last < first:
                raise SchemaError(f"field {name!r}: bad byte range {pos!r}")
            fields[name] = FieldSpec(name, vtype, start=first - 1, end=last, codes=codes)
        else:
            fields[name] = FieldSpec(name, vtype, column=pos, codes=codes)
    codes = {k: _parse_codes(v, code_types.get(k, "str")) for k, v in raw_codes.items()}
    delimiter = layout.get("delimiter", ",").strip() or ","
    if delimiter in ("tab", "\\t"):
        delimiter = "\t"
    return SchemaConfig(
        kind=kind,
        fields=fields,
        encoding=layout.get("encoding", "ascii").strip(),
        delimiter=delimiter,
        header=layout.getboolean("header", True),
        codes=codes,
    )
