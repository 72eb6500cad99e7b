"""Tab-separated artifacts with a leading run-metadata comment block."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Mapping, Optional

import pandas as pd

from . import __version__

STR_COLUMNS = {"fsu", "fsu_old", "fsu_new", "state", "district", "industry", "panel_id",
               "survey_year", "year_quarter", "period", "flags", "status", "gender"}


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def metadata_lines(meta: Mapping[str, object]) -> str:
    items = {"tool": "plfs-panel", "version": __version__, **meta}
    return "".join(f"# {k}={v}\n" for k, v in items.items())


def write_table(frame: pd.DataFrame, path, meta: Optional[Mapping[str, object]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = frame.to_csv(sep="\t", index=False, lineterminator="\n", na_rep="")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metadata_lines(meta or {}))
        fh.write(body)
    return path


def read_metadata(path) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("# "):
                break
            k, _, v = line[2:].rstrip("\n").partition("=")
            meta[k] = v
    return meta


def read_table(path, dtype: Optional[Mapping[str, object]] = None) -> pd.DataFrame:
    with open(path, encoding="utf-8") as fh:
        header = next(line for line in fh if not line.startswith("#"))
    cols = header.rstrip("\n").split("\t")
    types = {c: str for c in cols if c in STR_COLUMNS}
    types.update(dtype or {})
    frame = pd.read_csv(path, sep="\t", comment="#", dtype=types,
                        keep_default_na=False, na_values=[""])
    for c in cols:
        if types.get(c) is str:
            frame[c] = frame[c].astype(object).where(frame[c].notna(), None)
    return frame


def same_file(a, b) -> bool:
    try:
        return os.path.samefile(a, b)
    except FileNotFoundError:
        return False
