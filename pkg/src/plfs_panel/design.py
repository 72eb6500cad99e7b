"""Expansion of factor/numeric terms into dense design matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


@dataclass
class DesignSpec:
    """A regression design.

    ``terms`` are tuples of column names; a tuple with several names is their
    interaction.  Columns listed in ``categorical`` expand to one dummy per
    observed level combination.  ``baselines`` lists level combinations whose
    dummies are omitted; ``drop_first`` names single-factor terms whose
    lowest level is the reference.
    """

    response: str
    terms: Sequence[tuple[str, ...]]
    categorical: frozenset = frozenset()
    baselines: Sequence[Mapping[str, object]] = ()
    drop_first: frozenset = frozenset()
    intercept: bool = True


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    term_of: list[int]  # index into spec.terms, -1 for the intercept
    categorical_cols: set[int] = field(default_factory=set)


def _level_key(v):
    try:
        return (0, float(v), str(v))
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def _label(col: str, level) -> str:
    return f"{col}={level}"


def build_design(spec: DesignSpec, data: pd.DataFrame) -> Design:
    n = len(data)
    cols: list[np.ndarray] = []
    names: list[str] = []
    term_of: list[int] = []
    cat_cols: set[int] = set()
    if spec.intercept:
        cols.append(np.ones(n))
        names.append("Intercept")
        term_of.append(-1)
    for t, term in enumerate(spec.terms):
        factors = [c for c in term if c in spec.categorical]
        numeric = [c for c in term if c not in spec.categorical]
        base = np.ones(n)
        for c in numeric:
            base = base * data[c].to_numpy(float)
        num_label = ":".join(numeric)
        if not factors:
            cols.append(base)
            names.append(num_label)
            term_of.append(t)
            continue
        combos = data[factors].astype(str).drop_duplicates()
        levels = sorted(combos.itertuples(index=False, name=None), key=lambda r: [_level_key(v) for v in r])
        if len(factors) == 1 and factors[0] in spec.drop_first:
            levels = levels[1:]
        omit = {
            tuple(str(b[f]) for f in factors)
            for b in spec.baselines if set(b) == set(factors)
        }
        values = data[factors].astype(str).to_numpy()
        for combo in levels:
            if combo in omit:
                continue
            mask = np.all(values == np.array(combo, dtype=object), axis=1)
            cols.append(base * mask)
            parts = [_label(f, v) for f, v in zip(factors, combo)]
            if num_label:
                parts.append(num_label)
            names.append(":".join(parts))
            term_of.append(t)
            cat_cols.add(len(cols) - 1)
    X = np.column_stack(cols) if cols else np.empty((n, 0))
    y = data[spec.response].to_numpy(float)
    return Design(X, y, names, term_of, cat_cols)


def canonical_order(X: np.ndarray, y: np.ndarray, *extra: np.ndarray) -> np.ndarray:
    """Row permutation that depends only on row contents, so fits ignore input order."""
    keys = [y] + [X[:, j] for j in range(X.shape[1])] + [e for e in extra]
    return np.lexsort(keys[::-1])
