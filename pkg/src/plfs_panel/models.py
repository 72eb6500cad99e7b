"""No-intercept dummy OLS, Newton-Raphson logit and average marginal effects."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy import stats
from scipy.special import expit

from .design import Design, DesignSpec, build_design, canonical_order

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


class RankDeficientError(FitError):
    def __init__(self, collinear: Sequence[str]):
        self.collinear = list(collinear)
        super().__init__(f"design is rank deficient; collinear terms: {', '.join(self.collinear)}")


class SeparationError(FitError):
    def __init__(self, regressor: str, detail: str = ""):
        self.regressor = regressor
        super().__init__(f"separation along {regressor!r}{': ' + detail if detail else ''}")


class ConvergenceError(FitError):
    def __init__(self, trace):
        self.trace = trace
        super().__init__(f"no convergence after {len(trace)} iterations; last |score|={trace[-1][2]:.3g}")


@dataclass
class RegressionResult:
    model: str
    names: list[str]
    params: np.ndarray
    bse: np.ndarray
    pvalues: np.ndarray
    cov: np.ndarray
    nobs: int
    df_resid: int
    iterations: int = 0
    llf: Optional[float] = None
    rss: Optional[float] = None
    X: Optional[np.ndarray] = field(default=None, repr=False)
    y: Optional[np.ndarray] = field(default=None, repr=False)
    categorical_groups: dict[int, list[int]] = field(default_factory=dict, repr=False)
    trace: list = field(default_factory=list, repr=False)

    @property
    def stat(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / self.bse

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "term": self.names, "estimate": self.params, "se": self.bse,
            "stat": self.stat, "p": self.pvalues, "stars": [stars(p) for p in self.pvalues],
        })

    def score(self) -> np.ndarray:
        if self.model != "logit":
            raise ValueError("score is defined for logit fits")
        return self.X.T @ (self.y - expit(self.X @ self.params))


def stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else ""


def check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    n, k = X.shape
    if k == 0:
        raise FitError("design has no columns")
    if n < k:
        raise RankDeficientError(names[n:])
    _, R, piv = sla.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d[0] * max(n, k) * np.finfo(float).eps
    rank = int((d > tol).sum())
    if rank < k:
        raise RankDeficientError(sorted(names[j] for j in piv[rank:]))


def _cluster_meat(X: np.ndarray, u: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, int]:
    scores = X * u[:, None]
    _, inv = np.unique(groups, return_inverse=True)
    summed = np.zeros((inv.max() + 1, X.shape[1]))
    np.add.at(summed, inv, scores)
    return summed.T @ summed, summed.shape[0]


def _prepare(design: Design, groups):
    order = canonical_order(design.X, design.y)
    X, y = design.X[order], design.y[order]
    g = None if groups is None else np.asarray(groups)[order]
    return X, y, g


def ols_fit(design: Design, cov_type: str = "classical", groups=None) -> RegressionResult:
    """Least squares through a Householder QR factorization.

    Classical standard errors with n - k residual degrees of freedom;
    ``cov_type="cluster"`` gives cluster-robust errors over ``groups``.
    """
    check_rank(design.X, design.names)
    X, y, g = _prepare(design, groups)
    n, k = X.shape
    Q, R = np.linalg.qr(X)
    beta = sla.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    df = n - k
    Rinv = sla.solve_triangular(R, np.eye(k))
    bread = Rinv @ Rinv.T
    if cov_type == "classical":
        sigma2 = rss / df if df > 0 else np.nan
        cov = sigma2 * bread
    elif cov_type == "cluster":
        meat, G = _cluster_meat(X, resid, g)
        cov = bread @ meat @ bread * (G / (G - 1)) * ((n - 1) / df)
    else:
        raise ValueError(f"unknown cov_type {cov_type!r}")
    bse = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        pvals = 2 * stats.t.sf(np.abs(beta / bse), df) if df > 0 else np.full(k, np.nan)
    return RegressionResult("ols", list(design.names), beta, bse, pvals, cov, n, df, rss=rss, X=X, y=y)


def _loglike(eta: np.ndarray, y: np.ndarray) -> float:
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def logit_fit(design: Design, tol: float = 1e-8, ll_rtol: float = 1e-10, max_iter: int = 50,
              cov_type: str = "classical", groups=None, sep_tol: float = 1e-9) -> RegressionResult:
    """Maximum likelihood logit by Newton-Raphson.

    Stops once the largest absolute score is below ``tol``, or when the
    relative log-likelihood change stays below ``ll_rtol`` for two steps.
    Separation is reported when a coefficient passes 30 in magnitude while
    the likelihood still rises, or when a fitted probability ends within
    ``sep_tol`` of 0 or 1.
    """
    names = design.names
    y0 = design.y
    if y0.min() == y0.max():
        raise SeparationError("Intercept" if "Intercept" in names else names[0],
                              f"outcome is constant ({y0[0]:g}); likelihood has no maximum")
    check_rank(design.X, names)
    X, y, g = _prepare(design, groups)
    n, k = X.shape
    beta = np.zeros(k)
    eta = X @ beta
    ll = _loglike(eta, y)
    trace = []
    stalls = 0
    converged = False
    for it in range(1, max_iter + 1):
        p = expit(eta)
        score = X.T @ (y - p)
        smax = float(np.abs(score).max())
        trace.append((it, ll, smax))
        if smax < tol:
            converged = True
            break
        w = p * (1.0 - p)
        H = X.T @ (X * w[:, None])
        try:
            step = sla.cho_solve(sla.cho_factor(H), score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = _loglike(eta_c, y)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        big = np.abs(cand) > 30
        if big.any() and ll_c > ll:
            j = int(np.argmax(np.abs(cand)))
            raise SeparationError(names[j], f"coefficient {cand[j]:.3g} still growing at iteration {it}")
        change = abs(ll_c - ll) / max(abs(ll), 1e-300)
        beta, eta, ll = cand, eta_c, ll_c
        stalls = stalls + 1 if change < ll_rtol else 0
        if stalls >= 2:
            converged = True
            trace.append((it + 1, ll, float(np.abs(X.T @ (y - expit(eta))).max())))
            break
    if not converged:
        raise ConvergenceError(trace)
    p = expit(eta)
    # A stall with fitted probabilities pinned at 0 or 1 is slow divergence, not a maximum.
    if np.any(np.minimum(p, 1.0 - p) < sep_tol):
        j = int(np.argmax(np.abs(beta)))
        raise SeparationError(names[j], f"fitted probabilities reach 0 or 1 (coefficient {beta[j]:.3g})")
    w = p * (1.0 - p)
    H = X.T @ (X * w[:, None])
    bread = np.linalg.inv(H)
    if cov_type == "classical":
        cov = bread
    elif cov_type == "cluster":
        meat, G = _cluster_meat(X, y - p, g)
        cov = bread @ meat @ bread * (G / (G - 1))
    else:
        raise ValueError(f"unknown cov_type {cov_type!r}")
    bse = np.sqrt(np.diag(cov))
    pvals = 2 * stats.norm.sf(np.abs(beta / bse))
    groups_of = {}
    for j in design.categorical_cols:
        groups_of[j] = [i for i in design.categorical_cols if design.term_of[i] == design.term_of[j]]
    return RegressionResult("logit", list(names), beta, bse, pvals, cov, n, n - k, iterations=len(trace),
                            llf=ll, X=X, y=y, categorical_groups=groups_of, trace=trace)


def average_marginal_effects(fit: RegressionResult, continuous: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """AMEs of every non-intercept regressor with delta-method standard errors.

    Dummies (0/1 columns, or levels of a factor) use the counterfactual
    difference in predicted probability; other columns use the mean
    derivative.  ``continuous`` forces the derivative form.
    """
    if fit.model != "logit":
        raise ValueError("marginal effects need a logit fit")
    X, beta, cov = fit.X, fit.params, fit.cov
    n = X.shape[0]
    forced = set(continuous or ())
    rows = []
    for j, name in enumerate(fit.names):
        if name == "Intercept":
            continue
        col = X[:, j]
        binary = name not in forced and np.isin(col, (0.0, 1.0)).all()
        if binary:
            group = fit.categorical_groups.get(j, [j])
            x1 = X.copy()
            x1[:, group] = 0.0
            x0 = x1.copy()
            x1[:, j] = 1.0
            p1, p0 = expit(x1 @ beta), expit(x0 @ beta)
            ame = float(np.mean(p1 - p0))
            grad = ((p1 * (1 - p1)) @ x1 - (p0 * (1 - p0)) @ x0) / n
            kind = "discrete"
        else:
            p = expit(X @ beta)
            d = p * (1 - p)
            ame = float(beta[j] * d.mean())
            grad = beta[j] * ((d * (1 - 2 * p)) @ X) / n
            grad[j] += d.mean()
            kind = "derivative"
        se = float(np.sqrt(grad @ cov @ grad))
        z = ame / se if se > 0 else np.nan
        pval = float(2 * stats.norm.sf(abs(z))) if se > 0 else np.nan
        rows.append((name, ame, se, pval, stars(pval), kind))
    return pd.DataFrame(rows, columns=["term", "ame", "se", "p", "stars", "kind"])


def significance_filter(table: pd.DataFrame, alpha: float = 0.05) -> pd.DataFrame:
    """Rows with p strictly below ``alpha``."""
    if table.empty:
        return table.copy()
    return table[table["p"] < alpha].reset_index(drop=True)


def fit(spec: DesignSpec, data: pd.DataFrame, model: str = "ols", **kwargs) -> RegressionResult:
    design = build_design(spec, data)
    if model == "ols":
        return ols_fit(design, **kwargs)
    if model == "logit":
        return logit_fit(design, **kwargs)
    raise ValueError(f"unknown model {model!r}")
