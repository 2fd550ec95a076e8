"""Distributional fidelity: propensity MSE, per-column chi-square / KS p-values, regression agreement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from ..schema import DataTable, SchemaError
from .predictors import DecisionTree, FeatureEncoder, fit_logistic


class MetricError(ValueError):
    pass


def _check_compatible(a: DataTable, b: DataTable) -> None:
    if a.schema.names != b.schema.names:
        raise SchemaError(f"incompatible schemas: {a.schema.names} vs {b.schema.names}")
    for x, y in zip(a.schema.columns, b.schema.columns):
        if x.kind != y.kind:
            raise SchemaError(f"column {x.name!r} is {x.kind} in one table and {y.kind} in the other")


def stack_tables(original: DataTable, synthetic: DataTable) -> DataTable:
    _check_compatible(original, synthetic)
    data = {n: np.concatenate([original[n], synthetic[n]]) for n in original.schema.names}
    return DataTable(original.schema, data)


# ---------------------------------------------------------------------------
# pMSE


@dataclass(frozen=True)
class PmseResult:
    pmse: float
    ratio: float
    null_mean: float
    c: float


def _propensity_pmse(X, labels, c, depth, min_leaf, complexity) -> float:
    tree = DecisionTree(depth, min_leaf, n_classes=2, complexity=complexity).fit(X, labels)
    p = tree.predict_proba(X)[:, 1]
    return float(np.mean((p - c) ** 2))


def pmse_score(original: DataTable, synthetic: DataTable, cart_depth: int = 6, seed: int = 0,
               permutations: int = 20, min_samples_leaf: int = 5, complexity: float = 0.01) -> PmseResult:
    """Propensity-score MSE from a CART discriminator, and its ratio to a label-permutation null."""
    if original.row_count == 0 or synthetic.row_count == 0:
        raise MetricError("pmse needs non-empty tables")
    both = stack_tables(original, synthetic)
    X = FeatureEncoder.fit(both).transform(both)
    n_o, n_s = original.row_count, synthetic.row_count
    labels = np.r_[np.zeros(n_o, dtype=np.int64), np.ones(n_s, dtype=np.int64)]
    c = n_s / (n_o + n_s)
    pmse = _propensity_pmse(X, labels, c, cart_depth, min_samples_leaf, complexity)
    rng = np.random.default_rng(seed)
    null = [_propensity_pmse(X, rng.permutation(labels), c, cart_depth, min_samples_leaf, complexity) for _ in range(permutations)]
    null_mean = float(np.mean(null)) if null else float("nan")
    if null_mean > 0:
        ratio = pmse / null_mean
    else:
        # a null that never splits: identical behaviour is ratio 1
        ratio = 1.0 if pmse == 0 else float("inf")
    return PmseResult(pmse, ratio, null_mean, c)


# ---------------------------------------------------------------------------
# per-column tests


def chi2_sf(stat: float, df: int) -> float:
    """Upper tail of the chi-square law via the regularised incomplete gamma function."""
    if df <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, max(stat, 0.0) / 2.0))


def chi2_column(orig: np.ndarray, synth: np.ndarray) -> tuple[float, int, float]:
    """(statistic, df, p) of the synthetic counts against original proportions."""
    cats = sorted(set(orig.tolist()) | set(synth.tolist()))
    o_counts = np.array([np.sum(orig == k) for k in cats], dtype=np.float64)
    s_counts = np.array([np.sum(synth == k) for k in cats], dtype=np.float64)
    expected = o_counts / o_counts.sum() * s_counts.sum()
    zero = expected == 0
    if zero.any():
        # categories unseen in the original merge into the smallest expected bin
        k = int(np.argmin(np.where(zero, np.inf, expected)))
        s_counts[k] += s_counts[zero].sum()
        expected, s_counts = expected[~zero], s_counts[~zero]
    if len(expected) < 2:
        return 0.0, 0, 1.0
    stat = float(np.sum((s_counts - expected) ** 2 / expected))
    df = len(expected) - 1
    return stat, df, chi2_sf(stat, df)


def chi2_avg_p(original: DataTable, synthetic: DataTable) -> float:
    _check_compatible(original, synthetic)
    cols = original.schema.discrete()
    if not cols:
        raise MetricError("no categorical columns")
    return float(np.mean([chi2_column(original[c.name], synthetic[c.name])[2] for c in cols]))


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.sort(np.asarray(a, dtype=np.float64)), np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_pvalue(d: float, n: int, m: int) -> float:
    """Asymptotic two-sample p-value with effective size n m / (n + m)."""
    en = n * m / (n + m)
    return float(special.kolmogorov(np.sqrt(en) * d))


def ks_avg_p(original: DataTable, synthetic: DataTable) -> float:
    _check_compatible(original, synthetic)
    cols = original.schema.continuous()
    if not cols:
        raise MetricError("no continuous columns")
    ps = []
    for c in cols:
        a, b = original[c.name], synthetic[c.name]
        ps.append(ks_pvalue(ks_statistic(a, b), len(a), len(b)))
    return float(np.mean(ps))


# ---------------------------------------------------------------------------
# regression agreement


def interval_overlap(lo_o: float, hi_o: float, lo_s: float, hi_s: float) -> float:
    """Average relative overlap of two intervals (negative when disjoint)."""
    inter = min(hi_o, hi_s) - max(lo_o, lo_s)
    return 0.5 * (inter / (hi_o - lo_o) + inter / (hi_s - lo_s))


def standardized_difference(beta_o: float, beta_s: float, se_o: float) -> float:
    return abs(beta_o - beta_s) / se_o


@dataclass
class CoefficientDetail:
    name: str
    beta_original: float
    beta_synthetic: float
    se_original: float
    se_synthetic: float
    overlap: float | None
    std_diff: float | None
    flagged: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RegressionResult:
    ci_overlap_mean: float
    std_diff_mean: float
    coefficients: list[CoefficientDetail]


Z95 = float(special.ndtri(0.975))


def _independent_columns(X: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Mask of a maximal linearly independent column subset (intercept included) by pivoted QR."""
    X1 = np.concatenate([np.ones((len(X), 1)), X], axis=1)
    _, R, piv = linalg.qr(X1, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rel_tol * diag[0])) if diag.size else 0
    keep = np.zeros(X1.shape[1], dtype=bool)
    keep[piv[:rank]] = True
    return keep[1:]


def regression_metrics(original: DataTable, synthetic: DataTable, target: str) -> RegressionResult:
    """Logistic fits of ``target`` on all other columns, compared coefficient by coefficient."""
    _check_compatible(original, synthetic)
    if target not in original.schema:
        raise SchemaError(f"--target: unknown column {target!r}")
    if original.schema.column(target).is_continuous:
        raise MetricError("regression target must be discrete")
    classes = sorted(set(original[target].tolist()))
    if len(classes) != 2:
        raise MetricError(f"regression target must be binary, found {len(classes)} classes")
    positive = classes[1]
    feats = FeatureEncoder.fit(original, exclude=[target], drop_first=True)
    Xo, Xs = feats.transform(original), feats.transform(synthetic)
    names = feats.feature_names
    # a column constant in either table is not identifiable there
    reason = {j: "constant column in one table" for j in range(len(names))
              if not (Xo[:, j].std() > 0 and Xs[:, j].std() > 0)}
    # nor is one that is an exact linear combination of the others
    for X in (Xo, Xs):
        cand = [j for j in range(len(names)) if j not in reason]
        indep = _independent_columns(X[:, cand])
        reason.update({j: "collinear with other columns" for j, ok in zip(cand, indep) if not ok})
    keep = np.array([j not in reason for j in range(len(names))], dtype=bool)
    yo = (original[target] == positive).astype(float)
    ys = (synthetic[target] == positive).astype(float)
    fo = fit_logistic(Xo[:, keep], yo)
    fs = fit_logistic(Xs[:, keep], ys)
    details = []
    kept = ["(intercept)"] + [n for n, k in zip(names, keep) if k]
    for j, name in enumerate(kept):
        bo, bs, so, ss = fo.coef[j], fs.coef[j], fo.se[j], fs.se[j]
        flag = None
        if not fo.converged:
            flag = "original fit did not converge"
        elif not fs.converged:
            flag = "synthetic fit did not converge"
        elif fo.separated[j] or fs.separated[j]:
            flag = "separation"
        elif not (np.isfinite(so) and np.isfinite(ss) and so > 0 and ss > 0):
            flag = "degenerate standard error"
        if flag:
            details.append(CoefficientDetail(name, float(bo), float(bs), float(so), float(ss), None, None, flag))
            continue
        io = interval_overlap(bo - Z95 * so, bo + Z95 * so, bs - Z95 * ss, bs + Z95 * ss)
        details.append(CoefficientDetail(name, float(bo), float(bs), float(so), float(ss), float(io),
                                         float(standardized_difference(bo, bs, so))))
    for j, n in enumerate(names):
        if j in reason:
            details.append(CoefficientDetail(n, float("nan"), float("nan"), float("nan"), float("nan"), None, None,
                                             reason[j]))
    good = [d for d in details if d.flagged is None]
    io_mean = float(np.mean([d.overlap for d in good])) if good else float("nan")
    sd_mean = float(np.mean([d.std_diff for d in good])) if good else float("nan")
    return RegressionResult(io_mean, sd_mean, details)
