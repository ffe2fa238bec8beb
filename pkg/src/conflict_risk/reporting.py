"""Plain-text and JSON renderings of estimation results and model comparisons."""

from __future__ import annotations

import warnings

import numpy as np
import pandas as pd

from .mixed_logit import diagnostics as dg
from .mixed_logit.estimate import EstimationResult

SIGNIFICANCE = 0.01
AIC_TOLERANCE = 0.5


class NonNested(UserWarning):
    pass


def _label(var: str) -> str:
    return "Constant" if var == "const" else var


def _cell(value: float, t: float) -> str:
    if not np.isfinite(value):
        return ""
    tt = f"({t:.2f})" if np.isfinite(t) else "(n/a)"
    return f"{value:.3f} {tt}"


def coefficient_rows(result: EstimationResult) -> pd.DataFrame:
    """One row per reported quantity with block, variable, alternative, estimate, t."""
    rows = []
    t = result.t_stats
    random = set(result.random_names)
    for name, est, tv in zip(result.names, result.estimates, t):
        if name.startswith("chol:"):
            continue
        if "|" in name:
            term, z = name.split("|", 1)
            alt, var = term.split(":", 1)
            rows.append(("heterogeneity", f"{_label(var)}: {z}", alt, est, tv))
        else:
            alt, var = name.split(":", 1)
            block = "random" if name in random else "fixed"
            rows.append((block, _label(var), alt, est, tv))
    for k, name in enumerate(result.random_names):
        alt, var = name.split(":", 1)
        rows.append(("sigma", _label(var), alt, result.sigma[k], result.sigma_t[k]))
    return pd.DataFrame(rows, columns=["block", "variable", "alternative", "estimate", "t_stat"])


def _block_table(rows: pd.DataFrame, alternatives: list) -> list:
    lines = []
    width = 44
    lines.append(f"{'Variable':<{width}}" + "".join(f"{a:>22}" for a in alternatives))
    order = list(dict.fromkeys(rows["variable"]))
    for var in order:
        sub = rows[rows["variable"] == var]
        cells = []
        for a in alternatives:
            hit = sub[sub["alternative"] == a]
            cells.append(_cell(hit["estimate"].iloc[0], hit["t_stat"].iloc[0]) if len(hit) else "")
        lines.append(f"{var:<{width}}" + "".join(f"{c:>22}" for c in cells))
    return lines


def _matrix(title: str, names: list, m: np.ndarray, lower: bool) -> list:
    lines = [title]
    short = [n.split(":", 1)[1] + f" [{n.split(':', 1)[0]}]" for n in names]
    w = max(12, max(len(s) for s in short) + 2)
    lines.append(" " * w + "".join(f"{s:>{w}}" for s in short))
    for i, s in enumerate(short):
        vals = [f"{m[i, j]:.3f}" if (j <= i or not lower) else "" for j in range(len(short))]
        lines.append(f"{s:<{w}}" + "".join(f"{v:>{w}}" for v in vals))
    return lines


def estimation_report(result: EstimationResult, title: str = "Model") -> str:
    alternatives = result.spec.get("alternatives", ["None", "Slight", "Severe"])[1:]
    rows = coefficient_rows(result)
    lines = [title, "=" * len(title), "Entries are coefficient (t-statistic).", ""]
    for block, head in (
        ("fixed", "Fixed parameters"),
        ("random", "Random parameters (normally distributed): means"),
        ("sigma", "Standard deviation of random parameters"),
        ("heterogeneity", "Heterogeneity in the means of the random parameter"),
    ):
        sub = rows[rows["block"] == block]
        if len(sub):
            lines.append(head)
            lines += _block_table(sub, alternatives)
            lines.append("")
    if result.random_names:
        lines += _matrix("Cholesky matrix of random parameters", result.random_names, result.cholesky, True)
        lines.append("")
        cor = result.correlation
        if cor is not None and len(result.random_names) > 1:
            lines += _matrix("Correlation coefficients of random parameters", result.random_names, cor, False)
            lines.append("")
    lines.append("Model statistics")
    stats = [
        ("McFadden R2", f"{result.mcfadden_r2:.3f}"),
        ("Number of observations", f"{result.n_obs}"),
        ("Number of groups", f"{result.n_groups}"),
        ("Degrees of freedom", f"{result.df}"),
        ("Log-likelihood at zero LL(0)", f"{result.loglik0:.2f}"),
        ("Log-likelihood at convergence LL(beta)", f"{result.loglik:.2f}"),
        ("AIC", f"{result.aic:.1f}"),
        ("Halton draws", f"{result.n_draws}"),
        ("Converged", f"{'yes' if result.converged else 'no'} (max |gradient| {result.grad_max:.2e}, "
                      f"{result.iterations} iterations)"),
    ]
    lines += [f"{k:<44}{v}" for k, v in stats]
    if not result.se_available:
        lines.append("Standard errors unavailable: Hessian not negative definite.")
    return "\n".join(lines) + "\n"


def estimation_json(result: EstimationResult) -> dict:
    doc = result.to_dict()
    doc["table"] = [
        {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
        for r in coefficient_rows(result).to_dict(orient="records")
    ]
    return doc


def aic_consistent(result: EstimationResult, tol: float = AIC_TOLERANCE) -> bool:
    """Whether a quoted AIC agrees with ``2 df - 2 LL``; True when none is quoted."""
    if result.reported_aic is None:
        return True
    return abs(result.reported_aic - result.aic) <= tol


def compare(restricted: EstimationResult, full: EstimationResult) -> dict:
    """Fit metrics side by side and the likelihood-ratio test of ``full`` against ``restricted``."""
    if full.df < restricted.df:
        warnings.warn("the full model has fewer parameters than the restricted one", NonNested, stacklevel=2)
    if restricted.n_obs != full.n_obs:
        warnings.warn("models were fitted to different numbers of observations", NonNested, stacklevel=2)
    if restricted.names and full.names and not set(restricted.names) <= set(full.names):
        warnings.warn("restricted parameters are not a subset of the full model's", NonNested, stacklevel=2)
    lr = dg.lr_test(restricted.loglik, full.loglik, full.df - restricted.df)

    def side(r):
        return {
            "mcfadden_r2": r.mcfadden_r2,
            "df": r.df,
            "loglik": r.loglik,
            "aic": r.aic,
            "reported_aic": r.reported_aic,
            "aic_consistent": aic_consistent(r),
        }

    return {
        "restricted": side(restricted),
        "full": side(full),
        "lr_statistic": lr.statistic,
        "lr_df": lr.df,
        "lr_p_value": lr.p_value,
        "significant": bool(lr.significant(SIGNIFICANCE)),
        "significance_level": SIGNIFICANCE,
    }


def comparison_report(cmp: dict, names=("Restricted", "Full")) -> str:
    a, b = cmp["restricted"], cmp["full"]
    lines = [f"{'Metric':<28}{names[0]:>16}{names[1]:>16}"]
    lines.append(f"{'McFadden R2':<28}{a['mcfadden_r2']:>16.3f}{b['mcfadden_r2']:>16.3f}")
    lines.append(f"{'Degrees of freedom':<28}{a['df']:>16d}{b['df']:>16d}")
    lines.append(f"{'Log likelihood':<28}{a['loglik']:>16.2f}{b['loglik']:>16.2f}")
    lines.append(f"{'AIC (2df - 2LL)':<28}{a['aic']:>16.1f}{b['aic']:>16.1f}")
    if a["reported_aic"] is not None or b["reported_aic"] is not None:
        def q(s):
            return "" if s["reported_aic"] is None else f"{s['reported_aic']:.1f}"
        lines.append(f"{'AIC (quoted)':<28}{q(a):>16}{q(b):>16}")
    star = dg.stars(cmp["lr_p_value"], cmp["significance_level"])
    lines.append(f"{'Chi-square test statistic':<28}{cmp['lr_statistic']:>15.2f}{star:1}")
    lines.append(f"* significant at the {100 * cmp['significance_level']:g}% level "
                 f"(df = {cmp['lr_df']}, p = {cmp['lr_p_value']:.3g})")
    for label, s in zip(names, (a, b)):
        if not s["aic_consistent"]:
            lines.append(
                f"WARNING: {label} quoted AIC {s['reported_aic']:.1f} is inconsistent with "
                f"2*df - 2*LL = {s['aic']:.1f}"
            )
    return "\n".join(lines) + "\n"
