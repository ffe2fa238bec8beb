"""Simulated maximum likelihood for the grouped mixed logit."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.stats import norm

from . import diagnostics as dg
from .model import CONSTANT, ChoiceDataset, IdentificationError, ModelSpec, SimulatedLikelihood


class NonConvergence(RuntimeError):
    def __init__(self, message: str, result: "EstimationResult"):
        super().__init__(message)
        self.result = result


class SingularHessian(UserWarning):
    pass


@dataclass
class EstimationOptions:
    maxiter: int = 500
    gtol: float = 1e-5
    ftol: float = 1e-9
    hessian_step: float = 1e-5
    polish_iter: int = 50
    chol_start: float = 0.1
    hold: dict = field(default_factory=dict)
    raise_on_failure: bool = True


@dataclass
class EstimationResult:
    names: list
    estimates: np.ndarray
    std_errors: np.ndarray
    loglik: float
    loglik0: float
    n_obs: int
    n_groups: int
    df: int
    random_names: list
    cholesky: np.ndarray
    sigma: np.ndarray
    sigma_t: np.ndarray
    converged: bool
    iterations: int
    grad_max: float
    message: str
    n_draws: int
    held: list = field(default_factory=list)
    spec: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    reported_aic: Optional[float] = None

    @property
    def t_stats(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.estimates / self.std_errors

    @property
    def p_values(self) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.t_stats))

    @property
    def se_available(self) -> bool:
        free = [i for i, n in enumerate(self.names) if n not in self.held]
        return bool(np.all(np.isfinite(self.std_errors[free])))

    @property
    def mcfadden_r2(self) -> float:
        return dg.mcfadden_r2(self.loglik, self.loglik0)

    @property
    def aic(self) -> float:
        return dg.aic(self.loglik, self.df)

    @property
    def covariance(self) -> np.ndarray:
        return self.cholesky @ self.cholesky.T

    @property
    def correlation(self) -> Optional[np.ndarray]:
        if len(self.random_names) == 0:
            return None
        try:
            return dg.correlation_matrix(self.cholesky)
        except dg.ZeroSigma:
            return None

    def coefficient(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"estimate": self.estimates, "std_error": self.std_errors, "t_stat": self.t_stats},
            index=pd.Index(self.names, name="parameter"),
        )

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        k = len(self.random_names)
        return {
            "names": list(self.names),
            "estimates": clean(self.estimates),
            "std_errors": clean(self.std_errors),
            "t_stats": clean(self.t_stats),
            "loglik": self.loglik,
            "loglik0": self.loglik0,
            "mcfadden_r2": self.mcfadden_r2,
            "aic": self.aic,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "df": self.df,
            "random_names": list(self.random_names),
            "cholesky": np.asarray(self.cholesky, dtype=float).reshape(k, k).tolist(),
            "covariance": self.covariance.tolist(),
            "correlation": None if self.correlation is None else self.correlation.tolist(),
            "sigma": clean(self.sigma),
            "sigma_t": clean(self.sigma_t),
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_max": self.grad_max,
            "message": self.message,
            "n_draws": self.n_draws,
            "held": list(self.held),
            "spec": self.spec,
            "reported_aic": self.reported_aic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EstimationResult":
        def arr(v):
            return np.array([np.nan if x is None else x for x in v], dtype=float)

        k = len(d.get("random_names", []))
        return cls(
            names=list(d.get("names", [])),
            estimates=arr(d.get("estimates", [])),
            std_errors=arr(d.get("std_errors", [])),
            loglik=float(d["loglik"]),
            loglik0=float(d["loglik0"]) if d.get("loglik0") is not None else dg.null_loglik(int(d["n_obs"])),
            n_obs=int(d["n_obs"]),
            n_groups=int(d.get("n_groups", d["n_obs"])),
            df=int(d["df"]),
            random_names=list(d.get("random_names", [])),
            cholesky=np.asarray(d.get("cholesky", []), dtype=float).reshape(k, k),
            sigma=arr(d.get("sigma", [])),
            sigma_t=arr(d.get("sigma_t", [])),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
            grad_max=float(d.get("grad_max", 0.0)),
            message=str(d.get("message", "")),
            n_draws=int(d.get("n_draws", 0)),
            held=list(d.get("held", [])),
            spec=d.get("spec", {}),
            reported_aic=d.get("reported_aic"),
        )

    @classmethod
    def summary_only(cls, loglik: float, df: int, n_obs: int, n_alternatives: int = 3,
                     reported_aic: Optional[float] = None) -> "EstimationResult":
        """A stored result carrying only fit statistics, e.g. figures quoted elsewhere."""
        return cls([], np.zeros(0), np.zeros(0), float(loglik), dg.null_loglik(n_obs, n_alternatives),
                   int(n_obs), int(n_obs), int(df), [], np.zeros((0, 0)), np.zeros(0), np.zeros(0),
                   True, 0, 0.0, "stored", 0, reported_aic=reported_aic)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EstimationResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def check_identification(dataset: ChoiceDataset, spec: ModelSpec) -> None:
    """Raise if the columns entering any one alternative's utility are collinear."""
    if len(dataset) == 0:
        raise IdentificationError("dataset has no observations")
    for alt in spec.alternatives[1:]:
        cols, labels = [], []
        for v in spec.fixed.get(alt, []):
            cols.append(dataset.column(v))
            labels.append(v)
        for r in spec.random:
            if r.alternative != alt:
                continue
            x = dataset.column(r.variable)
            if not r.zero_mean:
                cols.append(x)
                labels.append(r.variable)
            for zname in r.heterogeneity:
                cols.append(x * dataset.column(zname))
                labels.append(f"{r.variable}*{zname}")
        if not cols:
            continue
        m = np.column_stack(cols)
        scale = np.sqrt((m * m).mean(axis=0))
        if np.any(scale == 0):
            raise IdentificationError(f"{alt}: column {labels[int(np.argmin(scale))]!r} is identically zero")
        if np.linalg.matrix_rank(m / scale) < m.shape[1]:
            raise IdentificationError(f"{alt}: collinear covariates among {labels}")


def numerical_hessian(grad, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    n = x.size
    h = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step * max(1.0, abs(x[i]))
        h[:, i] = (grad(x + e) - grad(x - e)) / (2 * e[i])
    return 0.5 * (h + h.T)


def _newton_direction(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Ascent step for a concave quadratic model; eigenvalues are floored if it is not."""
    w, v = np.linalg.eigh(-h)
    floor = max(1e-8, 1e-10 * max(1.0, float(np.abs(w).max(initial=0.0))))
    w = np.maximum(np.abs(w), floor)
    return v @ ((v.T @ g) / w)


def default_start(dataset: ChoiceDataset, spec: ModelSpec, lik: SimulatedLikelihood,
                  options: EstimationOptions) -> np.ndarray:
    """Plain logit estimates for means and fixed terms, small Cholesky diagonal."""
    vec = lik.layout.start(options.chol_start)
    if spec.n_random == 0:
        return vec
    base = spec.without_mixing()
    inner = EstimationOptions(maxiter=options.maxiter, gtol=options.gtol, ftol=options.ftol,
                              raise_on_failure=False)
    mnl = maximize(dataset, base, options=inner, standard_errors=False)
    values = dict(zip(mnl.names, mnl.estimates))
    for j, name in enumerate(lik.layout.names):
        if name in values:
            vec[j] = values[name]
    return vec


def maximize(dataset: ChoiceDataset, spec: ModelSpec, start=None, options: Optional[EstimationOptions] = None,
             draws: Optional[np.ndarray] = None, standard_errors: bool = True) -> EstimationResult:
    """Fit ``spec`` to ``dataset`` by simulated maximum likelihood.

    BFGS on the analytic gradient does the bulk of the ascent; Newton steps
    with a finite-difference Hessian then tighten the optimum until the
    gradient max-norm and the relative change in LL meet the tolerances.
    ``start`` may be a full vector or a mapping from parameter name to value.
    """
    options = options or EstimationOptions()
    check_identification(dataset, spec)
    lik = SimulatedLikelihood(dataset, spec, draws)
    layout = lik.layout
    names = layout.names
    unknown = set(options.hold) - set(names)
    if unknown:
        raise KeyError(f"cannot hold unknown parameters {sorted(unknown)}")

    if start is None:
        x0 = default_start(dataset, spec, lik, options)
    elif isinstance(start, dict):
        x0 = default_start(dataset, spec, lik, options)
        for k, v in start.items():
            x0[names.index(k)] = v
    else:
        x0 = np.asarray(start, dtype=float).copy()
        if x0.shape != (layout.size,):
            raise ValueError(f"start must have {layout.size} entries")
    for k, v in options.hold.items():
        x0[names.index(k)] = v
    free = np.array([n not in options.hold for n in names])
    nfree = int(free.sum())

    def full(xf):
        x = x0.copy()
        x[free] = xf
        return x

    trace: list = []

    def neg(xf):
        ll, g = lik.loglik_and_grad(full(xf))
        trace.append(ll)
        return -ll, -g[free]

    def grad_free(xf):
        return lik.gradient(full(xf))[free]

    iterations = 0
    message = ""
    xf = x0[free]
    if nfree:
        res = minimize(neg, xf, jac=True, method="BFGS",
                       options={"gtol": options.gtol, "maxiter": options.maxiter, "norm": np.inf})
        xf = res.x
        iterations = int(res.nit)
        message = str(res.message)

    ll, g = lik.loglik_and_grad(full(xf))
    g = g[free]
    converged = False
    hess = None
    for _ in range(options.polish_iter if nfree else 0):
        if iterations >= options.maxiter:
            break
        hess = numerical_hessian(grad_free, xf, options.hessian_step)
        d = _newton_direction(hess, g)
        t = 1.0
        while True:
            cand = xf + t * d
            ll_new = lik.loglik(full(cand))
            if ll_new >= ll or t < 1e-8:
                break
            t *= 0.5
        iterations += 1
        if ll_new < ll:
            # no ascent possible along the Newton direction; stay put
            rel = 0.0
        else:
            rel = abs(ll_new - ll) / max(1.0, abs(ll))
            xf, ll = cand, ll_new
            g = grad_free(xf)
        if np.max(np.abs(g)) < options.gtol and rel < options.ftol:
            converged = True
            break
    if nfree == 0:
        converged = True

    x = full(xf)
    # report the Cholesky diagonal with its identified sign
    for j, (a, b) in enumerate(layout.chol_idx):
        if a == b:
            x[layout.slices["chol"].start + j] = abs(x[layout.slices["chol"].start + j])
    xf = x[free]
    grad_max = float(np.max(np.abs(grad_free(xf)))) if nfree else 0.0

    se = np.full(layout.size, np.nan)
    if standard_errors and nfree:
        hess = numerical_hessian(grad_free, xf, options.hessian_step)
        try:
            np.linalg.cholesky(-hess)
            cov = np.linalg.inv(-hess)
            se[free] = np.sqrt(np.diag(cov))
        except np.linalg.LinAlgError:
            warnings.warn("Hessian is not negative definite at the optimum; standard errors unavailable",
                          SingularHessian, stacklevel=2)

    params = layout.unpack(x)
    sigma = params.sigma
    sigma_t = np.full(spec.n_random, np.nan)
    for k, r in enumerate(spec.random):
        if r.variable == CONSTANT:
            continue
        s = float(np.std(dataset.column(r.variable), ddof=1)) if len(dataset) > 1 else 0.0
        if s > 0:
            sigma_t[k] = dg.sigma_t_stat(sigma[k], s, len(dataset))

    result = EstimationResult(
        names=list(names),
        estimates=x,
        std_errors=se,
        loglik=ll,
        loglik0=lik.null_loglik(),
        n_obs=lik.n_obs,
        n_groups=lik.n_groups,
        df=nfree,
        random_names=[r.name for r in spec.random],
        cholesky=params.gamma,
        sigma=sigma,
        sigma_t=sigma_t,
        converged=converged,
        iterations=iterations,
        grad_max=grad_max,
        message=message if converged else f"not converged after {iterations} iterations: {message}",
        n_draws=lik.n_draws if spec.n_random else 0,
        held=sorted(options.hold),
        spec=spec.to_dict(),
        trace=trace,
    )
    if not converged and options.raise_on_failure:
        raise NonConvergence(result.message, result)
    return result
