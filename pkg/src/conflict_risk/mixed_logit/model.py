"""
Model layout and simulated log-likelihood for grouped mixed logit.

Utilities of the reference alternative are zero. For every other alternative
``j`` the utility of observation ``i`` in group ``g`` at draw ``r`` is

    V_ij = sum_fixed b_t x_it + sum_random (m_k + theta_k . z_i + (Gamma w_gr)_k) x_ik

with one vector of standard-normal draws ``w_gr`` per group and draw, shared
by all observations of the group. The group likelihood averages the product
of the observations' logit probabilities over draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .halton import HaltonConfig, halton_draws

DEFAULT_ALTERNATIVES = ("None", "Slight", "Severe")
CONSTANT = "const"


class SpecError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class NonFiniteUtility(FloatingPointError):
    pass


class IdentificationError(SpecError):
    pass


@dataclass(frozen=True)
class RandomTerm:
    alternative: str
    variable: str
    zero_mean: bool = False
    heterogeneity: tuple = ()

    @property
    def name(self) -> str:
        return f"{self.alternative}:{self.variable}"


@dataclass
class ModelSpec:
    """Declarative model layout.

    ``fixed`` maps each non-reference alternative to its fixed-coefficient
    variables (``"const"`` is a column of ones). ``cholesky_mask`` is a
    lower-triangular boolean matrix over the random terms marking free
    entries; the diagonal is always free and ``None`` means uncorrelated.
    """

    alternatives: tuple = DEFAULT_ALTERNATIVES
    fixed: dict = field(default_factory=dict)
    random: list = field(default_factory=list)
    cholesky_mask: Optional[np.ndarray] = None
    halton: HaltonConfig = field(default_factory=HaltonConfig)

    def __post_init__(self):
        self.alternatives = tuple(self.alternatives)
        self.random = [r if isinstance(r, RandomTerm) else RandomTerm(**r) for r in self.random]
        for r in self.random:
            object.__setattr__(r, "heterogeneity", tuple(r.heterogeneity))
        k = len(self.random)
        if self.cholesky_mask is None:
            self.cholesky_mask = np.eye(k, dtype=bool)
        self.cholesky_mask = np.asarray(self.cholesky_mask, dtype=bool)
        if self.cholesky_mask.size == 0:
            self.cholesky_mask = self.cholesky_mask.reshape(0, 0)  # JSON stores an empty mask as []
        if self.cholesky_mask.shape != (k, k):
            raise SpecError(f"Cholesky mask must be {k}x{k}")
        if np.triu(self.cholesky_mask, 1).any():
            raise SpecError("Cholesky mask must be lower triangular")
        self.cholesky_mask = self.cholesky_mask | np.eye(k, dtype=bool)
        for alt in list(self.fixed) + [r.alternative for r in self.random]:
            if alt not in self.alternatives[1:]:
                raise SpecError(f"unknown or reference alternative {alt!r}")
        names = [r.name for r in self.random]
        if len(set(names)) != len(names):
            raise SpecError("duplicate random term")
        for alt, vars_ in self.fixed.items():
            if any(f"{alt}:{v}" in names for v in vars_):
                raise SpecError(f"a variable of {alt!r} is declared both fixed and random")

    @property
    def n_random(self) -> int:
        return len(self.random)

    @property
    def reference(self) -> str:
        return self.alternatives[0]

    @property
    def heterogeneity_vars(self) -> list:
        out: list = []
        for r in self.random:
            for z in r.heterogeneity:
                if z not in out:
                    out.append(z)
        return out

    def variables(self) -> list:
        out: list = []
        for vars_ in self.fixed.values():
            out += [v for v in vars_ if v != CONSTANT and v not in out]
        for r in self.random:
            if r.variable != CONSTANT and r.variable not in out:
                out.append(r.variable)
        return out

    def correlate(self, *blocks) -> "ModelSpec":
        """Copy of the spec with all pairs inside each block of term names free."""
        names = [r.name for r in self.random]
        mask = np.eye(len(names), dtype=bool)
        for block in blocks:
            idx = sorted(names.index(n) for n in block)
            for a in idx:
                for b in idx:
                    if b < a:
                        mask[a, b] = True
        return ModelSpec(self.alternatives, dict(self.fixed), list(self.random), mask, self.halton)

    def without_mixing(self) -> "ModelSpec":
        """Plain logit with every random mean turned into a fixed coefficient."""
        fixed = {alt: list(v) for alt, v in self.fixed.items()}
        for r in self.random:
            if not r.zero_mean:
                fixed.setdefault(r.alternative, []).append(r.variable)
        return ModelSpec(self.alternatives, fixed, [], None, self.halton)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        halton = HaltonConfig(**{
            k: (tuple(v) if k == "primes" and v is not None else v)
            for k, v in doc.get("halton", {}).items()
        })
        random = [RandomTerm(r["alternative"], r["variable"], bool(r.get("zero_mean", False)),
                             tuple(r.get("heterogeneity", ()))) for r in doc.get("random", [])]
        spec = cls(
            alternatives=tuple(doc.get("alternatives", DEFAULT_ALTERNATIVES)),
            fixed={k: list(v) for k, v in doc.get("fixed", {}).items()},
            random=random,
            cholesky_mask=doc.get("cholesky_mask"),
            halton=halton,
        )
        if doc.get("correlated"):
            mask = spec.correlate(*doc["correlated"]).cholesky_mask
            spec.cholesky_mask = spec.cholesky_mask | mask
        return spec

    @classmethod
    def load(cls, path) -> "ModelSpec":
        with Path(path).open() as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        h = self.halton
        return {
            "alternatives": list(self.alternatives),
            "fixed": {k: list(v) for k, v in self.fixed.items()},
            "random": [
                {"alternative": r.alternative, "variable": r.variable, "zero_mean": r.zero_mean,
                 "heterogeneity": list(r.heterogeneity)}
                for r in self.random
            ],
            "cholesky_mask": self.cholesky_mask.astype(int).tolist(),
            "halton": {"draws": h.draws, "skip": h.skip, "primes": None if h.primes is None else list(h.primes),
                       "scramble": h.scramble, "seed": h.seed},
        }


@dataclass
class Parameters:
    """Unpacked coefficients: fixed, random means, heterogeneity loadings, Cholesky factor."""

    fixed: np.ndarray
    means: np.ndarray
    theta: np.ndarray  # (K, H)
    gamma: np.ndarray  # (K, K) lower triangular

    @property
    def covariance(self) -> np.ndarray:
        return self.gamma @ self.gamma.T

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.sum(self.gamma**2, axis=1))


class Layout:
    """Mapping between a flat parameter vector and :class:`Parameters`."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.fixed_terms = [(alt, v) for alt in spec.alternatives[1:] for v in spec.fixed.get(alt, [])]
        self.hvars = spec.heterogeneity_vars
        k = spec.n_random
        names = [f"{a}:{v}" for a, v in self.fixed_terms]
        self.mean_idx = [i for i, r in enumerate(spec.random) if not r.zero_mean]
        names += [spec.random[i].name for i in self.mean_idx]
        self.theta_idx = [(i, self.hvars.index(z)) for i, r in enumerate(spec.random) for z in r.heterogeneity]
        names += [f"{spec.random[i].name}|{self.hvars[h]}" for i, h in self.theta_idx]
        self.chol_idx = [(a, b) for a in range(k) for b in range(a + 1) if spec.cholesky_mask[a, b]]
        names += [f"chol:{spec.random[a].name}/{spec.random[b].name}" for a, b in self.chol_idx]
        self.names = names
        nf, nm, nt = len(self.fixed_terms), len(self.mean_idx), len(self.theta_idx)
        self.slices = {
            "fixed": slice(0, nf),
            "means": slice(nf, nf + nm),
            "theta": slice(nf + nm, nf + nm + nt),
            "chol": slice(nf + nm + nt, len(names)),
        }

    @property
    def size(self) -> int:
        return len(self.names)

    def unpack(self, vec: np.ndarray) -> Parameters:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise DimensionMismatch(f"expected {self.size} parameters, got {vec.shape}")
        k = self.spec.n_random
        means = np.zeros(k)
        means[self.mean_idx] = vec[self.slices["means"]]
        theta = np.zeros((k, len(self.hvars)))
        for v, (i, h) in zip(vec[self.slices["theta"]], self.theta_idx):
            theta[i, h] = v
        gamma = np.zeros((k, k))
        for v, (a, b) in zip(vec[self.slices["chol"]], self.chol_idx):
            gamma[a, b] = abs(v) if a == b else v
        return Parameters(vec[self.slices["fixed"]].copy(), means, theta, gamma)

    def pack(self, params: Parameters) -> np.ndarray:
        out = [np.asarray(params.fixed, dtype=float).ravel(), np.asarray(params.means)[self.mean_idx]]
        out.append(np.array([params.theta[i, h] for i, h in self.theta_idx]))
        out.append(np.array([params.gamma[a, b] for a, b in self.chol_idx]))
        return np.concatenate(out)

    def start(self, diag: float = 0.1) -> np.ndarray:
        vec = np.zeros(self.size)
        for j, (a, b) in enumerate(self.chol_idx):
            if a == b:
                vec[self.slices["chol"].start + j] = diag
        return vec


def mnl_probabilities(x: np.ndarray, beta_by_alternative: np.ndarray) -> np.ndarray:
    """Logit choice probabilities.

    ``beta_by_alternative`` has one coefficient row per alternative; give the
    reference alternative a zero row. ``x`` may be one covariate vector or a
    matrix of them (one row per observation).
    """
    x = np.asarray(x, dtype=float)
    b = np.asarray(beta_by_alternative, dtype=float)
    v = x @ b.T
    if not np.all(np.isfinite(v)):
        raise NonFiniteUtility("utility is not finite")
    return np.exp(v - logsumexp(v, axis=-1, keepdims=True))


def probabilities_from_utilities(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFiniteUtility("utility is not finite")
    return np.exp(v - logsumexp(v, axis=-1, keepdims=True))


def realize_coefficients(params: Parameters, z, omega) -> np.ndarray:
    """Fixed coefficients followed by the random ones for covariates ``z`` and draw ``omega``."""
    k = params.means.shape[0]
    omega = np.asarray(omega, dtype=float)
    z = np.asarray(z, dtype=float)
    if omega.shape != (k,):
        raise DimensionMismatch(f"draw has shape {omega.shape}, model has {k} random coefficients")
    if z.shape != (params.theta.shape[1],):
        raise DimensionMismatch(f"heterogeneity vector has shape {z.shape}, expected ({params.theta.shape[1]},)")
    return np.concatenate([params.fixed, params.means + params.theta @ z + params.gamma @ omega])


@dataclass
class ChoiceDataset:
    """Observations with outcome labels and a grouping column."""

    frame: pd.DataFrame
    outcome: str = "outcome"
    group: str = "group_id"
    alternatives: tuple = DEFAULT_ALTERNATIVES

    def __post_init__(self):
        bad = set(self.frame[self.outcome].astype(str)) - set(self.alternatives)
        if bad:
            raise SpecError(f"outcomes {sorted(bad)} not among alternatives {self.alternatives}")

    def __len__(self):
        return len(self.frame)

    @property
    def n_groups(self) -> int:
        return int(self.frame[self.group].nunique())

    def column(self, name: str) -> np.ndarray:
        if name == CONSTANT:
            return np.ones(len(self.frame))
        if name not in self.frame.columns:
            raise SpecError(f"dataset has no column {name!r}")
        return self.frame[name].to_numpy(dtype=float)


class SimulatedLikelihood:
    """Simulated log-likelihood and its analytic gradient for one dataset and spec.

    Draws are generated once at construction and reused for every
    evaluation, which keeps the objective smooth in the parameters.
    """

    def __init__(self, dataset: ChoiceDataset, spec: ModelSpec, draws: Optional[np.ndarray] = None,
                 chunk_size: int = 400_000):
        if len(dataset) == 0:
            raise SpecError("dataset has no observations")
        if tuple(dataset.alternatives) != tuple(spec.alternatives):
            raise SpecError("dataset and spec disagree on alternatives")
        self.spec = spec
        self.layout = Layout(spec)
        df = dataset.frame
        order = np.argsort(pd.factorize(df[dataset.group], sort=False)[0], kind="stable")
        df = df.iloc[order]
        codes, uniques = pd.factorize(df[dataset.group], sort=False)
        self.group_labels = np.asarray(uniques)
        self.n_obs = len(df)
        self.n_groups = len(uniques)
        self.starts = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
        self.gidx = codes
        alt_index = {a: j for j, a in enumerate(spec.alternatives)}
        self.n_alt = len(spec.alternatives)
        self.y = df[dataset.outcome].astype(str).map(alt_index).to_numpy()
        sub = ChoiceDataset(df, dataset.outcome, dataset.group, dataset.alternatives)

        lay = self.layout
        self.xf = np.column_stack([sub.column(v) for _, v in lay.fixed_terms]) if lay.fixed_terms else np.zeros((self.n_obs, 0))
        self.jf = np.array([alt_index[a] for a, _ in lay.fixed_terms], dtype=int)
        k = spec.n_random
        self.xr = np.column_stack([sub.column(r.variable) for r in spec.random]) if k else np.zeros((self.n_obs, 0))
        self.jr = np.array([alt_index[r.alternative] for r in spec.random], dtype=int)
        self.z = np.column_stack([sub.column(v) for v in lay.hvars]) if lay.hvars else np.zeros((self.n_obs, 0))
        for name, arr in (("fixed", self.xf), ("random", self.xr), ("heterogeneity", self.z)):
            if not np.all(np.isfinite(arr)):
                raise SpecError(f"non-finite values in {name} covariates")

        if k == 0:
            self.draws = np.zeros((self.n_groups, 1, 0))
        elif draws is not None:
            draws = np.asarray(draws, dtype=float)
            if draws.shape[0] != self.n_groups or draws.shape[2] != k:
                raise DimensionMismatch(f"draws must be (groups={self.n_groups}, R, {k}), got {draws.shape}")
            self.draws = draws
        else:
            self.draws = halton_draws(spec.halton, k, self.n_groups)
        self.n_draws = self.draws.shape[1]

        per_group = np.diff(np.r_[self.starts, self.n_obs])
        self.chunks = []
        g0, acc = 0, 0
        for g, m in enumerate(per_group):
            acc += m * self.n_draws
            if acc >= chunk_size:
                self.chunks.append((g0, g + 1))
                g0, acc = g + 1, 0
        if g0 < self.n_groups:
            self.chunks.append((g0, self.n_groups))
        self.group_sizes = per_group

    # ------------------------------------------------------------------
    def _chunk(self, params: Parameters, g0: int, g1: int, want_grad: bool):
        i0 = self.starts[g0]
        i1 = self.starts[g1] if g1 < self.n_groups else self.n_obs
        sl = slice(i0, i1)
        n, R, J = i1 - i0, self.n_draws, self.n_alt
        xf, xr, z, y = self.xf[sl], self.xr[sl], self.z[sl], self.y[sl]
        gloc = self.gidx[sl] - g0
        starts = self.starts[g0:g1] - i0
        omega = self.draws[g0:g1]  # (G, R, K)

        v0 = np.zeros((n, J))
        if xf.shape[1]:
            np.add.at(v0.T, self.jf, (xf * params.fixed).T)
        v = np.repeat(v0[:, None, :], R, axis=1)
        k = xr.shape[1]
        if k:
            mean = params.means + z @ params.theta.T  # (n, K)
            shift = omega @ params.gamma.T  # (G, R, K)
            coef = mean[:, None, :] + shift[gloc]  # (n, R, K)
            contrib = coef * xr[:, None, :]
            for kk in range(k):
                v[:, :, self.jr[kk]] += contrib[:, :, kk]
        if not np.all(np.isfinite(v)):
            raise NonFiniteUtility("utility is not finite")
        lse = logsumexp(v, axis=2)
        lp = np.take_along_axis(v, y[:, None, None].repeat(R, axis=1), axis=2)[:, :, 0] - lse
        lpg = np.add.reduceat(lp, starts, axis=0)  # (G, R)
        lg = logsumexp(lpg, axis=1) - math.log(R)
        if not want_grad:
            return lg, None

        w = np.exp(lpg - (lg + math.log(R))[:, None])  # posterior draw weights, rows sum to 1
        p = np.exp(v - lse[:, :, None])
        resid = -p
        resid[np.arange(n), :, y] += 1.0  # (n, R, J)
        wr = resid * w[gloc][:, :, None]
        s = wr.sum(axis=1)  # (n, J)

        lay = self.layout
        G = g1 - g0
        grad = np.zeros((G, lay.size))
        if xf.shape[1]:
            grad[:, lay.slices["fixed"]] = np.add.reduceat(s[:, self.jf] * xf, starts, axis=0)
        if k:
            sk = s[:, self.jr] * xr  # (n, K)
            if lay.mean_idx:
                grad[:, lay.slices["means"]] = np.add.reduceat(sk[:, lay.mean_idx], starts, axis=0)
            if lay.theta_idx:
                cols = np.column_stack([sk[:, i] * z[:, h] for i, h in lay.theta_idx])
                grad[:, lay.slices["theta"]] = np.add.reduceat(cols, starts, axis=0)
            q = np.add.reduceat(wr[:, :, self.jr] * xr[:, None, :], starts, axis=0)  # (G, R, K)
            dg = np.einsum("grk,grl->gkl", q, omega)
            cs = lay.slices["chol"].start
            raw = None
            for j, (a, b) in enumerate(lay.chol_idx):
                val = dg[:, a, b]
                if a == b:
                    if raw is None:
                        raw = self._raw_chol
                    val = val * (1.0 if raw[j] >= 0 else -1.0)
                grad[:, cs + j] = val
        return lg, grad

    def group_loglik(self, vec: np.ndarray) -> np.ndarray:
        params = self.layout.unpack(vec)
        return np.concatenate([self._chunk(params, g0, g1, False)[0] for g0, g1 in self.chunks])

    def loglik(self, vec: np.ndarray) -> float:
        return math.fsum(self.group_loglik(vec))

    def loglik_and_grad(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=float)
        params = self.layout.unpack(vec)
        self._raw_chol = vec[self.layout.slices["chol"]]
        lgs, grads = [], []
        for g0, g1 in self.chunks:
            lg, gr = self._chunk(params, g0, g1, True)
            lgs.append(lg)
            grads.append(gr)
        grad = np.concatenate(grads)
        return math.fsum(np.concatenate(lgs)), np.array([math.fsum(col) for col in grad.T])

    def gradient(self, vec: np.ndarray) -> np.ndarray:
        return self.loglik_and_grad(vec)[1]

    def null_loglik(self) -> float:
        return -self.n_obs * math.log(self.n_alt)


def simulated_loglik(dataset: ChoiceDataset, spec: ModelSpec, params, draws: Optional[np.ndarray] = None) -> float:
    """Simulated log-likelihood at ``params`` (a :class:`Parameters` or flat vector)."""
    lik = SimulatedLikelihood(dataset, spec, draws)
    vec = lik.layout.pack(params) if isinstance(params, Parameters) else params
    return lik.loglik(vec)
