"""Output heads mapping representations to predictive distributions, and their losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import tensor as T
from .config import DECILES
from .tensor import Tensor

SIGMA_FLOOR = 1e-6


@dataclass
class ForecastDistribution:
    """Per-step predictive distribution over (B, H, d_y).

    ``kind`` is one of student_t, mv_student_t, iqf, normal. Parameter arrays:

    * student_t: mu, sigma, nu, each (B, H, d_y)
    * normal: mu, sigma, (B, H, d_y)
    * mv_student_t: mu (B, H, d_y), scale_tril (B, H, d_y, d_y), nu (B, H)
    * iqf: quantiles (B, H, d_y, K) at ``levels``
    """
    kind: str
    params: dict
    levels: tuple = DECILES

    @property
    def shape(self) -> tuple:
        key = "quantiles" if self.kind == "iqf" else "mu"
        return self.params[key].shape[:3]

    def affine(self, loc: np.ndarray, scale: np.ndarray) -> "ForecastDistribution":
        """Map y -> scale * y + loc, with loc/scale shaped (B, d_y)."""
        loc = np.asarray(loc)[:, None, :]
        scale = np.asarray(scale)[:, None, :]
        p = self.params
        if self.kind in ("student_t", "normal"):
            new = dict(p, mu=p["mu"] * scale + loc, sigma=p["sigma"] * scale)
        elif self.kind == "mv_student_t":
            new = dict(p, mu=p["mu"] * scale + loc, scale_tril=scale[..., :, None] * p["scale_tril"])
        elif self.kind == "iqf":
            new = dict(p, quantiles=p["quantiles"] * scale[..., None] + loc[..., None])
        else:
            raise ValueError(f"cannot rescale distribution of kind {self.kind!r}")
        return ForecastDistribution(self.kind, new, self.levels)

    def mean(self) -> np.ndarray:
        """Predictive mean; for quantile forecasts the median stands in."""
        if self.kind == "iqf":
            return self.median()
        return self.params["mu"]

    def median(self) -> np.ndarray:
        """Exact marginal medians (B, H, d_y); every parametric kind here is symmetric."""
        if self.kind == "iqf":
            return self.quantiles((0.5,))[..., 0]
        return self.params["mu"]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` samples, returned as (n, B, H, d_y)."""
        p = self.params
        if self.kind == "student_t":
            t = rng.standard_t(np.broadcast_to(p["nu"], (n,) + p["nu"].shape))
            return p["mu"] + p["sigma"] * t
        if self.kind == "normal":
            return p["mu"] + p["sigma"] * rng.standard_normal((n,) + p["mu"].shape)
        if self.kind == "mv_student_t":
            mu, tril, nu = p["mu"], p["scale_tril"], p["nu"]
            z = rng.standard_normal((n,) + mu.shape)
            w = rng.chisquare(np.broadcast_to(nu, (n,) + nu.shape)) / nu
            return mu + np.einsum("bhij,nbhj->nbhi", tril, z) / np.sqrt(w)[..., None]
        if self.kind == "iqf":
            u = rng.uniform(size=(n,) + self.shape)
            return _interp_quantiles(p["quantiles"], self.levels, u)
        raise ValueError(f"unknown distribution kind {self.kind!r}")

    def quantiles(self, levels=DECILES, n_samples: int | None = None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
        """Quantiles (B, H, d_y, K). Parametric kinds use ``n_samples`` draws, or the exact
        inverse CDF when ``n_samples`` is None."""
        levels = tuple(levels)
        p = self.params
        if self.kind == "iqf":
            if levels == tuple(self.levels):
                return p["quantiles"]
            u = np.broadcast_to(np.asarray(levels), self.shape + (len(levels),))
            return _interp_quantiles(p["quantiles"], self.levels, np.moveaxis(u, -1, 0)).transpose(1, 2, 3, 0)
        if n_samples is None:
            lv = np.asarray(levels)
            if self.kind == "student_t":
                return p["mu"][..., None] + p["sigma"][..., None] * stats.t.ppf(lv, p["nu"][..., None])
            if self.kind == "normal":
                return p["mu"][..., None] + p["sigma"][..., None] * stats.norm.ppf(lv)
            if self.kind == "mv_student_t":
                marginal = np.sqrt((p["scale_tril"] ** 2).sum(-1))
                return p["mu"][..., None] + marginal[..., None] * stats.t.ppf(lv, p["nu"][..., None, None])
        rng = rng or np.random.default_rng(0)
        samples = self.sample(n_samples, rng)
        return np.moveaxis(np.quantile(samples, levels, axis=0), 0, -1)

    def take(self, idx) -> "ForecastDistribution":
        return ForecastDistribution(self.kind, {k: v[idx] for k, v in self.params.items()}, self.levels)


def _interp_quantiles(q: np.ndarray, levels, u: np.ndarray) -> np.ndarray:
    """Piecewise-linear quantile function through (levels, q), flat beyond the ends.

    q is (..., K); u is (n, ...) of probabilities; returns (n, ...).
    """
    lv = np.asarray(levels)
    k = np.clip(np.searchsorted(lv, u) - 1, 0, len(lv) - 2)
    lo, hi = lv[k], lv[k + 1]
    frac = np.clip((u - lo) / (hi - lo), 0.0, 1.0)
    qb = np.broadcast_to(q, u.shape + (q.shape[-1],))
    q_lo = np.take_along_axis(qb, k[..., None], -1)[..., 0]
    q_hi = np.take_along_axis(qb, k[..., None] + 1, -1)[..., 0]
    return q_lo + frac * (q_hi - q_lo)


def predictive_quantiles(dist: ForecastDistribution, levels=DECILES, n_samples: int | None = 100,
                         seed: int = 0) -> np.ndarray:
    return dist.quantiles(levels, n_samples, np.random.default_rng(seed))


# -- heads -------------------------------------------------------------------

class Head:
    kind: str

    def __init__(self, d_y: int, levels=DECILES):
        self.d_y = d_y
        self.levels = tuple(levels)

    @property
    def n_out(self) -> int:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.n_out // self.d_y

    def constrain(self, raw: Tensor) -> dict:
        raise NotImplementedError

    def loss(self, params: dict, y) -> Tensor:
        raise NotImplementedError

    def to_distribution(self, params: dict) -> ForecastDistribution:
        return ForecastDistribution(self.kind, {k: v.data for k, v in params.items()}, self.levels)


class StudentTHead(Head):
    kind = "student_t"

    @property
    def n_out(self):
        return 3 * self.d_y

    def constrain(self, raw):
        raw = raw.reshape(raw.shape[:-1] + (self.d_y, 3))
        return {
            "mu": raw[..., 0],
            "sigma": T.softplus(raw[..., 1]) + SIGMA_FLOOR,
            "nu": T.softplus(raw[..., 2]) + 2.0,
        }

    def loss(self, params, y):
        return nll_student_t(params, y)


class MVStudentTHead(Head):
    kind = "mv_student_t"

    @property
    def n_out(self):
        d = self.d_y
        return d + d * (d + 1) // 2 + 1

    @property
    def n_params(self):
        return self.n_out

    def constrain(self, raw):
        d = self.d_y
        mu = raw[..., :d]
        nu = T.softplus(raw[..., -1]) + 2.0
        rows, c = [], d
        zero = raw[..., :1] * 0.0
        for i in range(d):
            entries = []
            for j in range(d):
                if j < i:
                    entries.append(raw[..., c:c + 1])
                    c += 1
                elif j == i:
                    entries.append(T.softplus(raw[..., c:c + 1]) + SIGMA_FLOOR)
                    c += 1
                else:
                    entries.append(zero)
            rows.append(T.concat(entries, axis=-1))
        tril = T.stack(rows, axis=-2)
        return {"mu": mu, "scale_tril": tril, "nu": nu}

    def loss(self, params, y):
        return nll_mv_student_t(params, y)


class IQFHead(Head):
    """Incremental quantile function: a base quantile plus nonnegative increments."""
    kind = "iqf"

    @property
    def n_out(self):
        return self.d_y * len(self.levels)

    def constrain(self, raw):
        raw = raw.reshape(raw.shape[:-1] + (self.d_y, len(self.levels)))
        base = raw[..., :1]
        steps = T.softplus(raw[..., 1:])
        return {"quantiles": T.concat([base, base + T.cumsum(steps, axis=-1)], axis=-1)}

    def loss(self, params, y):
        return quantile_loss_train(params, y, self.levels)


def make_head(kind: str, d_y: int, levels=DECILES) -> Head:
    heads = {"student_t": StudentTHead, "mv_student_t": MVStudentTHead, "iqf": IQFHead}
    if kind not in heads:
        raise ValueError(f"unsupported head {kind!r}")
    return heads[kind](d_y, levels)


def project_head(representations: Tensor, projection, head: Head) -> dict:
    """Linear projection followed by the head's parameter constraints."""
    return head.constrain(projection(representations))


# -- losses --------------------------------------------------------------------

_LOG_PI = math.log(math.pi)


def student_t_log_prob(mu, sigma, nu, y) -> Tensor:
    z = (T.as_tensor(y, mu.dtype) - mu) / sigma
    half = (nu + 1.0) * 0.5
    return (T.lgamma(half) - T.lgamma(nu * 0.5) - 0.5 * (T.log(nu) + _LOG_PI)
            - T.log(sigma) - half * T.log1p(z * z / nu))


def nll_student_t(params: dict, y) -> Tensor:
    """Mean negative log-likelihood over batch, horizon and target dims."""
    lp = student_t_log_prob(params["mu"], params["sigma"], params["nu"], y)
    return -lp.mean()


def mv_student_t_log_prob(mu, scale_tril, nu, y) -> Tensor:
    d = mu.shape[-1]
    resid = T.as_tensor(y, mu.dtype) - mu
    zs = []
    for i in range(d):
        acc = resid[..., i]
        for j in range(i):
            acc = acc - scale_tril[..., i, j] * zs[j]
        zs.append(acc / scale_tril[..., i, i])
    maha = zs[0] * zs[0]
    logdet = T.log(scale_tril[..., 0, 0])
    for i in range(1, d):
        maha = maha + zs[i] * zs[i]
        logdet = logdet + T.log(scale_tril[..., i, i])
    half = (nu + float(d)) * 0.5
    return (T.lgamma(half) - T.lgamma(nu * 0.5) - 0.5 * d * (T.log(nu) + _LOG_PI)
            - logdet - half * T.log1p(maha / nu))


def nll_mv_student_t(params: dict, y) -> Tensor:
    """Mean joint NLL per position, divided by d_y to stay on the per-dim scale."""
    lp = mv_student_t_log_prob(params["mu"], params["scale_tril"], params["nu"], y)
    return -lp.mean() * (1.0 / params["mu"].shape[-1])


def pinball(q, y, alpha):
    """(alpha - 1{y < q}) (y - q), elementwise, numpy."""
    q = np.asarray(q)
    y = np.asarray(y)
    return (alpha - (y < q)) * (y - q)


def quantile_loss_train(params: dict, y, levels=DECILES) -> Tensor:
    q = params["quantiles"]
    yt = T.as_tensor(np.asarray(y.data if isinstance(y, Tensor) else y)[..., None], q.dtype)
    diff = yt - q
    alpha = np.asarray(levels, dtype=q.dtype)
    weight = alpha - (diff.data < 0)
    return (diff * weight.astype(q.dtype)).mean()
