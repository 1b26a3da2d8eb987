"""Q-aggregation of candidate models over the probability simplex.

The objective for weights ``theta`` on an ``n x M`` model matrix ``F`` and
labels ``y`` is::

    Q(theta) = (1 - nu) * mean((y - F theta)^2)
               + nu * sum_j theta_j * mean((y - F_j)^2)
               + (beta / n) * sum_j theta_j * log(1 / pi_j)

``nu = 0`` with ``beta = 0`` is convex stacking; at a vertex the objective
does not depend on ``nu``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .proxy import ProxyLabels

__all__ = [
    "SimplexWeights",
    "QaggConfig",
    "EnsembleFit",
    "SolverError",
    "q_objective",
    "empirical_variance",
    "prior_penalty",
    "kkt_residual",
    "default_beta",
    "solve_qagg_exact",
    "solve_qagg_greedy",
    "best_erm",
    "convex_erm",
    "QAggregation",
    "ConvexERM",
    "BestERM",
]

METHODS = ("qagg_exact", "qagg_greedy", "best_erm", "convex_erm")


class SolverError(RuntimeError):
    """The exact solver did not reach its KKT tolerance.

    ``theta`` holds the best iterate found and ``kkt`` its KKT violation.
    """

    def __init__(self, message: str, theta: np.ndarray, kkt: float):
        super().__init__(f"{message} (KKT residual {kkt:.3e})")
        self.theta = theta
        self.kkt = kkt


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    """Nonnegative weights renormalized to sum to one on construction."""

    theta: np.ndarray

    def __post_init__(self):
        t = np.array(self.theta, dtype=float).reshape(-1)
        if t.size == 0:
            raise ValueError("empty weight vector")
        if not np.all(np.isfinite(t)):
            raise ValueError("weights must be finite")
        if np.any(t < 0):
            raise ValueError(
                "weights must be nonnegative; clip negatives to 0 and renormalize (theta / theta.sum())"
            )
        s = t.sum()
        if s <= 0:
            raise ValueError("weights sum to zero; cannot renormalize onto the simplex")
        t = t / s
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.theta > 0)

    @property
    def M(self) -> int:
        return self.theta.size

    @classmethod
    def vertex(cls, j: int, M: int) -> "SimplexWeights":
        e = np.zeros(M)
        e[j] = 1.0
        return cls(e)

    @classmethod
    def uniform(cls, M: int) -> "SimplexWeights":
        return cls(np.full(M, 1.0 / M))


@dataclass(frozen=True)
class QaggConfig:
    """Objective and solver settings.

    ``beta_pen=None`` resolves to ``max(112 U^2, 56 U^3)`` when the priors are
    non-uniform and to 0 otherwise, with U the larger of the label and model
    bounds. ``priors`` are normalized to sum to one.
    """

    nu: float = 0.5
    beta_pen: Optional[float] = None
    priors: Optional[tuple] = None
    solver: str = "exact"
    greedy_steps: Optional[int] = None
    tol: float = 1e-10
    max_iters: int = 50_000

    def __post_init__(self):
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu must lie in [0, 1], got {self.nu}")
        if self.beta_pen is not None and self.beta_pen < 0:
            raise ValueError("beta_pen must be >= 0")
        if self.solver not in ("exact", "greedy"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.greedy_steps is not None and self.greedy_steps < 1:
            raise ValueError("greedy_steps must be >= 1")
        if self.priors is not None:
            p = tuple(float(v) for v in np.asarray(self.priors, dtype=float).reshape(-1))
            if any(not (0 < v <= 1) for v in p):
                raise ValueError("priors must lie in (0, 1]")
            object.__setattr__(self, "priors", p)

    def prior_costs(self, M: int) -> np.ndarray:
        """``log(1 / pi_j)`` with priors normalized over the M models."""
        if self.priors is None:
            return np.full(M, math.log(M))
        p = np.asarray(self.priors, dtype=float)
        if p.size != M:
            raise ValueError(f"got {p.size} priors for {M} models")
        return -np.log(p / p.sum())

    @property
    def uniform_prior(self) -> bool:
        return self.priors is None or len(set(self.priors)) <= 1


def default_beta(bound_u: float) -> float:
    """``max(112 U^2, 56 U^3)``."""
    return max(112.0 * bound_u ** 2, 56.0 * bound_u ** 3)


def _labels(labels) -> np.ndarray:
    if isinstance(labels, ProxyLabels):
        return labels.values
    y = np.asarray(labels, dtype=float).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    return y


def _check(y, F, theta=None):
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F.reshape(-1, 1)
    if F.ndim != 2 or F.shape[0] != y.size:
        raise ValueError(f"model matrix shape {F.shape} does not match {y.size} labels")
    if F.shape[1] == 0:
        raise ValueError("model matrix has no columns")
    if theta is not None and theta.size != F.shape[1]:
        raise ValueError(f"theta has {theta.size} entries for {F.shape[1]} models")
    return F


def resolve_beta(cfg: QaggConfig, labels, fmat, model_bound: Optional[float] = None) -> float:
    if cfg.beta_pen is not None:
        return float(cfg.beta_pen)
    if cfg.uniform_prior:
        return 0.0
    y = _labels(labels)
    u = float(np.max(np.abs(y)))
    u = max(u, float(np.max(np.abs(fmat))) if model_bound is None else model_bound)
    return default_beta(u)


def _theta(theta) -> np.ndarray:
    if isinstance(theta, SimplexWeights):
        return theta.theta
    return np.asarray(theta, dtype=float).reshape(-1)


def prior_penalty(theta, cfg: QaggConfig, n: int, beta: float) -> float:
    t = _theta(theta)
    return beta / n * float(t @ cfg.prior_costs(t.size))


def q_objective(theta, labels, fmat, cfg: QaggConfig, beta: Optional[float] = None) -> float:
    """Evaluate Q at ``theta`` (any vector; simplex membership is not enforced)."""
    y = _labels(labels)
    t = _theta(theta)
    F = _check(y, fmat, t)
    if beta is None:
        beta = resolve_beta(cfg, y, F)
    n = y.size
    ens = np.mean((y - F @ t) ** 2)
    indiv = np.mean((y[:, None] - F) ** 2, axis=0)
    return float((1 - cfg.nu) * ens + cfg.nu * (t @ indiv) + beta / n * (t @ cfg.prior_costs(t.size)))


def empirical_variance(theta, fmat) -> float:
    """``sum_j theta_j mean((F_j - F theta)^2)``, the spread of models around the blend."""
    t = _theta(theta)
    F = np.asarray(fmat, dtype=float)
    if F.ndim == 1:
        F = F.reshape(-1, 1)
    if F.shape[1] != t.size:
        raise ValueError("dimension mismatch")
    ft = F @ t
    return float(t @ np.mean((F - ft[:, None]) ** 2, axis=0))


class _Quadratic:
    """Q as ``coef * (t'Gt - 2 b't + yy) + lin't`` with cached Gram terms."""

    def __init__(self, y, F, nu, beta, costs):
        n = y.size
        self.coef = 1.0 - nu
        self.G = F.T @ F / n
        self.b = F.T @ y / n
        self.yy = float(y @ y / n)
        indiv = np.mean((y[:, None] - F) ** 2, axis=0)
        self.lin = nu * indiv + beta / n * costs
        self.M = F.shape[1]

    def restrict(self, idx) -> "_Quadratic":
        sub = object.__new__(_Quadratic)
        sub.coef, sub.yy = self.coef, self.yy
        sub.G = self.G[np.ix_(idx, idx)]
        sub.b, sub.lin = self.b[idx], self.lin[idx]
        sub.M = len(idx)
        return sub

    def value(self, t):
        return float(self.coef * (t @ self.G @ t - 2 * self.b @ t + self.yy) + self.lin @ t)

    def grad(self, t):
        return 2 * self.coef * (self.G @ t - self.b) + self.lin

    @property
    def hess(self):
        return 2 * self.coef * self.G


def _kkt(grad: np.ndarray, t: np.ndarray) -> float:
    on = t > 0
    lam = float(t @ grad)
    res = float(np.max(np.abs(grad[on] - lam)))
    if (~on).any():
        res = max(res, float(np.max(np.maximum(lam - grad[~on], 0.0))))
    return res


def kkt_residual(theta, labels, fmat, cfg: QaggConfig, beta: Optional[float] = None) -> float:
    """Largest violation of the simplex KKT conditions at ``theta``.

    On the support every partial derivative must equal a common multiplier;
    off the support no partial derivative may fall below it.
    """
    y = _labels(labels)
    t = _theta(theta)
    F = _check(y, fmat, t)
    if beta is None:
        beta = resolve_beta(cfg, y, F)
    prob = _Quadratic(y, F, cfg.nu, beta, cfg.prior_costs(t.size))
    return _kkt(prob.grad(t), t)


def _eg(prob: _Quadratic, t: np.ndarray, tol: float, max_iters: int):
    """Exponentiated gradient with backtracking on the mirror-descent bound."""
    val = prob.value(t)
    g = prob.grad(t)
    eta = 1.0 / max(float(np.max(np.abs(g))), 1e-12)
    it = 0
    for it in range(1, max_iters + 1):
        while True:
            z = -eta * (g - g.min())
            new = t * np.exp(z)
            new /= new.sum()
            new_val = prob.value(new)
            with np.errstate(divide="ignore", invalid="ignore"):
                kl = float(np.sum(np.where(new > 0, new * np.log(new / t), 0.0)))
            if new_val <= val + g @ (new - t) + kl / eta + 1e-15 * abs(val) or eta < 1e-20:
                break
            eta *= 0.5
        done = abs(val - new_val) <= tol * max(1.0, abs(val))
        t, val = new, new_val
        if done:
            break
        g = prob.grad(t)
        eta *= 2.0
    return t, it


def _active_set(prob: _Quadratic, t: np.ndarray, max_iter: int):
    """Primal active-set refinement on the simplex, started from a feasible point."""
    M = prob.M
    t = np.where(t > 1e-10 * t.max(), t, 0.0)
    t /= t.sum()
    H = prob.hess
    scale = max(1.0, float(np.max(np.abs(H))), float(np.max(np.abs(prob.grad(t)))))
    for _ in range(max_iter):
        S = np.flatnonzero(t > 0)
        g = prob.grad(t)
        k = S.size
        if k > 1:
            # orthonormal basis of {p : sum(p) = 0} on S
            basis = np.linalg.qr(np.vstack([np.ones(k), np.eye(k)[:-1]]).T)[0][:, 1:]
            Hr = basis.T @ H[np.ix_(S, S)] @ basis
            gr = basis.T @ g[S]
            ev, V = np.linalg.eigh(Hr)
            comp = V.T @ gr
            flat = ev <= 1e-12 * scale
            null_part = np.where(flat, comp, 0.0)
            if np.max(np.abs(null_part)) > 1e-13 * scale:
                # objective is linear along this direction: slide to a face
                p = -(basis @ (V @ null_part))
                t = _ratio_step(t, S, p, np.inf)
                continue
            u = -np.where(flat, 0.0, comp / np.where(flat, 1.0, ev))
            p = basis @ (V @ u)
            if np.any(t[S] + p < 0):
                t = _ratio_step(t, S, p, 1.0)
                continue
            t = t.copy()
            t[S] += p
            t = np.maximum(t, 0.0)
            t /= t.sum()
            g = prob.grad(t)
        lam = float(t @ g)
        off = np.setdiff1d(np.arange(M), S)
        if off.size:
            viol = g[off] - lam
            j = int(np.argmin(viol))
            if viol[j] < -1e-12 * scale:
                # enter with a small feasible step along e_j - t
                d = -t.copy()
                d[off[j]] += 1.0
                curv = float(d @ H @ d)
                slope = float(g @ d)
                step = 1.0 if curv <= 0 else min(1.0, -slope / curv)
                t = t + step * d
                t = np.maximum(t, 0.0)
                t /= t.sum()
                continue
        return t
    return t


def _ratio_step(t, S, p, cap):
    """Move along p on S until the first coordinate hits zero (or ``cap``)."""
    neg = p < 0
    steps = np.where(neg, t[S] / np.where(neg, -p, 1.0), np.inf)
    r = int(np.argmin(steps))
    step = min(cap, float(steps[r]))
    t = t.copy()
    t[S] += step * p
    if step < cap or (cap == np.inf):
        t[S[r]] = 0.0
    t = np.maximum(t, 0.0)
    return t / t.sum()


def _solve(prob: _Quadratic, tol: float, max_iters: int, start: Optional[np.ndarray] = None):
    M = prob.M
    if M == 1:
        return np.ones(1), 0
    t0 = np.full(M, 1.0 / M) if start is None else start
    t, iters = _eg(prob, t0, tol, max_iters)
    t = _active_set(prob, t, 50 + 10 * M)
    return t, iters


@dataclass(frozen=True)
class EnsembleFit:
    weights: SimplexWeights
    objective: float
    method: str
    iterations: int = 0
    nu: float = 0.0
    beta: float = 0.0
    kkt_residual: float = 0.0
    priors: Optional[tuple] = None
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def theta(self) -> np.ndarray:
        return self.weights.theta

    def config(self) -> QaggConfig:
        return QaggConfig(nu=self.nu, beta_pen=self.beta, priors=self.priors)

    def predict(self, fmat) -> np.ndarray:
        return np.asarray(fmat, dtype=float) @ self.theta

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "nu": self.nu,
            "beta": self.beta,
            "theta": [float(v) for v in self.theta],
            "objective": self.objective,
            "iterations": int(self.iterations),
            "kkt_residual": self.kkt_residual,
        }
        if self.priors is not None:
            out["priors"] = list(self.priors)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleFit":
        return cls(
            weights=SimplexWeights(np.asarray(d["theta"], dtype=float)),
            objective=float(d["objective"]),
            method=d["method"],
            iterations=int(d.get("iterations", 0)),
            nu=float(d["nu"]),
            beta=float(d["beta"]),
            kkt_residual=float(d.get("kkt_residual", 0.0)),
            priors=tuple(d["priors"]) if d.get("priors") is not None else None,
        )


def _finish(t, y, F, cfg, beta, method, iters, history=()):
    w = SimplexWeights(t)
    obj = q_objective(w, y, F, cfg, beta)
    prob = _Quadratic(y, F, cfg.nu, beta, cfg.prior_costs(F.shape[1]))
    return EnsembleFit(w, obj, method, iters, cfg.nu, beta, _kkt(prob.grad(w.theta), w.theta),
                       cfg.priors, tuple(history))


def solve_qagg_exact(labels, fmat, cfg: QaggConfig = QaggConfig(), *, beta: Optional[float] = None,
                     kkt_tol: float = 1e-6) -> EnsembleFit:
    """Minimize Q over the simplex.

    Exponentiated-gradient iterations with backtracking reach the optimal
    face; an active-set pass then solves the stationarity system there.
    Raises :class:`SolverError` if the result violates KKT by more than
    ``kkt_tol``.
    """
    y = _labels(labels)
    F = _check(y, fmat)
    if beta is None:
        beta = resolve_beta(cfg, y, F)
    prob = _Quadratic(y, F, cfg.nu, beta, cfg.prior_costs(F.shape[1]))
    t, iters = _solve(prob, cfg.tol, cfg.max_iters)
    kkt = _kkt(prob.grad(t), t)
    if not kkt <= kkt_tol:
        raise SolverError(f"Q-aggregation did not converge in {cfg.max_iters} iterations", t, kkt)
    return _finish(t, y, F, cfg, beta, "qagg_exact", iters)


def greedy_step_size(k: int) -> float:
    return 2.0 / (k + 1)


def solve_qagg_greedy(labels, fmat, cfg: QaggConfig = QaggConfig(), k: Optional[int] = None, *,
                      beta: Optional[float] = None, kkt_tol: float = 1e-6) -> EnsembleFit:
    """Greedy model averaging: k vertex pulls, each followed by an exact solve on the support.

    Step k mixes the current weights with the vertex ``e_J`` at rate
    ``2 / (k + 1)``, choosing J to minimize Q, then re-optimizes Q over the
    accumulated support. With ``k=None`` it runs until an iteration improves
    Q by less than 1e-10 or k reaches M.
    """
    y = _labels(labels)
    F = _check(y, fmat)
    M = F.shape[1]
    if k is None:
        k = cfg.greedy_steps
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    if beta is None:
        beta = resolve_beta(cfg, y, F)
    prob = _Quadratic(y, F, cfg.nu, beta, cfg.prior_costs(M))
    t = np.zeros(M)
    support: list = []
    history = []
    iters = 0
    prev = np.inf
    steps = k if k is not None else M
    for step in range(1, steps + 1):
        a = greedy_step_size(step)
        cand = (1 - a) * t[None, :] + a * np.eye(M)
        vals = np.array([prob.value(c) for c in cand])
        J = int(np.argmin(vals))
        if J not in support:
            support.append(J)
        idx = np.array(sorted(support))
        sub = prob.restrict(idx)
        ts, it = _solve(sub, cfg.tol, cfg.max_iters)
        kkt = _kkt(sub.grad(ts), ts)
        if not kkt <= kkt_tol:
            full = np.zeros(M)
            full[idx] = ts
            raise SolverError("restricted Q-aggregation step did not converge", full, kkt)
        iters += it
        t = np.zeros(M)
        t[idx] = ts
        val = prob.value(t)
        history.append(val)
        if k is None and prev - val < 1e-10:
            break
        prev = val
    return _finish(t, y, F, cfg, beta, "qagg_greedy", iters, history)


def best_erm(labels, fmat) -> EnsembleFit:
    """Single model with the lowest empirical square loss (ties to the lowest index)."""
    y = _labels(labels)
    F = _check(y, fmat)
    losses = np.mean((y[:, None] - F) ** 2, axis=0)
    j = int(np.argmin(losses))
    cfg = QaggConfig(nu=0.0, beta_pen=0.0)
    return _finish(SimplexWeights.vertex(j, F.shape[1]).theta, y, F, cfg, 0.0, "best_erm", 0)


def convex_erm(labels, fmat, tol: float = 1e-10, max_iters: int = 50_000) -> EnsembleFit:
    """Convex stacking: Q-aggregation with ``nu = 0``, ``beta = 0``, uniform prior."""
    y = _labels(labels)
    F = _check(y, fmat)
    cfg = QaggConfig(nu=0.0, beta_pen=0.0, tol=tol, max_iters=max_iters)
    fit = solve_qagg_exact(y, F, cfg, beta=0.0)
    return replace(fit, method="convex_erm")


# --- scikit-learn style front ends ------------------------------------------

class _EnsembleBase(RegressorMixin, BaseEstimator):
    def predict(self, F):
        check_is_fitted(self, "fit_")
        return np.asarray(F, dtype=float) @ self.coef_

    def _store(self, fit: EnsembleFit):
        self.fit_ = fit
        self.coef_ = fit.theta.copy()
        self.objective_ = fit.objective
        self.support_ = fit.weights.support
        return self


class QAggregation(_EnsembleBase):
    """Q-aggregation ensemble weights as an estimator: ``fit(F, labels)``, ``predict(F)``."""

    def __init__(self, nu: float = 0.5, beta=None, priors=None, solver: str = "exact",
                 n_steps: Optional[int] = None, tol: float = 1e-10, max_iter: int = 50_000):
        self.nu = nu
        self.beta = beta
        self.priors = priors
        self.solver = solver
        self.n_steps = n_steps
        self.tol = tol
        self.max_iter = max_iter

    def config(self) -> QaggConfig:
        return QaggConfig(nu=self.nu, beta_pen=self.beta,
                          priors=None if self.priors is None else tuple(self.priors),
                          solver=self.solver, greedy_steps=self.n_steps, tol=self.tol,
                          max_iters=self.max_iter)

    def fit(self, F, y):
        cfg = self.config()
        if cfg.solver == "greedy":
            return self._store(solve_qagg_greedy(y, F, cfg))
        return self._store(solve_qagg_exact(y, F, cfg))


class ConvexERM(_EnsembleBase):
    def __init__(self, tol: float = 1e-10, max_iter: int = 50_000):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, F, y):
        return self._store(convex_erm(y, F, self.tol, self.max_iter))


class BestERM(_EnsembleBase):
    def fit(self, F, y):
        return self._store(best_erm(y, F))
