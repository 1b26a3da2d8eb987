"""Synthetic data-generating processes with known effects and nuisances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from ..nuisance import IvNuisancePack, NuisancePack
from ..tabular import Dataset
from ..validation import as_float_matrix

__all__ = [
    "DgpSpec",
    "Simulation",
    "generate_dgp",
    "generate_simple_semisynthetic",
    "generate_iv_dgp",
    "DEFAULT_SIGMA",
]

DEFAULT_SIGMA = 0.1


def _col(x) -> np.ndarray:
    return as_float_matrix(x)[:, 0]


def _ind(x, lo, hi) -> np.ndarray:
    # closed interval, matching the "lo <= X <= hi" convention
    return ((x >= lo) & (x <= hi)).astype(float)


@dataclass(frozen=True)
class DgpSpec:
    """One of the six scalar-covariate processes ``Y = m(X) + D tau(X) + N(0, sigma^2)``.

    DGP 4's effect is read as ``0.5 X^2`` for ``X <= 0.6`` and ``0.18``
    afterwards, which is continuous at 0.6. ``dgp4_literal=True`` instead
    adds 0.18 everywhere.
    """

    id: int
    sigma: float = DEFAULT_SIGMA
    dgp4_literal: bool = False

    def __post_init__(self):
        if self.id not in range(1, 7):
            raise ValueError(f"unknown DGP id {self.id}; expected 1..6")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def pi(self, x) -> np.ndarray:
        x = _col(x)
        if self.id in (1, 2, 5):
            return np.full_like(x, 0.05)
        if self.id == 6:
            return np.full_like(x, 0.95)
        return 0.5 - 0.49 * _ind(x, 0.3, 0.6)

    def m(self, x) -> np.ndarray:
        x = _col(x)
        if self.id in (5, 6):
            return np.full_like(x, 0.1)
        return 0.1 * _ind(x, 0.6, 0.8)

    def tau(self, x) -> np.ndarray:
        x = _col(x)
        if self.id == 1:
            return np.full_like(x, 0.5)
        if self.id == 2:
            return 0.5 + 0.1 * _ind(x, 0.2, 0.4)
        if self.id == 3:
            return 0.5 * x ** 2
        if self.id == 4:
            low = (x <= 0.6).astype(float)
            if self.dgp4_literal:
                return 0.5 * x ** 2 * low + 0.18
            return 0.5 * x ** 2 * low + 0.18 * (1 - low)
        return 0.5 * _ind(x, 0.5, 0.8)


@dataclass(frozen=True)
class Simulation:
    """A simulated dataset together with its ground truth.

    Unpacks as ``data, tau, nuisances``. ``extras`` carries process-specific
    truth (IV moments, linear coefficients).
    """

    data: Dataset
    tau: Callable
    nuisances: Optional[NuisancePack] = None
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.data, self.tau, self.nuisances))


def generate_dgp(spec: DgpSpec, n: int, seed: int = 0) -> Simulation:
    """Draw ``X ~ U(0,1)``, ``D ~ Bernoulli(pi(X))``, ``Y = m(X) + D tau(X) + eps``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.random(n)
    pi = spec.pi(x)
    d = (rng.random(n) < pi).astype(float)
    eps = rng.standard_normal(n) * spec.sigma
    y = spec.m(x) + d * spec.tau(x) + eps
    data = Dataset(x.reshape(-1, 1), d, y, known_propensity=pi)
    pack = NuisancePack(lambda dd, xx: spec.m(xx) + np.asarray(dd, dtype=float) * spec.tau(xx),
                        spec.pi, clip_eps=0.005)
    return Simulation(data, spec.tau, pack, {"spec": spec})


def generate_simple_semisynthetic(d: int, n: int, seed: int = 0, sigma: float = 0.2,
                                  n_active: int = 3) -> Simulation:
    """Linear effect and baseline on standard-normal covariates.

    Sparse coefficients are drawn once per seed; the propensity is
    ``0.1 + 0.8 * sigmoid(x0)`` so it stays inside [0.1, 0.9].
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    coef_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    k = min(n_active, d)
    active = np.sort(coef_rng.choice(d, size=k, replace=False))
    tau_coef = np.zeros(d)
    tau_coef[active] = coef_rng.uniform(-0.5, 0.5, size=k)
    tau_icpt = float(coef_rng.uniform(0.2, 0.8))
    base_coef = np.zeros(d)
    base_coef[active] = coef_rng.normal(0.0, 1.0, size=k)
    base_icpt = float(coef_rng.normal())

    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    x = rng.standard_normal((n, d))

    def tau(xx):
        return tau_icpt + as_float_matrix(xx) @ tau_coef

    def m(xx):
        return base_icpt + as_float_matrix(xx) @ base_coef

    def pi(xx):
        return 0.1 + 0.8 * expit(as_float_matrix(xx)[:, 0])

    p = pi(x)
    treat = (rng.random(n) < p).astype(float)
    y = m(x) + treat * tau(x) + sigma * rng.standard_normal(n)
    data = Dataset(x, treat, y, known_propensity=p)
    pack = NuisancePack(lambda dd, xx: m(xx) + np.asarray(dd, dtype=float) * tau(xx), pi, clip_eps=0.05)
    extras = {"tau_intercept": tau_icpt, "tau_coef": tau_coef, "base_intercept": base_icpt,
              "base_coef": base_coef}
    return Simulation(data, tau, pack, extras)


def _iv_tau(x) -> np.ndarray:
    x = _col(x)
    return 0.5 * x ** 2 + 0.1 * _ind(x, 0.2, 0.4)


def generate_iv_dgp(compliance: float, n: int, seed: int = 0, instrument_propensity: float = 0.5,
                    sigma: float = DEFAULT_SIGMA, confounding: float = 0.5) -> Simulation:
    """Stratified trial with one-sided non-compliance.

    ``Z ~ Bernoulli(pi0)`` with ``pi0`` known and stored; each unit is a
    complier with probability ``compliance`` and ``D = Z * complier``. The
    complier indicator also shifts Y, so naive treated-vs-control contrasts
    are confounded. The local effect among compliers is ``tau(x)``.

    ``extras`` holds ``compliance_margin`` (E[D|Z=1,x] - E[D|Z=0,x]),
    ``beta0`` (E[D (Z - pi0)|x], the moment the IV label divides by), and
    the residualization centers ``h``, ``r``, ``pi`` of Y, D and Z on x.
    """
    if not 0 < compliance <= 1:
        raise ValueError("compliance must lie in (0, 1]")
    if not 0 < instrument_propensity < 1:
        raise ValueError("instrument_propensity must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    x = rng.random(n)
    pz = np.full(n, instrument_propensity)
    z = (rng.random(n) < pz).astype(float)
    complier = (rng.random(n) < compliance).astype(float)
    treat = z * complier
    m = lambda xx: 0.1 * _ind(_col(xx), 0.6, 0.8)
    y = m(x) + treat * _iv_tau(x) + confounding * (complier - compliance) + sigma * rng.standard_normal(n)
    data = Dataset(x.reshape(-1, 1), treat, y, instrument=z, known_propensity=pz)

    var_z = instrument_propensity * (1 - instrument_propensity)
    beta0 = lambda xx: np.full(as_float_matrix(xx).shape[0], compliance * var_z)
    alpha0 = lambda xx: _iv_tau(xx) * beta0(xx)
    pi0 = lambda xx: np.full(as_float_matrix(xx).shape[0], instrument_propensity)
    floor = min(0.1, compliance * var_z / 2)
    pack = IvNuisancePack(alpha0, beta0, pi0, beta_floor=floor)
    extras = {
        "iv_pack": pack,
        "beta0": beta0,
        "compliance_margin": lambda xx: np.full(as_float_matrix(xx).shape[0], float(compliance)),
        "h": lambda xx: m(xx) + _iv_tau(xx) * compliance * instrument_propensity,
        "r": lambda xx: np.full(as_float_matrix(xx).shape[0], compliance * instrument_propensity),
        "pi": pi0,
    }
    return Simulation(data, _iv_tau, None, extras)
