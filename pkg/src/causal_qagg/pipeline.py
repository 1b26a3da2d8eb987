"""Split -> nuisances + candidates -> proxy labels -> ensemble weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .metalearners import CateModel, fit_metalearner, model_matrix
from .nuisance import NuisancePack, fit_iv_nuisances
from .proxy import ProxyLabels, dr_labels, iv_labels
from .qagg import EnsembleFit, best_erm, convex_erm, solve_qagg_exact, solve_qagg_greedy
from .tabular import Dataset, SplitPlan

__all__ = ["Stage", "fit_stage", "fit_ensembles", "ENSEMBLE_NAMES"]

# display name -> config method name
ENSEMBLE_NAMES = {"Best": "best", "Convex": "convex", "Q": "qagg"}


@dataclass
class Stage:
    models: list
    labels: ProxyLabels
    fmat: np.ndarray
    nuisance_idx: np.ndarray
    pack: object


def _prior(cfg: RunConfig, name: str) -> float:
    if cfg.qagg.priors and name in cfg.qagg.priors:
        return float(cfg.qagg.priors[name])
    return 1.0


def fit_stage(data: Dataset, plan: SplitPlan, cfg: RunConfig, iv: bool = False) -> Stage:
    """Fit candidates on the train rows and build labels on the ensemble rows.

    Nuisances for the labels are fit on the train rows, or on the ensemble
    rows themselves when ``cfg.no_split`` is set.
    """
    train, ens = plan.train_idx, plan.ensemble_idx
    if ens.size == 0:
        raise ValueError("ensemble split is empty")
    models = [
        fit_metalearner(k, data, train, cfg.nuisance, cfg.final, cfg.seed,
                        propensity_spec=cfg.propensity_spec, clip_eps=cfg.clip_eps,
                        prior_weight=_prior(cfg, k))
        for k in cfg.learners
    ]
    nuis_idx = ens if cfg.no_split else train
    if iv:
        pack = fit_iv_nuisances(data, nuis_idx, cfg.nuisance, cfg.beta_floor,
                                propensity_spec=cfg.propensity_spec, clip_eps=cfg.clip_eps)
        labels = iv_labels(data, ens, pack)
        models.extend(_iv_candidates(data, train, pack, cfg))
    else:
        pack = NuisancePack.fit(data, nuis_idx, cfg.nuisance, cfg.propensity_spec, cfg.clip_eps)
        labels = dr_labels(data, ens, pack)
    fmat = model_matrix(models, data.x[ens])
    return Stage(models, labels, fmat, nuis_idx, pack)


def _iv_candidates(data, train, pack, cfg) -> list:
    """IV-specific candidates: the plug-in ratio and a regression of IV labels on train rows."""
    labels = iv_labels(data, train, pack)
    final = cfg.final.make_regressor().fit(data.x[train], labels.values)
    return [
        CateModel("IV-ratio", pack.tau_prelim, _prior(cfg, "IV-ratio")),
        CateModel("IV-DR", final.predict, _prior(cfg, "IV-DR")),
    ]


def fit_ensembles(stage: Stage, cfg: RunConfig, methods=("best", "convex", "qagg")) -> dict:
    """Fit the requested ensemble methods; keys are config method names."""
    names = [m.name for m in stage.models]
    qcfg = cfg.qagg.to_config(names)
    model_bound = max((m.clip_u for m in stage.models if m.clip_u is not None), default=None)
    from .qagg import resolve_beta

    beta = resolve_beta(qcfg, stage.labels, stage.fmat,
                        None if model_bound is None else max(model_bound, float(np.max(np.abs(stage.fmat)))))
    out = {}
    for m in methods:
        if m == "best":
            out[m] = best_erm(stage.labels, stage.fmat)
        elif m == "convex":
            out[m] = convex_erm(stage.labels, stage.fmat, qcfg.tol, qcfg.max_iters)
        elif m == "greedy" or (m == "qagg" and qcfg.solver == "greedy"):
            out[m] = solve_qagg_greedy(stage.labels, stage.fmat, qcfg, qcfg.greedy_steps, beta=beta)
        elif m == "qagg":
            out[m] = solve_qagg_exact(stage.labels, stage.fmat, qcfg, beta=beta)
        else:
            raise ValueError(f"unknown ensemble method {m!r}")
    return out
