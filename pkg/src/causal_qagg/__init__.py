"""Doubly robust Q-aggregation for ensembling CATE models."""

__version__ = "0.1.0"

from .learners import LearnerSpec
from .metalearners import CateModel, MetaLearner, MetaLearnerKind, fit_all_metalearners, fit_metalearner
from .nuisance import IvNuisancePack, NuisancePack, fit_iv_nuisances
from .proxy import ProxyLabels, bias_oracle, dr_labels, ipw_labels, iv_labels
from .qagg import (BestERM, ConvexERM, EnsembleFit, QAggregation, QaggConfig, SimplexWeights,
                   best_erm, convex_erm, q_objective, solve_qagg_exact, solve_qagg_greedy)
from .tabular import Dataset, FeatureMap, SplitPlan, make_split, read_csv, write_csv

__all__ = [
    "__version__",
    "LearnerSpec",
    "CateModel",
    "MetaLearner",
    "MetaLearnerKind",
    "fit_all_metalearners",
    "fit_metalearner",
    "IvNuisancePack",
    "NuisancePack",
    "fit_iv_nuisances",
    "ProxyLabels",
    "bias_oracle",
    "dr_labels",
    "ipw_labels",
    "iv_labels",
    "BestERM",
    "ConvexERM",
    "EnsembleFit",
    "QAggregation",
    "QaggConfig",
    "SimplexWeights",
    "best_erm",
    "convex_erm",
    "q_objective",
    "solve_qagg_exact",
    "solve_qagg_greedy",
    "Dataset",
    "FeatureMap",
    "SplitPlan",
    "make_split",
    "read_csv",
    "write_csv",
]
