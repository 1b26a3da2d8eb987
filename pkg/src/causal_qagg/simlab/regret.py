"""RMSE regret against the best single candidate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

from ..metalearners import CateModel
from ..validation import as_float_matrix

__all__ = ["RegretReport", "evaluate_regret", "rmse"]


def rmse(pred, truth) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2)))


@dataclass(frozen=True)
class RegretReport:
    """Per-method RMSE and regret ``rmse - min candidate rmse``.

    ``normalized`` divides each regret by the mean regret over every method
    in the report; it is NaN with fewer than two methods or a zero mean.
    """

    methods: tuple
    rmse: dict
    oracle_rmse: float
    oracle_name: str
    regret: dict
    normalized: dict


def evaluate_regret(fits: Sequence[Tuple[str, Callable]], candidates: Sequence[CateModel],
                    truth: Callable, test_x) -> RegretReport:
    test_x = as_float_matrix(test_x)
    if test_x.shape[0] == 0:
        raise ValueError("test_x is empty")
    if len(candidates) == 0:
        raise ValueError("need at least one candidate model")
    t = np.asarray(truth(test_x), dtype=float).reshape(-1)
    scores = {}
    for m in candidates:
        scores[m.name] = rmse(m.predict(test_x), t)
    cand_names = list(scores)
    for name, fn in fits:
        scores[name] = rmse(np.asarray(fn(test_x), dtype=float).reshape(-1), t)
    best = min(cand_names, key=lambda k: (scores[k], cand_names.index(k)))
    oracle = scores[best]
    regret = {k: v - oracle for k, v in scores.items()}
    mean = float(np.mean(list(regret.values())))
    if len(regret) >= 2 and mean > 0:
        normalized = {k: v / mean for k, v in regret.items()}
    else:
        normalized = {k: float("nan") for k in regret}
    return RegretReport(tuple(scores), scores, oracle, best, regret, normalized)
