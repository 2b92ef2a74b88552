"""Detection metrics: exact ROC sweep, EER, minDCF, actDCF and DET export.

A trial is accepted when ``score >= threshold``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from .errors import ContractError


@dataclass
class RocCurve:
    thresholds: np.ndarray  # ascending; the last one is +inf (reject all)
    p_miss: np.ndarray
    p_fa: np.ndarray

    def __len__(self):
        return self.thresholds.shape[0]


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ContractError("p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ContractError("detection costs must be positive")

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1 - self.p_target))

    @property
    def bayes_threshold(self) -> float:
        return float(np.log(self.c_fa * (1 - self.p_target) / (self.c_miss * self.p_target)))


@dataclass
class EvalReport:
    eer: float  # percent
    min_dcf: float
    act_dcf: float
    n_target: int
    n_nontarget: int
    params: DcfParams = DcfParams()

    def to_dict(self) -> dict:
        """JSON-ready dict, rounded as in the usual results tables."""
        return {
            "eer_percent": round(self.eer, 2),
            "min_dcf": round(self.min_dcf, 3),
            "act_dcf": round(self.act_dcf, 3),
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
            "params": asdict(self.params),
        }


def _as_scores(tar, non):
    tar = np.asarray(tar, dtype=np.float64).ravel()
    non = np.asarray(non, dtype=np.float64).ravel()
    if tar.size == 0 or non.size == 0:
        raise ContractError("need at least one target and one nontarget score")
    if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
        raise ContractError("scores must be finite")
    return tar, non


def roc_points(tar, non) -> RocCurve:
    """Error rates at every distinct score used as threshold, plus +inf."""
    tar, non = _as_scores(tar, non)
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    # misses: targets strictly below; false alarms: nontargets at or above
    p_miss = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non_sorted, thresholds, side="left")) / non.size
    return RocCurve(thresholds, p_miss, p_fa)


def eer(curve: RocCurve) -> float:
    """EER in percent, linearly interpolated where ``p_miss - p_fa`` changes sign."""
    diff = curve.p_miss - curve.p_fa
    i = int(np.argmax(diff >= 0))  # diff ends at +1 so a crossing always exists
    if diff[i] == 0 or i == 0:
        return 100.0 * float(curve.p_miss[i])
    d0, d1 = diff[i - 1], diff[i]
    alpha = -d0 / (d1 - d0)
    value = curve.p_miss[i - 1] + alpha * (curve.p_miss[i] - curve.p_miss[i - 1])
    return 100.0 * float(value)


def normalized_cost(p_miss, p_fa, params: DcfParams):
    cost = params.c_miss * params.p_target * np.asarray(p_miss) + params.c_fa * (
        1 - params.p_target
    ) * np.asarray(p_fa)
    return cost / params.normalizer


def min_dcf(curve: RocCurve, params: DcfParams | None = None) -> float:
    params = params or DcfParams()
    return float(np.min(normalized_cost(curve.p_miss, curve.p_fa, params)))


def act_dcf(tar_llr, non_llr, params: DcfParams | None = None) -> float:
    """Normalized cost of hard decisions at the Bayes threshold on calibrated LLRs."""
    params = params or DcfParams()
    tar, non = _as_scores(tar_llr, non_llr)
    beta = params.bayes_threshold
    p_miss = np.mean(tar < beta)
    p_fa = np.mean(non >= beta)
    return float(normalized_cost(p_miss, p_fa, params))


def det_points(curve: RocCurve, eps: float = 1e-6) -> np.ndarray:
    """``(probit(p_fa), probit(p_miss))`` rows, probabilities clamped to [eps, 1-eps]."""
    p_fa = np.clip(curve.p_fa, eps, 1 - eps)
    p_miss = np.clip(curve.p_miss, eps, 1 - eps)
    return np.column_stack([norm.ppf(p_fa), norm.ppf(p_miss)])


def evaluate(tar, non, params: DcfParams | None = None) -> EvalReport:
    """EER, minDCF and actDCF (scores read as LLRs) for one system."""
    params = params or DcfParams()
    tar, non = _as_scores(tar, non)
    curve = roc_points(tar, non)
    return EvalReport(
        eer=eer(curve),
        min_dcf=min_dcf(curve, params),
        act_dcf=act_dcf(tar, non, params),
        n_target=int(tar.size),
        n_nontarget=int(non.size),
        params=params,
    )
