"""Score calibration and fusion by prior-weighted logistic regression.

A single system is the one-column case of fusion: the fused LLR is an affine
combination ``sum_s w_s * score_s + b`` trained to minimize the prior-weighted
cross-entropy at the effective target prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log1p

from .errors import ContractError, MissingScoreError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class ScoreSet:
    """Scores of one system keyed by ``(model_id, segment_id)``, in insertion order."""

    system_id: str
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        for trial, score in self.entries.items():
            if not np.isfinite(score):
                raise ContractError(f"non-finite score for trial {trial}")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, trial):
        return self.entries[trial]

    def trials(self) -> list:
        return list(self.entries)

    def values(self, trials=None) -> np.ndarray:
        if trials is None:
            return np.fromiter(self.entries.values(), dtype=np.float64, count=len(self.entries))
        return np.array([self.entries[t] for t in trials], dtype=np.float64)

    @classmethod
    def from_arrays(cls, system_id, trials, scores) -> "ScoreSet":
        trials = list(trials)
        entries = dict(zip(trials, (float(s) for s in scores)))
        if len(entries) != len(trials):
            raise ContractError(f"duplicate trials in system {system_id!r}")
        return cls(system_id, entries)


@dataclass
class TrialKey:
    """Target/nontarget labels keyed by ``(model_id, segment_id)``."""

    entries: dict

    def __post_init__(self):
        if not self.entries:
            raise ContractError("trial key is empty")

    def __len__(self):
        return len(self.entries)

    def trials(self) -> list:
        return list(self.entries)

    def labels(self, trials=None) -> np.ndarray:
        trials = self.trials() if trials is None else trials
        return np.array([self.entries[t] for t in trials], dtype=bool)

    def split(self, scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
        """Target and nontarget score arrays for the keyed trials."""
        trials = self.trials()
        missing = [t for t in trials if t not in scores.entries]
        if missing:
            raise MissingScoreError(
                f"system {scores.system_id!r} lacks {len(missing)} keyed trial(s), "
                f"first: {missing[:3]}"
            )
        vals = scores.values(trials)
        labels = self.labels(trials)
        return vals[labels], vals[~labels]


@dataclass
class CalibrationModel:
    system_ids: list
    weights: np.ndarray
    bias: float
    prior: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.system_ids = list(self.system_ids)
        if len(self.system_ids) != self.weights.shape[0]:
            raise ContractError("one weight per system is required")
        if not 0 < self.prior < 1:
            raise ContractError(f"prior must be in (0, 1), got {self.prior}")
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise NumericalError("calibration parameters are not finite")


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + log1p(np.exp(-np.abs(x)))


def stack_scores(scores: list, trials: list) -> np.ndarray:
    """N x S matrix of scores; raises MissingScoreError listing absent trials."""
    columns = []
    for s in scores:
        missing = [t for t in trials if t not in s.entries]
        if missing:
            raise MissingScoreError(
                f"system {s.system_id!r} is missing {len(missing)} trial(s): {missing[:5]}"
            )
        columns.append(s.values(trials))
    return np.column_stack(columns) if columns else np.zeros((len(trials), 0))


def objective(params: np.ndarray, X: np.ndarray, labels: np.ndarray, prior: float, ridge: float = 0.0):
    """Prior-weighted cross-entropy with gradient and Hessian.

    ``params`` holds the system weights followed by the bias.
    """
    tau = logit(prior)
    A = np.column_stack([X, np.ones(X.shape[0])])
    f = A @ params + tau
    n_tar = labels.sum()
    n_non = labels.size - n_tar
    c = np.where(labels, prior / n_tar, (1 - prior) / n_non)
    # target loss log(1+e^-f), nontarget loss log(1+e^f)
    signed = np.where(labels, -f, f)
    value = np.sum(c * _softplus(signed))
    p = expit(f)
    resid = np.where(labels, p - 1.0, p)
    grad = A.T @ (c * resid)
    hess = (A * (c * p * (1 - p))[:, None]).T @ A
    if ridge:
        w = params[:-1]
        value += 0.5 * ridge * w @ w
        grad[:-1] += ridge * w
        hess[:-1, :-1] += ridge * np.eye(w.shape[0])
    return value, grad, hess


def train_calibration(
    scores: list,
    key: TrialKey,
    prior: float = 0.05,
    ridge: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 500,
    init=None,
) -> CalibrationModel:
    """Fit fusion weights and bias by damped Newton on the convex objective."""
    if not 0 < prior < 1:
        raise ContractError(f"prior must be in (0, 1), got {prior}")
    if not scores:
        raise ContractError("at least one system is required")
    trials = key.trials()
    X = stack_scores(scores, trials)
    labels = key.labels(trials)
    if labels.all() or not labels.any():
        raise ContractError("calibration needs both target and nontarget trials")
    params = np.zeros(X.shape[1] + 1) if init is None else np.asarray(init, dtype=np.float64).copy()
    value, grad, hess = objective(params, X, labels, prior, ridge)
    for it in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            break
        step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        slope = grad @ step
        if not slope < 0:
            step, slope = -grad, -(grad @ grad)
        alpha = 1.0
        while True:
            cand = params + alpha * step
            cand_value, cand_grad, cand_hess = objective(cand, X, labels, prior, ridge)
            if cand_value <= value + 1e-4 * alpha * slope or alpha < 1e-12:
                break
            alpha *= 0.5
        if cand_value > value:
            # no descent possible at machine precision; accept the current point
            if np.max(np.abs(grad)) < 1e3 * tol:
                break
            raise NumericalError(f"line search failed at iteration {it}")
        params, value, grad, hess = cand, cand_value, cand_grad, cand_hess
    else:
        if np.max(np.abs(grad)) >= tol:
            raise NumericalError(f"calibration did not converge in {max_iter} iterations")
    return CalibrationModel(
        system_ids=[s.system_id for s in scores],
        weights=params[:-1],
        bias=float(params[-1]),
        prior=prior,
    )


def apply_calibration(model: CalibrationModel, scores: list, system_id: str = "fused", trials=None) -> ScoreSet:
    """Fused LLR per trial; ``scores`` must follow the model's system order."""
    ids = [s.system_id for s in scores]
    if len(scores) != len(model.system_ids):
        raise ContractError(f"model expects systems {model.system_ids}, got {ids}")
    if trials is None:
        trials = scores[0].trials()
    X = stack_scores(scores, trials)
    llr = X @ model.weights + model.bias
    return ScoreSet.from_arrays(system_id, trials, llr)


def calibration_objective(model: CalibrationModel, scores: list, key: TrialKey) -> float:
    trials = key.trials()
    X = stack_scores(scores, trials)
    params = np.append(model.weights, model.bias)
    return float(objective(params, X, key.labels(trials), model.prior)[0])
