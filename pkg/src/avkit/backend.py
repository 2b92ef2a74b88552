"""LDA projection and two-covariance PLDA for utterance embeddings.

Scoring chain: center with the global mean, project with LDA, length-normalize,
then compute the PLDA same/different-speaker log-likelihood ratio.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ContractError, NumericalError

logger = logging.getLogger(__name__)


class DegenerateVectorWarning(UserWarning):
    """A vector collapsed to zero and could not be length-normalized."""


@dataclass
class EmbeddingSet:
    ids: list
    speaker_labels: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.ids = list(self.ids)
        self.speaker_labels = list(self.speaker_labels)
        n = self.vectors.shape[0]
        if n < 1:
            raise ContractError("EmbeddingSet needs at least one vector")
        if len(self.ids) != n or len(self.speaker_labels) != n:
            raise ContractError(
                f"{n} vectors but {len(self.ids)} ids and {len(self.speaker_labels)} labels"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise ContractError("embeddings contain NaN or Inf")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def speaker_index(self) -> tuple[list, np.ndarray]:
        """Speakers in first-appearance order and per-row integer codes."""
        speakers = list(dict.fromkeys(self.speaker_labels))
        lookup = {s: i for i, s in enumerate(speakers)}
        return speakers, np.array([lookup[s] for s in self.speaker_labels])


@dataclass
class LdaTransform:
    mean: np.ndarray
    projection: np.ndarray  # d x D
    eigenvalues: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def output_dim(self) -> int:
        return self.projection.shape[0]


def scatter_matrices(vectors: np.ndarray, codes: np.ndarray, num_classes: int):
    """Between- and within-class scatter, both normalized by the sample count."""
    n, dim = vectors.shape
    mean = vectors.mean(axis=0)
    counts = np.bincount(codes, minlength=num_classes).astype(np.float64)
    sums = np.zeros((num_classes, dim))
    np.add.at(sums, codes, vectors)
    class_means = sums / counts[:, None]
    centered = vectors - class_means[codes]
    S_w = centered.T @ centered / n
    diff = class_means - mean
    S_b = (diff * counts[:, None]).T @ diff / n
    return mean, 0.5 * (S_b + S_b.T), 0.5 * (S_w + S_w.T)


def lda_train(data: EmbeddingSet, target_dim: int, reg: float = 1e-6) -> LdaTransform:
    """Fisher LDA via the generalized eigenproblem ``S_b v = lam S_w v``.

    ``S_w`` is regularized by ``reg * trace(S_w) / D`` on the diagonal. Rows of
    the returned projection satisfy ``v' S_w v = 1`` (regularized ``S_w``),
    ordered by decreasing eigenvalue, with the largest-magnitude entry positive.
    """
    speakers, codes = data.speaker_index()
    dim = data.dim
    if len(speakers) < 2:
        raise ContractError("LDA needs at least two speakers")
    if not 1 <= target_dim <= min(dim, len(speakers) - 1):
        raise ContractError(
            f"target_dim {target_dim} must be in [1, min(D={dim}, speakers-1={len(speakers) - 1})]"
        )
    mean, S_b, S_w = scatter_matrices(data.vectors, codes, len(speakers))
    S_w = S_w + reg * np.trace(S_w) / dim * np.eye(dim)
    try:
        evals, evecs = linalg.eigh(S_b, S_w)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"within-class scatter is singular: {exc}") from exc
    order = np.argsort(evals)[::-1][:target_dim]
    V = evecs[:, order]
    pivot = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[pivot, np.arange(V.shape[1])])
    return LdaTransform(mean=mean, projection=V.T.copy(), eigenvalues=evals[order])


def length_normalize(vectors) -> np.ndarray:
    """Scale rows to unit L2 norm; all-zero rows stay zero and trigger a warning."""
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} zero vector(s) left unnormalized: rows {np.flatnonzero(zero).tolist()}",
            DegenerateVectorWarning,
            stacklevel=2,
        )
    return X / np.where(zero, 1.0, norms)[:, None]


def project_and_normalize(transform: LdaTransform, vectors) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != transform.input_dim:
        raise ContractError(
            f"vector dim {X.shape[1]} does not match LDA input dim {transform.input_dim}"
        )
    out = length_normalize((X - transform.mean) @ transform.projection.T)
    return out[0] if single else out


def enroll_template(vectors) -> np.ndarray:
    """Mean of one or more enrollment vectors, length-normalized."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.size == 0:
        raise ContractError("enrollment needs at least one vector")
    X = np.atleast_2d(X)
    return length_normalize(X.mean(axis=0))[0]


# --------------------------------------------------------------------------
# two-covariance PLDA


@dataclass
class PldaModel:
    """x = y + e with y ~ N(mu, B) per speaker and e ~ N(0, W) per session."""

    mu: np.ndarray
    B: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self._scoring = None

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def scoring_terms(self):
        """Quadratic-form matrices ``(Q, P, const)`` of the closed-form LLR."""
        if self._scoring is None:
            T = self.B + self.W
            T_inv = np.linalg.inv(T)
            S = T - self.B @ T_inv @ self.B
            S_inv = np.linalg.inv(S)
            Q = T_inv - S_inv
            P = T_inv @ self.B @ S_inv
            _, logdet_T = np.linalg.slogdet(T)
            _, logdet_S = np.linalg.slogdet(S)
            self._scoring = (
                0.5 * (Q + Q.T),
                0.5 * (P + P.T),
                0.5 * (logdet_T - logdet_S),
            )
        return self._scoring


def _check_pair(model: PldaModel, enroll, test):
    e = np.asarray(enroll, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if e.shape[-1] != model.dim or t.shape[-1] != model.dim:
        raise ContractError(
            f"vector dims {e.shape[-1]}/{t.shape[-1]} do not match PLDA dim {model.dim}"
        )
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
        raise ContractError("PLDA scoring input contains NaN or Inf")
    return e - model.mu, t - model.mu


def plda_llr(model: PldaModel, enroll, test):
    """Same-vs-different speaker LLR; broadcasts over leading dimensions.

    Symmetric in its two vector arguments bit for bit.
    """
    e, t = _check_pair(model, enroll, test)
    Q, P, const = model.scoring_terms()
    quad_e = 0.5 * np.einsum("...i,ij,...j->...", e, Q, e)
    quad_t = 0.5 * np.einsum("...i,ij,...j->...", t, Q, t)
    cross = 0.5 * (
        np.einsum("...i,ij,...j->...", e, P, t) + np.einsum("...i,ij,...j->...", t, P, e)
    )
    return (quad_e + quad_t) + cross + const


def _gauss_logpdf(x: np.ndarray, cov: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericalError("covariance is not positive definite")
    quad = x @ np.linalg.solve(cov, x)
    return -0.5 * (x.shape[0] * np.log(2 * np.pi) + logdet + quad)


def plda_llr_bruteforce(model: PldaModel, enroll, test) -> float:
    """Reference LLR from explicit 2d-dimensional Gaussian densities (small d only)."""
    e, t = _check_pair(model, enroll, test)
    if model.dim > 16:
        raise ContractError("brute-force PLDA scoring is limited to d <= 16")
    T = model.B + model.W
    joint = np.block([[T, model.B], [model.B, T]])
    same = _gauss_logpdf(np.concatenate([e, t]), joint)
    diff = _gauss_logpdf(e, T) + _gauss_logpdf(t, T)
    return float(same - diff)


def _grouped_stats(X: np.ndarray, codes: np.ndarray, num_spk: int):
    counts = np.bincount(codes, minlength=num_spk).astype(np.float64)
    sums = np.zeros((num_spk, X.shape[1]))
    np.add.at(sums, codes, X)
    return counts, sums


def plda_log_likelihood(model: PldaModel, vectors, labels) -> float:
    """Marginal (observed-data) log-likelihood of labelled vectors under the model.

    Uses the per-speaker factorization of the block covariance
    ``I (x) W + 11' (x) B`` into within- and between-mean terms.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    speakers = list(dict.fromkeys(labels))
    lookup = {s: i for i, s in enumerate(speakers)}
    codes = np.array([lookup[s] for s in labels])
    counts, sums = _grouped_stats(X, codes, len(speakers))
    dim = X.shape[1]
    means = sums / counts[:, None]
    dev = X - means[codes]
    W_inv = np.linalg.inv(model.W)
    _, logdet_W = np.linalg.slogdet(model.W)
    within = np.einsum("ni,ij,nj->", dev, W_inv, dev)
    total = -0.5 * (X.shape[0] * dim * np.log(2 * np.pi) + within)
    for n, m in zip(counts, means):
        C = model.W + n * model.B
        _, logdet_C = np.linalg.slogdet(C)
        d = m - model.mu
        total -= 0.5 * ((n - 1) * logdet_W + logdet_C + n * d @ np.linalg.solve(C, d))
    return float(total)


def _regularize_pd(M: np.ndarray, name: str) -> np.ndarray:
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
        return M
    except np.linalg.LinAlgError:
        pass
    dim = M.shape[0]
    jitter = 1e-6 * max(np.trace(M), 1e-12) / dim
    logger.warning("PLDA %s lost positive definiteness; adding %.3g to the diagonal", name, jitter)
    M = M + jitter * np.eye(dim)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"PLDA {name} collapsed and could not be regularized") from exc
    return M


def plda_init(data: EmbeddingSet) -> PldaModel:
    X = data.vectors
    mu = X.mean(axis=0)
    total = np.cov(X, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
    return PldaModel(mu=mu, B=0.5 * total, W=0.5 * total)


def plda_train_em(
    data: EmbeddingSet, iterations: int = 10, history: list | None = None
) -> PldaModel:
    """EM for the two-covariance model, starting from ``B = W = total_cov / 2``.

    If ``history`` is a list, the marginal log-likelihood of the data is
    appended before the first iteration and after each one.
    """
    speakers, codes = data.speaker_index()
    if len(speakers) < 2:
        raise ContractError("PLDA training needs at least two speakers")
    X = data.vectors
    n, dim = X.shape
    counts, sums = _grouped_stats(X, codes, len(speakers))
    scatter = X.T @ X
    model = plda_init(data)
    if history is not None:
        history.append(plda_log_likelihood(model, X, data.speaker_labels))
    for _ in range(iterations):
        B_inv = np.linalg.inv(model.B)
        W_inv = np.linalg.inv(model.W)
        # E-step: Gaussian posterior of every speaker's latent identity
        precisions = B_inv[None] + counts[:, None, None] * W_inv[None]
        covs = np.linalg.inv(precisions)
        rhs = (B_inv @ model.mu)[None] + sums @ W_inv.T
        post_means = np.einsum("sij,sj->si", covs, rhs)
        # M-step
        mu = post_means.mean(axis=0)
        dev = post_means - mu
        B = covs.mean(axis=0) + dev.T @ dev / len(speakers)
        second = np.einsum("s,sij->ij", counts, covs) + (post_means * counts[:, None]).T @ post_means
        cross = sums.T @ post_means
        W = (scatter - cross - cross.T + second) / n
        model = PldaModel(mu=mu, B=_regularize_pd(B, "B"), W=_regularize_pd(W, "W"))
        if history is not None:
            history.append(plda_log_likelihood(model, X, data.speaker_labels))
    return model


@dataclass
class AudioBackend:
    """Trained LDA + PLDA pair, applied as center -> project -> normalize -> LLR."""

    lda: LdaTransform
    plda: PldaModel

    def transform(self, vectors) -> np.ndarray:
        return project_and_normalize(self.lda, vectors)

    def score(self, enroll_vectors, test_vector) -> float:
        """LLR of one test vector against an enrollment of one or more raw vectors."""
        enroll = enroll_template(self.transform(np.atleast_2d(enroll_vectors)))
        return float(plda_llr(self.plda, enroll, self.transform(test_vector)))


def train_backend(
    data: EmbeddingSet,
    lda_dim: int = 150,
    em_iters: int = 10,
    plda_data: EmbeddingSet | None = None,
) -> AudioBackend:
    """Fit LDA on ``data`` and PLDA on its projection (or on ``plda_data``).

    ``lda_dim`` is clipped to what the data supports.
    """
    speakers, _ = data.speaker_index()
    dim = min(lda_dim, data.dim, len(speakers) - 1)
    if dim < lda_dim:
        logger.info("LDA dimension clipped from %d to %d", lda_dim, dim)
    lda = lda_train(data, dim)
    source = plda_data if plda_data is not None else data
    projected = EmbeddingSet(
        source.ids, source.speaker_labels, project_and_normalize(lda, source.vectors)
    )
    return AudioBackend(lda=lda, plda=plda_train_em(projected, em_iters))
