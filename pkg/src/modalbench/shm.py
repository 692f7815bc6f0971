"""Damage-detection baselines on modal or spectral features.

Supervised: per-class Gaussian densities with maximum-likelihood means and
covariances, combined with class priors into posterior class probabilities.
Unsupervised: Mahalanobis discordancy against a baseline population, with
the alarm threshold taken from a Monte Carlo quantile.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import AlignmentError, Frf, GridError, ModalBenchError, ModalParameterSet

log = logging.getLogger(__name__)

RIDGE = 1e-8


class DegenerateClassError(ModalBenchError, ValueError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    """Observations in rows.  ``meta`` holds one dict per row (excitation
    level, damage location, added mass and the like)."""

    rows: np.ndarray
    labels: Optional[tuple] = None
    meta: Optional[tuple] = None

    def __post_init__(self):
        x = np.array(self.rows, float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not np.all(np.isfinite(x)):
            raise ValueError("feature matrix contains missing or non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "rows", x)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != x.shape[0]:
                raise AlignmentError("labels must cover every row")
            object.__setattr__(self, "labels", labels)
        if self.meta is not None:
            meta = tuple(self.meta)
            if len(meta) != x.shape[0]:
                raise AlignmentError("meta must cover every row")
            object.__setattr__(self, "meta", meta)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def subset(self, index) -> "FeatureMatrix":
        index = np.asarray(index, int)
        labels = None if self.labels is None else tuple(self.labels[i] for i in index)
        meta = None if self.meta is None else tuple(self.meta[i] for i in index)
        return FeatureMatrix(self.rows[index], labels, meta)


def _ridge(cov: np.ndarray) -> float:
    d = cov.shape[0]
    tr = float(np.trace(cov))
    return RIDGE * tr / d if tr > 0 else RIDGE


def _ml_covariance(x: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """ML covariance plus ridge; also returns the ridge and whether the raw
    estimate was singular."""
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / x.shape[0]
    ridge = _ridge(cov)
    singular = np.linalg.matrix_rank(cov) < cov.shape[0]
    return cov + ridge * np.eye(cov.shape[0]), ridge, bool(singular)


# -- features ----------------------------------------------------------------

def extract_frequency_features(per_sensor_modal: Sequence[ModalParameterSet],
                               exclude: Sequence[int] = ()) -> np.ndarray:
    """Mean natural frequency of each mode across sensors, dropping the
    0-based indices in ``exclude``."""
    if not per_sensor_modal:
        raise ValueError("no sensors supplied")
    counts = {len(m) for m in per_sensor_modal}
    if len(counts) != 1:
        raise AlignmentError(f"sensors report different mode counts: {sorted(counts)}")
    freqs = np.array([m.frequencies for m in per_sensor_modal])
    mean = freqs.mean(axis=0)
    keep = np.setdiff1d(np.arange(mean.size), np.asarray(list(exclude), int))
    return mean[keep]


def match_modes_to_bands(modal: ModalParameterSet, bands) -> np.ndarray:
    """Frequencies ordered by band; each band contributes its ``modes``
    lowest in-band frequencies, ``nan`` where a band came up short."""
    out = []
    for b in bands:
        lo, hi, k = (b.lower, b.upper, b.modes) if hasattr(b, "lower") else b
        inside = sorted(m.frequency_hz for m in modal if lo <= m.frequency_hz <= hi)
        inside = inside[:k] + [np.nan] * max(0, k - len(inside))
        out.extend(inside)
    return np.array(out)


def extract_spectral_features(frf: Frf, band: tuple, n_lines: int) -> np.ndarray:
    """Linear magnitudes at the ``n_lines`` grid lines nearest to an even
    spread across ``band``; a single line sits at mid-band."""
    lo, hi = band
    f = frf.frequencies
    if lo < f[0] - 1e-9 or hi > f[-1] + 1e-9 or lo > hi:
        raise GridError(f"band [{lo}, {hi}] Hz lies outside the FRF grid")
    inside = np.flatnonzero((f >= lo - 1e-9) & (f <= hi + 1e-9))
    if inside.size < n_lines:
        raise GridError(f"band [{lo}, {hi}] Hz holds {inside.size} lines, need {n_lines}")
    if n_lines == 1:
        points = np.array([(lo + hi) / 2])
    else:
        points = np.linspace(lo, hi, n_lines)
    idx = inside[np.argmin(np.abs(f[inside][None, :] - points[:, None]), axis=1)]
    return np.abs(frf.values[idx])


# -- PCA ---------------------------------------------------------------------

@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    variances: np.ndarray

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.variances.sum()
        return self.variances / total if total > 0 else np.zeros_like(self.variances)

    def transform(self, x) -> np.ndarray:
        return (np.atleast_2d(x) - self.mean) @ self.components.T

    def inverse_transform(self, z) -> np.ndarray:
        return np.atleast_2d(z) @ self.components + self.mean


def pca_fit_transform(features: FeatureMatrix, n_components: int):
    if not 1 <= n_components <= features.dim:
        raise ValueError(f"n_components must lie in [1, {features.dim}]")
    x = features.rows
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    all_var = s ** 2 / max(x.shape[0] - 1, 1)
    variances = np.zeros(features.dim)
    variances[:all_var.size] = all_var
    comps = vt[:n_components]
    if comps.shape[0] < n_components:
        # fewer observations than dimensions: complete the basis
        q, _ = np.linalg.qr(np.vstack([comps, np.eye(features.dim)]).T)
        comps = q.T[:n_components]
    basis = PcaBasis(mean, comps, variances[:n_components])
    z = basis.transform(x)
    return FeatureMatrix(z, features.labels, features.meta), basis


# -- supervised GMM ----------------------------------------------------------

@dataclass(frozen=True)
class GaussianClass:
    label: object
    prior: float
    mean: np.ndarray
    covariance: np.ndarray
    regularized: bool = False


@dataclass(frozen=True)
class GmmModel:
    classes: tuple

    @property
    def labels(self) -> list:
        return [c.label for c in self.classes]

    @property
    def dim(self) -> int:
        return self.classes[0].mean.size


def gmm_fit(train: FeatureMatrix) -> GmmModel:
    """One Gaussian per class: sample mean, ML covariance plus a
    ``1e-8 trace / d`` ridge, prior equal to the class share of the rows."""
    if train.labels is None:
        raise ValueError("training features need labels")
    labels = np.array(train.labels, dtype=object)
    uniq = sorted(set(train.labels), key=str)
    classes = []
    for lab in uniq:
        x = train.rows[labels == lab]
        if x.shape[0] < 2:
            raise DegenerateClassError(f"class {lab!r} has {x.shape[0]} sample(s); need >= 2")
        cov, ridge, singular = _ml_covariance(x)
        if singular or x.shape[0] < train.dim + 1:
            log.warning("class %r: covariance regularised with ridge %.3g", lab, ridge)
        classes.append(GaussianClass(lab, x.shape[0] / train.n, x.mean(axis=0), cov,
                                     singular or x.shape[0] < train.dim + 1))
    return GmmModel(tuple(classes))


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(z ** 2, axis=0) + logdet + mean.size * np.log(2 * np.pi))


def gmm_posteriors(model: GmmModel, x) -> np.ndarray:
    """Posterior class probabilities, one row per observation."""
    x = np.atleast_2d(np.asarray(x, float))
    if x.shape[1] != model.dim:
        raise AlignmentError(f"feature dimension {x.shape[1]} differs from model {model.dim}")
    priors = np.array([c.prior for c in model.classes])
    logp = np.column_stack([_log_gauss(x, c.mean, c.covariance) for c in model.classes])
    logp = logp + np.log(priors / priors.sum())
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def gmm_classify(model: GmmModel, x):
    """``(label, posterior)`` for one feature vector."""
    post = gmm_posteriors(model, x)[0]
    return model.classes[int(np.argmax(post))].label, post


def gmm_predict(model: GmmModel, x) -> list:
    post = gmm_posteriors(model, x)
    return [model.classes[i].label for i in np.argmax(post, axis=1)]


def stratified_split(labels: Sequence, fraction: float = 0.5, seed: int = 0):
    """Seeded per-class split; returns ``(train_idx, test_idx)``.  Every class
    contributes ``round(fraction * count)`` rows to training, at least one."""
    labels = np.array(list(labels), dtype=object)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab in sorted(set(labels.tolist()), key=str):
        idx = np.flatnonzero(labels == lab)
        rng.shuffle(idx)
        k = min(max(1, int(round(fraction * idx.size))), idx.size)
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(np.array(train, int)), np.sort(np.array(test, int))


def confusion_matrix(true_labels: Sequence, predicted: Sequence, labels: Optional[Sequence] = None):
    """Counts with true labels in rows; returns ``(matrix, labels)``."""
    if labels is None:
        labels = sorted(set(true_labels) | set(predicted), key=str)
    pos = {lab: i for i, lab in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)), int)
    for t, p in zip(true_labels, predicted):
        m[pos[t], pos[p]] += 1
    return m, list(labels)


# -- novelty detection -------------------------------------------------------

@dataclass(frozen=True)
class NoveltyDetector:
    mean: np.ndarray
    covariance: np.ndarray
    threshold: float
    confidence: float = 0.99
    _precision: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self._precision is None:
            object.__setattr__(self, "_precision", np.linalg.inv(self.covariance))


def mahalanobis_squared(x, mean, precision) -> np.ndarray:
    d = np.atleast_2d(np.asarray(x, float)) - mean
    return np.einsum("ij,jk,ik->i", d, precision, d)


def novelty_fit(normal: FeatureMatrix, confidence: float = 0.99, mc_samples: int = 100_000,
                seed: int = 0) -> NoveltyDetector:
    """Mean and ridge-regularised covariance of the baseline rows; the
    threshold is the ``confidence`` quantile of the discordancy over
    ``mc_samples`` draws from the fitted Gaussian."""
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if normal.n < normal.dim + 1:
        log.warning("novelty baseline has %d rows for %d features; covariance is ridge-dominated",
                    normal.n, normal.dim)
    mean = normal.rows.mean(axis=0)
    cov, ridge, singular = _ml_covariance(normal.rows)
    if singular:
        log.warning("baseline covariance singular; ridge %.3g added", ridge)
    precision = np.linalg.inv(cov)
    draws = np.random.default_rng(seed).multivariate_normal(mean, cov, size=mc_samples,
                                                            method="cholesky")
    d = mahalanobis_squared(draws, mean, precision)
    return NoveltyDetector(mean, cov, float(np.quantile(d, confidence)), confidence, precision)


def novelty_score(detector: NoveltyDetector, x):
    """``(D, outlier)`` for one vector, or arrays for a 2-D batch."""
    x = np.asarray(x, float)
    if x.shape[-1] != detector.mean.size:
        raise AlignmentError("feature dimension differs from the detector")
    d = mahalanobis_squared(x, detector.mean, detector._precision)
    if x.ndim == 1:
        return float(d[0]), bool(d[0] > detector.threshold)
    return d, d > detector.threshold


# -- serialisation -----------------------------------------------------------

def _label_json(label):
    return label.item() if isinstance(label, np.generic) else label


def model_to_dict(model) -> dict:
    if isinstance(model, GmmModel):
        return {"type": "gmm", "classes": [
            {"label": _label_json(c.label), "prior": c.prior, "mean": c.mean.tolist(),
             "covariance": c.covariance.tolist(), "regularized": c.regularized}
            for c in model.classes]}
    if isinstance(model, NoveltyDetector):
        return {"type": "novelty", "mean": model.mean.tolist(),
                "covariance": model.covariance.tolist(), "threshold": model.threshold,
                "confidence": model.confidence}
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_dict(data: dict):
    kind = data.get("type")
    if kind == "gmm":
        return GmmModel(tuple(GaussianClass(c["label"], float(c["prior"]), np.array(c["mean"]),
                                            np.array(c["covariance"]), bool(c.get("regularized")))
                              for c in data["classes"]))
    if kind == "novelty":
        return NoveltyDetector(np.array(data["mean"]), np.array(data["covariance"]),
                               float(data["threshold"]), float(data["confidence"]))
    raise ValueError(f"unknown model type {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
