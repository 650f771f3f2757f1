"""Closed-form image metrics over classifier features: Frechet distance and
inception-style score."""

import numpy as np

MIN_FID_SAMPLES = 65
PSD_TOLERANCE = -1e-6


class MetricError(Exception):
    pass


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < PSD_TOLERANCE:
        raise MetricError(f"matrix not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(features_real: np.ndarray, features_gen: np.ndarray) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).

    The cross term uses the symmetrized product form, which is numerically
    robust and symmetric in its arguments.
    """
    for name, feats in (("real", features_real), ("generated", features_gen)):
        if feats.shape[0] < MIN_FID_SAMPLES:
            raise MetricError(
                f"{name} side has {feats.shape[0]} samples; "
                f"need >= {MIN_FID_SAMPLES} for a full-rank covariance"
            )
    mu1, mu2 = features_real.mean(0), features_gen.mean(0)
    s1 = np.cov(features_real, rowvar=False)
    s2 = np.cov(features_gen, rowvar=False)
    s1_half = _psd_sqrt(s1)
    cross = _psd_sqrt(s1_half @ s2 @ s1_half)
    dist = float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2.0 * cross))
    return max(dist, 0.0)


def inception_score(class_probs: np.ndarray) -> float:
    """exp of the mean KL between per-sample class posteriors and the
    marginal class distribution."""
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise MetricError("need at least 2 class distributions")
    probs = probs / probs.sum(axis=1, keepdims=True)
    marginal = probs.mean(axis=0)
    eps = 1e-12
    kl = (probs * (np.log(probs + eps) - np.log(marginal + eps))).sum(axis=1)
    return float(np.exp(kl.mean()))
