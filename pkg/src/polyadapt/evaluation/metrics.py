"""Pure metric functions over numpy feature arrays."""

from __future__ import annotations

import warnings

import numpy as np

from polyadapt.errors import ContractViolation

SHRINKAGE = 1e-6
NEG_EIG_WARN = 1e-6


def _unit(x):
    x = np.asarray(x, dtype=float)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def sim_score(image_emb, text_emb):
    """100 x cosine similarity, row-wise for 2-D inputs."""
    return 100.0 * np.sum(_unit(image_emb) * _unit(text_emb), axis=-1)


def _sqrt_trace(s1, s2):
    """Tr((s1 s2)^{1/2}) through the symmetric form s1^{1/2} s2 s1^{1/2}."""
    w, v = np.linalg.eigh((s1 + s1.T) / 2)
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    m = root @ s2 @ root
    eig = np.linalg.eigvalsh((m + m.T) / 2)
    scale = max(float(np.abs(eig).max()), 1.0)
    if eig.min() < -NEG_EIG_WARN * scale:
        warnings.warn(f"Frechet: clamping negative eigenvalue {eig.min():.3g}", RuntimeWarning)
    return float(np.sqrt(np.clip(eig, 0.0, None)).sum())


def frechet_from_stats(mu1, sigma1, mu2, sigma2):
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) for given Gaussians."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    sigma1, sigma2 = np.asarray(sigma1, float), np.asarray(sigma2, float)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ContractViolation(f"Frechet: shape mismatch {mu1.shape} vs {mu2.shape}")
    diff = mu1 - mu2
    val = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2)
                - 2.0 * _sqrt_trace(sigma1, sigma2))
    return max(val, 0.0)


def gaussian_stats(feats, shrinkage=SHRINKAGE):
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ContractViolation(f"Frechet needs at least 2 samples per set, got {feats.shape}")
    sigma = np.cov(feats, rowvar=False) + shrinkage * np.eye(feats.shape[1])
    return feats.mean(axis=0), sigma


def frechet_distance(feats_a, feats_b, shrinkage=SHRINKAGE):
    """Fréchet distance between Gaussians fitted to two feature sets [n, d], [m, d]."""
    return frechet_from_stats(*gaussian_stats(feats_a, shrinkage), *gaussian_stats(feats_b, shrinkage))


def retrieval_accuracy(emb_a, emb_b, content=None):
    """Share of rows of ``emb_a`` whose cosine-nearest row of ``emb_b`` is a match.

    Rows are assumed ordered by scene id, so ``argmax`` breaks ties towards the
    lowest id. Row i matches row j when ``content[i] == content[j]``; by
    default only the same row matches.
    """
    a, b = _unit(emb_a), _unit(emb_b)
    if a.shape != b.shape:
        raise ContractViolation(f"retrieval: shape mismatch {a.shape} vs {b.shape}")
    nearest = np.argmax(a @ b.T, axis=1)
    keys = np.arange(len(a)) if content is None else np.asarray(content)
    return float(np.mean(keys[nearest] == keys))


def silhouette(points, labels):
    """Mean silhouette coefficient with cosine distance.

    Points whose intra- and nearest-group distances are both zero score 0.
    """
    x = _unit(points)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ContractViolation("silhouette needs at least 2 groups")
    counts = np.array([np.sum(labels == g) for g in groups])
    if counts.min() < 2:
        raise ContractViolation("silhouette needs at least 2 points in every group")
    dist = np.clip(1.0 - x @ x.T, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)  # self-distance roundoff would bias the intra-group mean
    member = labels[:, None] == groups[None, :]
    sums = dist @ member
    own = member.argmax(axis=1)
    idx = np.arange(len(x))
    a = sums[idx, own] / (counts[own] - 1)
    means = sums / counts[None, :]
    means[idx, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def pca_project(points, k=2):
    """Project onto the top-k principal axes; returns (coords [n, k], explained-variance ratios).

    Each axis is sign-fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(points, dtype=float)
    if x.shape[0] <= k:
        raise ContractViolation(f"PCA needs more than {k} points")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    w, v = np.linalg.eigh((cov + cov.T) / 2)
    order = np.argsort(w)[::-1][:k]
    comps = v[:, order]
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    total = w.clip(min=0).sum()
    ratios = w[order].clip(min=0) / total if total > 0 else np.zeros(k)
    return xc @ comps, ratios
