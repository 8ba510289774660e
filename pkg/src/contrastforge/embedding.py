"""PCA of the condition embedding.

Each acquisition's condition vector is pushed through the trained
embedding MLP; the centred embeddings are projected onto the top principal
axes found by power iteration with deflation on their covariance.
"""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .errors import ValidationError
from .model import ConditionalUNet, condition_vector

log = logging.getLogger(__name__)


def embed_conditions(model: ConditionalUNet, metas: Sequence) -> np.ndarray:
    """N x embed_dim matrix of embeddings, in float64."""
    if not metas:
        raise ValidationError("no conditions to embed")
    c = [condition_vector(m, model.config) for m in metas]
    with torch.no_grad():
        e = model.embedding(torch.tensor(c, dtype=model.inp.weight.dtype))
    return e.double().numpy()


def power_iteration(C: np.ndarray, v0: np.ndarray, tol: float = 1e-9,
                    max_iter: int = 100_000) -> Tuple[float, np.ndarray]:
    """Dominant eigenpair of the symmetric PSD matrix ``C``."""
    v = v0 / np.linalg.norm(v0)
    lam = float(v @ C @ v)
    scale = max(np.abs(C).max(), 1e-300)
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm <= 1e-14 * scale:
            return 0.0, v  # v lies in the null space
        w /= norm
        new = float(w @ C @ w)
        if abs(new - lam) <= tol * max(abs(new), 1e-300) and np.linalg.norm(C @ w - new * w) <= \
                np.sqrt(tol) * max(new, 1e-300):
            return new, w
        v, lam = w, new
    log.warning("power iteration stopped after %d steps", max_iter)
    return lam, v


def principal_components(X: np.ndarray, k: int = 2, tol: float = 1e-9):
    """Top-``k`` PCA of the rows of ``X``.

    Returns (projections N x k, variances k, axes k x dim). Axes are signed
    so that the largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, dim = X.shape
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(n - 1, 1)
    rng = np.random.default_rng(0)
    # deflation leaves rounding noise where the spectrum is exhausted
    cutoff = 1e-10 * max(float(np.trace(C)), 1e-300)
    axes, variances = [], []
    for _ in range(k):
        lam, v = power_iteration(C, rng.standard_normal(dim), tol)
        v = v * np.sign(v[np.argmax(np.abs(v))] or 1.0)
        if lam <= cutoff:
            v = np.zeros(dim)
            lam = 0.0
        axes.append(v)
        variances.append(lam)
        C = C - lam * np.outer(v, v)
    axes = np.array(axes)
    return Xc @ axes.T, np.array(variances), axes


def analyze(model: ConditionalUNet, metas: Sequence) -> List[dict]:
    """One row (pc1, pc2, d, B, r_B, sigma) per acquisition."""
    distinct = {tuple(condition_vector(m, model.config)) for m in metas}
    if len(distinct) < 3:
        log.warning("only %d distinct conditions; the PCA is rank deficient", len(distinct))
    proj, var, _ = principal_components(embed_conditions(model, metas))
    rows = []
    for p, m in zip(proj, metas):
        rows.append({"pc1": float(p[0]), "pc2": float(p[1]), "dose": m.dose,
                     "field_strength": m.field_strength, "relaxivity": m.relaxivity,
                     "noise_level": m.noise_level})
    log.info("embedding variance along pc1, pc2: %.4g, %.4g", var[0], var[1])
    return rows
