"""Cosine similarity and the temperature-scaled contrastive objective.

For an anchor embedding, one positive and K negatives, the loss is the
negative log softmax (over the positive and all negatives, with the
similarity-over-temperature logits) of the positive entry. Gradients with
respect to all K + 2 embeddings are exact.
"""

from __future__ import annotations

import numpy as np


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|), clamped to [-1, 1] against rounding."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def contrastive_loss(z_a: np.ndarray, z_p: np.ndarray, z_negs: np.ndarray,
                     tau: float) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and exact gradients w.r.t. anchor, positive and each negative.

    z_negs is (K, M) with K >= 1. The softmax is computed with max
    subtraction. Returns (loss, d_anchor, d_positive, d_negatives).
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    a = np.asarray(z_a, dtype=np.float64)
    cand = np.vstack([np.asarray(z_p, dtype=np.float64),
                      np.asarray(z_negs, dtype=np.float64).reshape(-1, a.size)])
    na = np.linalg.norm(a)
    nc = np.linalg.norm(cand, axis=1)
    if na == 0.0 or np.any(nc == 0.0):
        raise ValueError("cosine similarity undefined for zero-norm embedding")
    sims = (cand @ a) / (nc * na)
    logits = sims / tau
    shift = logits - logits.max()
    exp_shift = np.exp(shift)
    weights = exp_shift / exp_shift.sum()
    loss = float(np.log(exp_shift.sum()) - shift[0])

    # dJ/d sims
    g = weights.copy()
    g[0] -= 1.0
    g /= tau

    # d sim(a, c_j)/d c_j = a/(|a||c_j|) - sim_j c_j/|c_j|^2, and symmetrically for a
    d_cand = g[:, None] * (a[None, :] / (nc * na)[:, None]
                           - (sims / nc**2)[:, None] * cand)
    d_a = (g / nc) @ cand / na - float(g @ sims) * a / na**2
    return loss, d_a, d_cand[0], d_cand[1:]
