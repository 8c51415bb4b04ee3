"""Same-different word discrimination with speaker-invariant average precision.

All segment pairs are ranked by ascending cosine distance (ties broken by
pair index). Same-word different-speaker pairs are the positives; same-word
same-speaker pairs are excluded from the ranking entirely; everything else
is a negative. AP is the interpolation-free mean of precision at each
positive hit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .corpus import WordSegment, slice_segment

TILE = 1024  # pair computations are blocked for cache friendliness


@dataclass(frozen=True)
class LabelledEmbedding:
    z: np.ndarray
    word_type: str
    speaker_id: str

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        object.__setattr__(self, "z", z)
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise ValueError("embedding must be a finite 1-D vector")
        if not self.word_type or not self.speaker_id:
            raise ValueError("word_type and speaker_id must be non-empty")


@dataclass
class ApResult:
    ap: float
    n_positive_pairs: int
    n_scored_pairs: int
    pr_curve: np.ndarray  # (P, 2) rows of (precision, recall) at each hit


def _normalised_matrix(items: list[LabelledEmbedding]) -> np.ndarray:
    z = np.stack([it.z for it in items])
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm embedding at index {int(bad[0])}")
    return z / norms[:, None]


def pairwise_cosine_distances(items: list[LabelledEmbedding]) -> np.ndarray:
    """Condensed upper-triangular cosine distances, n(n-1)/2 entries.

    Entry order is (0,1), (0,2), ..., (0,n-1), (1,2), ... Distances are
    1 - cosine similarity, clamped to [0, 2].
    """
    n = len(items)
    if n < 2:
        raise ValueError("need at least two embeddings")
    zn = _normalised_matrix(items)
    out = np.empty(n * (n - 1) // 2)
    offset = 0
    for lo in range(0, n, TILE):
        hi = min(lo + TILE, n)
        sims = zn[lo:hi] @ zn.T
        for r in range(lo, hi):
            row = sims[r - lo, r + 1:]
            out[offset:offset + n - r - 1] = 1.0 - row
            offset += n - r - 1
    np.clip(out, 0.0, 2.0, out=out)
    return out


def _pair_labels(items: list[LabelledEmbedding]) -> tuple[np.ndarray, np.ndarray]:
    """(positive, scored) condensed boolean masks per the SWDS convention."""
    n = len(items)
    words = {w: i for i, w in enumerate(sorted({it.word_type for it in items}))}
    spks = {s: i for i, s in enumerate(sorted({it.speaker_id for it in items}))}
    w = np.array([words[it.word_type] for it in items])
    s = np.array([spks[it.speaker_id] for it in items])
    positive = np.empty(n * (n - 1) // 2, dtype=bool)
    scored = np.empty(n * (n - 1) // 2, dtype=bool)
    offset = 0
    for r in range(n):
        same_word = w[r] == w[r + 1:]
        same_spk = s[r] == s[r + 1:]
        positive[offset:offset + n - r - 1] = same_word & ~same_spk
        scored[offset:offset + n - r - 1] = ~(same_word & same_spk)
        offset += n - r - 1
    return positive, scored


def average_precision(distances: np.ndarray, positive: np.ndarray,
                      scored: np.ndarray) -> ApResult:
    """Rank scored pairs by (distance, pair index) and average precision."""
    d = distances[scored]
    pos = positive[scored]
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("AP undefined: no same-word different-speaker pair")
    order = np.argsort(d, kind="stable")
    hits = pos[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    precision = cum[hits] / ranks[hits]
    recall = cum[hits] / n_pos
    ap = math.fsum(precision) / n_pos
    return ApResult(ap=float(ap), n_positive_pairs=n_pos,
                    n_scored_pairs=int(hits.size),
                    pr_curve=np.column_stack([precision, recall]))


def samediff_ap(items: list[LabelledEmbedding]) -> ApResult:
    """Speaker-invariant same-different AP over a set of labelled embeddings."""
    distances = pairwise_cosine_distances(items)
    positive, scored = _pair_labels(items)
    return average_precision(distances, positive, scored)


def embed_segments(params: enc.EncoderParams, cfg: enc.EncoderConfig,
                   features: dict[str, np.ndarray],
                   segments: list[WordSegment],
                   batch_size: int = 512) -> list[LabelledEmbedding]:
    """Slice and encode labelled word segments, order preserved."""
    out: list[LabelledEmbedding] = []
    for lo in range(0, len(segments), batch_size):
        chunk = segments[lo:lo + batch_size]
        seqs = [slice_segment(features, s) for s in chunk]
        z = enc.encode_batch(params, cfg, seqs)
        out.extend(LabelledEmbedding(z=z[i], word_type=s.word_type,
                                     speaker_id=s.speaker_id)
                   for i, s in enumerate(chunk))
    return out
