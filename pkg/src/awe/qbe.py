"""Query-by-example search over unsegmented utterances.

Each utterance is cut into overlapping windows: lengths swept from min_len
to max_len in len_step increments, starts every `stride` frames (a 3-frame
hop by default, which is one way to read "3-frame overlap"; all four
numbers are WindowConfig fields).
Every window is embedded with the encoder, and an utterance's score for a
query is the minimum cosine distance between the query embedding and any
of its window embeddings; utterances are ranked ascending.

The index holds all window embeddings as one contiguous float32 matrix and
is persisted as an "AWEI" binary (magic, version, window table, payload).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .corpus import WordSegment, slice_segment

log = logging.getLogger(__name__)

INDEX_MAGIC = b"AWEI"
INDEX_VERSION = 1


@dataclass(frozen=True)
class WindowConfig:
    min_len: int = 20
    max_len: int = 60
    len_step: int = 10
    stride: int = 3

    def __post_init__(self):
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.len_step < 1 or self.stride < 1:
            raise ValueError("len_step and stride must be >= 1")

    @property
    def lengths(self) -> range:
        return range(self.min_len, self.max_len + 1, self.len_step)


def enumerate_windows(n_frames: int, wcfg: WindowConfig) -> list[tuple[int, int]]:
    """All (start, length) windows for an utterance of n_frames.

    Utterances shorter than min_len yield a single full-length window.
    """
    if n_frames < wcfg.min_len:
        return [(0, n_frames)]
    return [(start, length)
            for start in range(0, n_frames - wcfg.min_len + 1, wcfg.stride)
            for length in wcfg.lengths
            if start + length <= n_frames]


@dataclass
class SegmentIndex:
    utterance_ids: list[str]
    utt_offsets: np.ndarray      # (n_utts + 1,) int64 into the flat arrays
    window_starts: np.ndarray    # (N,) int32
    window_lengths: np.ndarray   # (N,) int32
    embeddings: np.ndarray       # (N, M) float32, contiguous

    @property
    def n_windows(self) -> int:
        return int(self.embeddings.shape[0])

    def windows_for(self, utt_index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo, hi = self.utt_offsets[utt_index], self.utt_offsets[utt_index + 1]
        return (self.window_starts[lo:hi], self.window_lengths[lo:hi],
                self.embeddings[lo:hi])


def _embed_windows(params: enc.EncoderParams, cfg: enc.EncoderConfig,
                   frames: np.ndarray, wcfg: WindowConfig
                   ) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Embed every window of one utterance.

    Windows sharing a start are prefixes of one another, so the recurrence
    runs once per start and the top hidden state is tapped at each window
    end; this matches encode() output up to matmul batching.
    """
    windows = enumerate_windows(frames.shape[0], wcfg)
    t = frames.shape[0]
    if t < wcfg.min_len:
        log.warning("utterance shorter than min_len (%d < %d): single window",
                    t, wcfg.min_len)
        return windows, enc.encode_batch(params, cfg, [frames])

    starts = np.arange(0, t - wcfg.min_len + 1, wcfg.stride)
    max_runs = np.minimum(wcfg.max_len, t - starts)   # frames available per start
    run = int(max_runs.max())
    x = np.zeros((run, starts.size, cfg.input_dim), dtype=params.dtype)
    for i, s in enumerate(starts):
        x[: max_runs[i], i] = frames[s: s + max_runs[i]]
    mask = np.arange(run)[:, None] < max_runs[None, :]

    # window length L ends after step min(L, max_frames) of its start
    tap_steps = np.array([min(length, cfg.max_frames) - 1 for _, length in windows])
    tap_cols = np.array([s // wcfg.stride for s, _ in windows])

    top = enc.top_layer_states(params, cfg, x, mask)
    z = enc.project_states(params, top[tap_steps, tap_cols])
    return windows, z


def build_index(params: enc.EncoderParams, cfg: enc.EncoderConfig,
                features: dict[str, np.ndarray],
                wcfg: WindowConfig = WindowConfig()) -> SegmentIndex:
    """Embed overlapping windows of every utterance in the archive."""
    if not features:
        raise ValueError("empty feature archive")
    utt_ids = list(features)
    offsets = [0]
    starts_parts, lens_parts, emb_parts = [], [], []
    for utt in utt_ids:
        windows, z = _embed_windows(params, cfg, features[utt], wcfg)
        starts_parts.append(np.array([w[0] for w in windows], dtype=np.int32))
        lens_parts.append(np.array([w[1] for w in windows], dtype=np.int32))
        emb_parts.append(z.astype(np.float32))
        offsets.append(offsets[-1] + len(windows))
    return SegmentIndex(
        utterance_ids=utt_ids,
        utt_offsets=np.array(offsets, dtype=np.int64),
        window_starts=np.concatenate(starts_parts),
        window_lengths=np.concatenate(lens_parts),
        embeddings=np.ascontiguousarray(np.vstack(emb_parts)),
    )


def score_utterances(index: SegmentIndex, query_embedding: np.ndarray
                     ) -> list[tuple[str, float]]:
    """Rank utterances by minimum window cosine distance to the query."""
    if index.n_windows == 0:
        raise ValueError("empty index")
    q = np.asarray(query_embedding, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq == 0.0:
        raise ValueError("zero-norm query embedding")
    emb = index.embeddings.astype(np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm window embedding in index")
    dist = np.clip(1.0 - (emb @ (q / nq)) / norms, 0.0, 2.0)
    per_utt = np.minimum.reduceat(dist, index.utt_offsets[:-1])
    ranked = sorted(zip(index.utterance_ids, per_utt), key=lambda kv: (kv[1], kv[0]))
    return [(utt, float(score)) for utt, score in ranked]


@dataclass(frozen=True)
class QbeQuery:
    query_word: str
    instances: tuple[WordSegment, ...]

    def __post_init__(self):
        if not self.instances:
            raise ValueError("a query needs at least one spoken instance")
        object.__setattr__(self, "instances", tuple(self.instances))


@dataclass
class QbeResult:
    query_word: str
    rankings: list[list[tuple[str, float]]]  # one ranking per instance (or one, pooled)
    per_instance_p_at_10: list[float]
    p_at_10: float
    relevant_total: int


def _precision_at_10(ranked: list[tuple[str, float]],
                     relevant: set[str]) -> float:
    k = min(10, len(ranked))
    hits = sum(1 for utt, _ in ranked[:k] if utt in relevant)
    return hits / k


def run_qbe(params: enc.EncoderParams, cfg: enc.EncoderConfig,
            query: QbeQuery, query_features: dict[str, np.ndarray],
            index: SegmentIndex, ground_truth: dict[str, set[str]],
            pool_min: bool = False) -> QbeResult:
    """Score a spoken query against an index and compute P@10.

    ground_truth maps every indexed utterance to the set of word types it
    contains. Each spoken instance runs as an independent query and P@10 is
    averaged over instances; with pool_min the per-utterance minimum over
    instances gives a single pooled ranking instead.
    """
    missing = [u for u in index.utterance_ids if u not in ground_truth]
    if missing:
        raise ValueError(f"ground truth missing for {len(missing)} indexed "
                         f"utterance(s), e.g. {missing[0]!r}")
    vocabulary = set().union(*ground_truth.values()) if ground_truth else set()
    if query.query_word not in vocabulary:
        raise ValueError(f"query word {query.query_word!r} absent from the "
                         "ground-truth vocabulary")
    relevant = {u for u in index.utterance_ids if query.query_word in ground_truth[u]}

    seqs = [slice_segment(query_features, seg) for seg in query.instances]
    z = enc.encode_batch(params, cfg, seqs)
    if pool_min:
        scores: dict[str, float] = {}
        for i in range(z.shape[0]):
            for utt, score in score_utterances(index, z[i]):
                if utt not in scores or score < scores[utt]:
                    scores[utt] = score
        pooled = sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))
        p = _precision_at_10(pooled, relevant)
        return QbeResult(query.query_word, [pooled], [p], p, len(relevant))

    rankings = [score_utterances(index, z[i]) for i in range(z.shape[0])]
    per_instance = [_precision_at_10(r, relevant) for r in rankings]
    return QbeResult(query.query_word, rankings, per_instance,
                     float(np.mean(per_instance)), len(relevant))


# ---------------------------------------------------------------------------
# AWEI binary layout, all integers little-endian u32 unless noted:
#   magic "AWEI" | version | embed dim M | utterance count
#   per utterance: id length | UTF-8 id | window count | (start, length) pairs
#   payload: total-window-count x M float32 rows, utterances in order

class IndexError_(ValueError):
    pass


def write_index(index: SegmentIndex, path) -> None:
    m = index.embeddings.shape[1]
    with open(path, "wb") as out:
        out.write(INDEX_MAGIC)
        out.write(struct.pack("<III", INDEX_VERSION, m, len(index.utterance_ids)))
        for i, utt in enumerate(index.utterance_ids):
            starts, lengths, _ = index.windows_for(i)
            ident = utt.encode("utf-8")
            out.write(struct.pack("<I", len(ident)))
            out.write(ident)
            out.write(struct.pack("<I", starts.size))
            table = np.empty((starts.size, 2), dtype="<u4")
            table[:, 0] = starts
            table[:, 1] = lengths
            out.write(table.tobytes())
        out.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise IndexError_(f"truncated index while reading {what}")
    return data


def read_index(path) -> SegmentIndex:
    with open(path, "rb") as inp:
        magic = _read_exact(inp, 4, "magic")
        if magic != INDEX_MAGIC:
            raise IndexError_(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
        version, m, n_utts = struct.unpack("<III", _read_exact(inp, 12, "header"))
        if version != INDEX_VERSION:
            raise IndexError_(f"unsupported index version {version}")
        utt_ids, offsets = [], [0]
        starts_parts, lens_parts = [], []
        for k in range(n_utts):
            (id_len,) = struct.unpack("<I", _read_exact(inp, 4, f"utt {k} id length"))
            utt_ids.append(_read_exact(inp, id_len, f"utt {k} id").decode("utf-8"))
            (n_win,) = struct.unpack("<I", _read_exact(inp, 4, f"utt {k} window count"))
            table = np.frombuffer(_read_exact(inp, 8 * n_win, f"utt {k} windows"),
                                  dtype="<u4").reshape(n_win, 2)
            starts_parts.append(table[:, 0].astype(np.int32))
            lens_parts.append(table[:, 1].astype(np.int32))
            offsets.append(offsets[-1] + n_win)
        total = offsets[-1]
        payload = _read_exact(inp, 4 * total * m, "embedding payload")
        embeddings = np.frombuffer(payload, dtype="<f4").reshape(total, m).copy()
    return SegmentIndex(
        utterance_ids=utt_ids,
        utt_offsets=np.array(offsets, dtype=np.int64),
        window_starts=np.concatenate(starts_parts) if starts_parts else np.empty(0, np.int32),
        window_lengths=np.concatenate(lens_parts) if lens_parts else np.empty(0, np.int32),
        embeddings=embeddings,
    )
