"""Labelled word segments: alignment ingestion, slicing, positive-pair mining.

Alignment files are TSV with one segment per line,
    utterance_id \t word_type \t speaker_id \t language_id \t start_frame \t end_frame
end_frame exclusive, '#' starts a comment line. Segments shorter than
MIN_SEGMENT_FRAMES are dropped with a warning when loading.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MIN_SEGMENT_FRAMES = 4


@dataclass(frozen=True)
class WordSegment:
    utterance_id: str
    word_type: str
    speaker_id: str
    language_id: str
    start_frame: int
    end_frame: int  # exclusive

    def __post_init__(self):
        if not self.word_type:
            raise ValueError("word_type must be non-empty")
        if not 0 <= self.start_frame < self.end_frame:
            raise ValueError(
                f"bad frame bounds [{self.start_frame}, {self.end_frame}) "
                f"for {self.word_type!r} in {self.utterance_id!r}"
            )

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class PositivePair:
    anchor: WordSegment
    positive: WordSegment

    def __post_init__(self):
        if self.anchor.word_type != self.positive.word_type:
            raise ValueError("pair members must share a word type")
        if self.anchor == self.positive:
            raise ValueError("pair members must be distinct occurrences")


class AlignmentError(ValueError):
    pass


def load_alignments(path, features: dict[str, np.ndarray] | None = None
                    ) -> list[WordSegment]:
    """Parse an alignment TSV; all-or-nothing on malformed input.

    When a feature dict is supplied, every segment's frame bounds are checked
    against its utterance's length.
    """
    segments = []
    with open(path, "r", encoding="utf-8") as inp:
        for lineno, raw in enumerate(inp, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise AlignmentError(
                    f"{path}:{lineno}: expected 6 tab-separated fields, "
                    f"got {len(fields)}"
                )
            utt, word, spk, lang, start_s, end_s = fields
            try:
                start, end = int(start_s), int(end_s)
            except ValueError as exc:
                raise AlignmentError(f"{path}:{lineno}: non-integer frame bound") from exc
            try:
                seg = WordSegment(utt, word, spk, lang, start, end)
            except ValueError as exc:
                raise AlignmentError(f"{path}:{lineno}: {exc}") from exc
            if features is not None:
                if utt not in features:
                    raise AlignmentError(f"{path}:{lineno}: unknown utterance {utt!r}")
                t = features[utt].shape[0]
                if end > t:
                    raise AlignmentError(
                        f"{path}:{lineno}: end frame {end} exceeds "
                        f"utterance length {t}"
                    )
            if seg.n_frames < MIN_SEGMENT_FRAMES:
                log.warning("%s:%d: dropping %r (%d frames < %d)",
                            path, lineno, word, seg.n_frames, MIN_SEGMENT_FRAMES)
                continue
            segments.append(seg)
    return segments


def save_alignments(segments: list[WordSegment], path) -> None:
    with open(path, "w", encoding="utf-8") as out:
        for s in segments:
            out.write(f"{s.utterance_id}\t{s.word_type}\t{s.speaker_id}\t"
                      f"{s.language_id}\t{s.start_frame}\t{s.end_frame}\n")


def slice_segment(features: dict[str, np.ndarray], seg: WordSegment) -> np.ndarray:
    """The (n_frames, D) feature slice a segment refers to."""
    if seg.utterance_id not in features:
        raise KeyError(f"utterance {seg.utterance_id!r} missing from archive")
    frames = features[seg.utterance_id]
    if seg.end_frame > frames.shape[0]:
        raise ValueError(
            f"segment [{seg.start_frame}, {seg.end_frame}) out of bounds for "
            f"{seg.utterance_id!r} with {frames.shape[0]} frames"
        )
    return frames[seg.start_frame:seg.end_frame]


def _pair_universe(segments: list[WordSegment]) -> tuple[list[list[int]], int]:
    """Occurrence index lists per word type plus total unordered pair count."""
    by_type: dict[str, list[int]] = {}
    for i, seg in enumerate(segments):
        by_type.setdefault(seg.word_type, []).append(i)
    groups = [idx for idx in by_type.values() if len(idx) >= 2]
    total = sum(len(g) * (len(g) - 1) // 2 for g in groups)
    return groups, total


def _unrank_pair(k: int, n: int) -> tuple[int, int]:
    """k-th unordered pair (i < j) of n items, row-major over i."""
    i = 0
    # row i holds n-1-i pairs
    while k >= n - 1 - i:
        k -= n - 1 - i
        i += 1
    return i, i + 1 + k


def mine_pairs(segments: list[WordSegment], n_pairs: int,
               per_language: bool = True, rng_seed: int = 0
               ) -> list[PositivePair]:
    """Sample same-type positive pairs without replacement.

    Draws uniformly from the universe of unordered pairs of distinct
    occurrences sharing a word type, independently per language group when
    per_language is set. Returns min(n_pairs, universe size) pairs per group,
    deterministically for a given seed.
    """
    if per_language:
        by_lang: dict[str, list[WordSegment]] = {}
        for seg in segments:
            by_lang.setdefault(seg.language_id, []).append(seg)
        pairs = []
        for lang in sorted(by_lang):
            pairs.extend(_mine_group(by_lang[lang], n_pairs, rng_seed, lang))
        return pairs
    return _mine_group(segments, n_pairs, rng_seed, None)


def _mine_group(segments: list[WordSegment], n_pairs: int, rng_seed: int,
                lang: str | None) -> list[PositivePair]:
    groups, total = _pair_universe(segments)
    if total == 0:
        where = f"language {lang!r}" if lang is not None else "input"
        raise ValueError(f"no word type with >= 2 occurrences in {where}")
    n_draw = min(n_pairs, total)
    rng = np.random.default_rng([rng_seed, len(segments), total]
                                if lang is None else
                                [rng_seed, _lang_key(lang), len(segments), total])
    if n_draw == total:
        flat = np.arange(total)
    elif total <= 20_000_000:
        flat = rng.choice(total, size=n_draw, replace=False)
    else:
        # universe too large to permute; seeded rejection sampling
        chosen: set[int] = set()
        while len(chosen) < n_draw:
            for v in rng.integers(0, total, size=n_draw - len(chosen)):
                chosen.add(int(v))
        flat = np.fromiter(chosen, dtype=np.int64)
    flat = np.sort(flat)

    offsets = np.cumsum([0] + [len(g) * (len(g) - 1) // 2 for g in groups])
    pairs = []
    for k in flat:
        gi = int(np.searchsorted(offsets, k, side="right")) - 1
        group = groups[gi]
        i, j = _unrank_pair(int(k - offsets[gi]), len(group))
        pairs.append(PositivePair(segments[group[i]], segments[group[j]]))
    # presentation order independent of the flat ranking
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def _lang_key(lang: str) -> int:
    # stable small integer for seeding, independent of PYTHONHASHSEED
    return sum(b * 31 ** (i % 5) for i, b in enumerate(lang.encode("utf-8"))) % (2**31)


def write_pairs(pairs: list[PositivePair], path) -> None:
    """12-column TSV: anchor then positive, each in alignment-file order."""
    with open(path, "w", encoding="utf-8") as out:
        for p in pairs:
            cells = []
            for s in (p.anchor, p.positive):
                cells += [s.utterance_id, s.word_type, s.speaker_id,
                          s.language_id, str(s.start_frame), str(s.end_frame)]
            out.write("\t".join(cells) + "\n")


def read_pairs(path) -> list[PositivePair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as inp:
        for lineno, raw in enumerate(inp, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 12:
                raise AlignmentError(
                    f"{path}:{lineno}: expected 12 fields, got {len(fields)}"
                )
            a = WordSegment(fields[0], fields[1], fields[2], fields[3],
                            int(fields[4]), int(fields[5]))
            b = WordSegment(fields[6], fields[7], fields[8], fields[9],
                            int(fields[10]), int(fields[11]))
            pairs.append(PositivePair(a, b))
    return pairs
