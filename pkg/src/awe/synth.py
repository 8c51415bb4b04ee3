"""Synthetic language-family corpus for desk-scale transfer experiments.

Each language owns an inventory of 13-dimensional phone prototype vectors.
Languages in the same family share a fixed fraction of their inventory;
across families a (smaller) globally shared fraction. A word type is a
random phone sequence; an instance renders each phone as its prototype
repeated for a random number of frames, then adds a per-speaker constant
shift and i.i.d. Gaussian frame noise. Instances are packed a few words
per utterance so the result doubles as a query-by-example search corpus.
By default each utterance is mean/variance normalised per coefficient,
mirroring what the CMVN stage of the real front end produces (the constant
speaker shift survives only through its interaction with utterance
content).

Everything is drawn from a single seeded generator in a fixed order, so
regenerating with the same spec is byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .corpus import WordSegment
from .features import FeatureSequence

FEATURE_DIM = 13


@dataclass(frozen=True)
class SyntheticFamilySpec:
    n_families: int = 2
    languages_per_family: int = 3
    phones_per_language: int = 20
    shared_fraction_within_family: float = 0.6
    shared_fraction_across_family: float = 0.0
    n_word_types: int = 50
    phones_per_word: tuple[int, int] = (3, 5)
    n_speakers: int = 8
    instances_per_type: int = 20
    speaker_shift_scale: float = 1.0
    noise_scale: float = 0.5
    frames_per_phone: tuple[int, int] = (3, 6)
    words_per_utterance: tuple[int, int] = (2, 4)
    normalize_utterances: bool = True
    seed: int = 0

    def __post_init__(self):
        counts = ("n_families", "languages_per_family", "phones_per_language",
                  "n_word_types", "n_speakers", "instances_per_type")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("phones_per_word", "frames_per_phone", "words_per_utterance"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a range 1 <= lo <= hi")
            object.__setattr__(self, name, (int(lo), int(hi)))
        for name in ("shared_fraction_within_family", "shared_fraction_across_family"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.shared_fraction_across_family > self.shared_fraction_within_family:
            raise ValueError("shared_fraction_across_family must not exceed "
                             "shared_fraction_within_family")
        if self.speaker_shift_scale < 0 or self.noise_scale < 0:
            raise ValueError("scales must be non-negative")


@dataclass
class SyntheticCorpus:
    features: list[FeatureSequence]
    alignments: list[WordSegment]
    family_map: dict[str, str]           # language -> family
    inventories: dict[str, np.ndarray]   # language -> (P, 13) prototypes
    spec: SyntheticFamilySpec
    word_phones: dict[str, list[int]] = field(default_factory=dict)

    def feature_dict(self) -> dict[str, np.ndarray]:
        return {f.utterance_id: f.frames for f in self.features}

    @property
    def languages(self) -> list[str]:
        return sorted(self.family_map)


def language_names(spec: SyntheticFamilySpec) -> list[str]:
    return [f"fam{f}_l{i}"
            for f in range(spec.n_families)
            for i in range(spec.languages_per_family)]


def _draw_inventories(spec: SyntheticFamilySpec, rng: np.random.Generator
                      ) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    p = spec.phones_per_language
    n_within = int(spec.shared_fraction_within_family * p)
    n_across = int(spec.shared_fraction_across_family * p)
    global_pool = rng.normal(0.0, 1.0, size=(n_across, FEATURE_DIM))
    family_map: dict[str, str] = {}
    inventories: dict[str, np.ndarray] = {}
    for fam in range(spec.n_families):
        family_pool = rng.normal(0.0, 1.0, size=(n_within - n_across, FEATURE_DIM))
        for i in range(spec.languages_per_family):
            lang = f"fam{fam}_l{i}"
            private = rng.normal(0.0, 1.0, size=(p - n_within, FEATURE_DIM))
            inventories[lang] = np.vstack([global_pool, family_pool, private])
            family_map[lang] = f"fam{fam}"
    return family_map, inventories


def _draw_word_types(spec: SyntheticFamilySpec, lang: str,
                     rng: np.random.Generator) -> dict[str, list[int]]:
    lo, hi = spec.phones_per_word
    words: dict[str, list[int]] = {}
    seen: set[tuple[int, ...]] = set()
    for k in range(spec.n_word_types):
        for _ in range(1000):
            length = int(rng.integers(lo, hi + 1))
            phones = tuple(int(v) for v in
                           rng.integers(0, spec.phones_per_language, size=length))
            if phones not in seen:
                seen.add(phones)
                break
        else:
            raise ValueError("cannot draw enough distinct word types; "
                             "increase phones_per_word or phones_per_language")
        words[f"{lang}_w{k:03d}"] = list(phones)
    return words


def generate_synthetic_corpus(spec: SyntheticFamilySpec) -> SyntheticCorpus:
    """Render the full corpus: features, word alignments, family map."""
    rng = np.random.default_rng(spec.seed)
    family_map, inventories = _draw_inventories(spec, rng)
    languages = language_names(spec)

    features: list[FeatureSequence] = []
    alignments: list[WordSegment] = []
    all_words: dict[str, list[int]] = {}
    for lang in languages:
        inventory = inventories[lang]
        words = _draw_word_types(spec, lang, rng)
        all_words.update(words)
        speakers = [f"{lang}_s{k}" for k in range(spec.n_speakers)]
        shifts = {spk: spec.speaker_shift_scale * rng.normal(0.0, 1.0, FEATURE_DIM)
                  for spk in speakers}

        # round-robin speaker assignment with a random per-type offset keeps
        # every word type spread over several speakers
        per_speaker: dict[str, list[str]] = {spk: [] for spk in speakers}
        for word in sorted(words):
            offset = int(rng.integers(0, spec.n_speakers))
            for j in range(spec.instances_per_type):
                per_speaker[speakers[(offset + j) % spec.n_speakers]].append(word)

        for spk in speakers:
            instances = per_speaker[spk]
            order = rng.permutation(len(instances))
            queue = [instances[i] for i in order]
            utt_index = 0
            while queue:
                take = int(rng.integers(spec.words_per_utterance[0],
                                        spec.words_per_utterance[1] + 1))
                chunk, queue = queue[:take], queue[take:]
                utt_id = f"{spk}_u{utt_index:04d}"
                utt_index += 1
                pieces = []
                bounds = []
                cursor = 0
                for word in chunk:
                    durations = rng.integers(spec.frames_per_phone[0],
                                             spec.frames_per_phone[1] + 1,
                                             size=len(words[word]))
                    frames = np.repeat(inventory[words[word]], durations, axis=0)
                    pieces.append(frames)
                    bounds.append((word, cursor, cursor + frames.shape[0]))
                    cursor += frames.shape[0]
                utt = np.concatenate(pieces, axis=0)
                utt = utt + shifts[spk]
                if spec.noise_scale > 0:
                    utt = utt + rng.normal(0.0, spec.noise_scale, size=utt.shape)
                if spec.normalize_utterances:
                    utt = (utt - utt.mean(axis=0)) / np.sqrt(
                        np.maximum(utt.var(axis=0), 1e-8))
                features.append(FeatureSequence(frames=utt.astype(np.float32),
                                                frame_shift_ms=10.0,
                                                utterance_id=utt_id))
                for word, start, end in bounds:
                    alignments.append(WordSegment(utt_id, word, spk, lang, start, end))

    return SyntheticCorpus(features=features, alignments=alignments,
                           family_map=family_map, inventories=inventories,
                           spec=spec, word_phones=all_words)


def spec_from_mapping(mapping: dict) -> SyntheticFamilySpec:
    """Build a spec from a flat key/value mapping (e.g. a parsed TOML file)."""
    kwargs = {}
    valid = set(SyntheticFamilySpec.__dataclass_fields__)
    for key, value in mapping.items():
        if key not in valid:
            raise ValueError(f"unknown synthetic corpus key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return SyntheticFamilySpec(**kwargs)


def spec_to_mapping(spec: SyntheticFamilySpec) -> dict:
    out = asdict(spec)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out
