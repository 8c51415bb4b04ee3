"""Desk-scale cross-lingual transfer experiments on the synthetic corpus.

Three protocols: a cross-lingual train-on-one/evaluate-on-others matrix, a
multilingual language-combination table (with optional pair-budget
subsets), and incremental one-language-at-a-time training sequences
(optionally with query-by-example scoring). Trained models are cached by
(language set, pair budget, epochs, seed), runs are deterministic per
seed, and every result row carries a model id that names its persisted
checkpoint and config hash.

The zero-resource contract is enforced per run: an evaluation language's
data never enters training or model selection. When a language is both
trained on and evaluated (the optional matrix diagonal topline), evaluation
uses only the held-out speakers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import encoder as enc
from . import evaluate as ev
from . import qbe as qbe_mod
from .archive import load_archive_dict
from .corpus import WordSegment, load_alignments, mine_pairs
from .synth import SyntheticFamilySpec, generate_synthetic_corpus
from .train import DevData, TrainConfig, TrainResult, train_model, write_train_log

log = logging.getLogger(__name__)


@dataclass
class ExperimentPlan:
    corpus_spec: SyntheticFamilySpec | None = None
    feats_path: str | None = None
    align_path: str | None = None
    train_languages: list[str] = field(default_factory=list)
    eval_languages: list[str] = field(default_factory=list)
    dev_language: str = ""  # empty: no dev selection, fixed-epoch models
    sequences: list[list[str]] = field(default_factory=list)
    combinations: list[list[str]] = field(default_factory=list)
    subset_combinations: list[list[str]] = field(default_factory=list)
    subset_fraction: float = 0.1
    pair_budget: int = 2000
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_speakers: int = 6
    include_diagonal: bool = False
    tasks: list[str] = field(default_factory=lambda: ["matrix", "combinations", "sequences"])
    # desk-scale encoder and training defaults
    hidden_dim: int = 64
    embed_dim: int = 32
    n_layers: int = 3
    cell: str = "gru"
    max_frames: int = 120
    epochs: int = 10
    batch_pairs: int = 100
    k_negatives: int = 20
    lr: float = 0.001
    tau: float = 0.1
    dev_cap: int = 1000
    eval_cap: int = 1000
    qbe_enabled: bool = False
    qbe_n_query_types: int = 10
    qbe_instances_per_query: int = 3
    qbe_min_occurrences: int = 3
    # subset runs keep the full-run update count (epochs scale by 1/fraction)
    # so budget comparisons vary data, not optimization steps
    equalize_subset_updates: bool = True
    n_workers: int = 2

    def __post_init__(self):
        if self.corpus_spec is None and not (self.feats_path and self.align_path):
            raise ValueError("plan needs either a corpus spec or feature/alignment paths")
        if not self.train_languages or not self.eval_languages:
            raise ValueError("plan needs training and evaluation languages")
        if self.dev_language:
            if self.dev_language in self.train_languages:
                raise ValueError("dev language must not be a training language")
            if self.dev_language in self.eval_languages:
                raise ValueError("dev language must not be an evaluation language")
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ValueError("subset_fraction must be in (0, 1]")
        known = set(self.train_languages)
        for group in (*self.sequences, *self.combinations, *self.subset_combinations):
            if not group:
                raise ValueError("empty language group in plan")
            unknown = set(group) - known
            if unknown:
                raise ValueError(f"unknown language(s) in plan group: {sorted(unknown)}")

    def encoder_config(self, input_dim: int) -> enc.EncoderConfig:
        return enc.EncoderConfig(input_dim=input_dim, hidden_dim=self.hidden_dim,
                                 n_layers=self.n_layers, embed_dim=self.embed_dim,
                                 cell=self.cell, max_frames=self.max_frames)

    def train_config(self, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(tau=self.tau, k_negatives=self.k_negatives,
                           batch_pairs=self.batch_pairs, lr=self.lr,
                           epochs=self.epochs if epochs is None else epochs,
                           seed=seed, dev_cap=self.dev_cap)

    def effective_epochs(self, fraction: float) -> int:
        if fraction >= 1.0 or not self.equalize_subset_updates:
            return self.epochs
        return min(400, round(self.epochs / fraction))


@dataclass(frozen=True)
class ResultRow:
    model_id: str
    train_set: str
    eval_language: str
    metric_name: str
    value: float
    seed: int


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def add(self, *rows: ResultRow) -> None:
        self.rows.extend(rows)

    def extend(self, other: "ResultTable") -> None:
        self.rows.extend(other.rows)

    def sorted_rows(self) -> list[ResultRow]:
        return sorted(self.rows, key=lambda r: (r.metric_name, r.eval_language,
                                                r.train_set, r.seed, r.model_id))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as out:
            out.write("model_id,train_set,eval_language,metric,value,seed\n")
            for r in self.sorted_rows():
                out.write(f"{r.model_id},{r.train_set},{r.eval_language},"
                          f"{r.metric_name},{r.value:.6f},{r.seed}\n")

    def write_heatmap_csv(self, path, metric: str = "ap") -> None:
        """Mean over seeds per (train, eval) cell plus per-column normalisation."""
        cells: dict[tuple[str, str], list[float]] = {}
        for r in self.rows:
            if r.metric_name == metric:
                cells.setdefault((r.train_set, r.eval_language), []).append(r.value)
        means = {key: float(np.mean(vals)) for key, vals in cells.items()}
        by_col: dict[str, list[float]] = {}
        for (_, col), val in means.items():
            by_col.setdefault(col, []).append(val)
        with open(path, "w", encoding="utf-8") as out:
            out.write("train_language,eval_language,value,normalized\n")
            for (row_l, col), val in sorted(means.items()):
                lo, hi = min(by_col[col]), max(by_col[col])
                norm = 0.0 if hi == lo else (val - lo) / (hi - lo)
                out.write(f"{row_l},{col},{val:.6f},{norm:.6f}\n")


@dataclass
class PreparedCorpus:
    """Per-language segment splits shared by every run of a plan."""
    features: dict[str, np.ndarray]
    train_segments: dict[str, list[WordSegment]]      # train-speaker material
    eval_items_full: dict[str, list[WordSegment]]     # all speakers, capped
    eval_items_heldout: dict[str, list[WordSegment]]  # held-out speakers, capped
    dev_segments: list[WordSegment]
    input_dim: int
    languages: list[str]


def _cap_segments(segments: list[WordSegment], cap: int, seed_key: list
                  ) -> list[WordSegment]:
    if len(segments) <= cap:
        return list(segments)
    rng = np.random.default_rng(seed_key)
    idx = np.sort(rng.choice(len(segments), size=cap, replace=False))
    return [segments[i] for i in idx]


def prepare_corpus(plan: ExperimentPlan) -> PreparedCorpus:
    if plan.corpus_spec is not None:
        corpus = generate_synthetic_corpus(plan.corpus_spec)
        features = corpus.feature_dict()
        segments = corpus.alignments
    else:
        features = load_archive_dict(plan.feats_path)
        segments = load_alignments(plan.align_path, features)

    by_lang: dict[str, list[WordSegment]] = {}
    for seg in segments:
        by_lang.setdefault(seg.language_id, []).append(seg)
    needed = set(plan.train_languages) | set(plan.eval_languages)
    if plan.dev_language:
        needed.add(plan.dev_language)
    missing = needed - set(by_lang)
    if missing:
        raise ValueError(f"corpus lacks language(s) {sorted(missing)}")

    train_segments, full_items, heldout_items = {}, {}, {}
    for lang, segs in sorted(by_lang.items()):
        speakers = sorted({s.speaker_id for s in segs})
        train_spk = set(speakers[: plan.train_speakers])
        train_segments[lang] = [s for s in segs if s.speaker_id in train_spk]
        heldout = [s for s in segs if s.speaker_id not in train_spk]
        full_items[lang] = _cap_segments(segs, plan.eval_cap,
                                         [plan.pair_budget, 101, _lang_seed(lang)])
        heldout_items[lang] = _cap_segments(heldout, plan.eval_cap,
                                            [plan.pair_budget, 102, _lang_seed(lang)])
    dev_segments = full_items[plan.dev_language] if plan.dev_language else []
    input_dim = next(iter(features.values())).shape[1]
    return PreparedCorpus(features=features, train_segments=train_segments,
                          eval_items_full=full_items,
                          eval_items_heldout=heldout_items,
                          dev_segments=dev_segments, input_dim=input_dim,
                          languages=sorted(by_lang))


def _lang_seed(lang: str) -> int:
    return int.from_bytes(hashlib.sha1(lang.encode()).digest()[:4], "little")


@dataclass(frozen=True)
class RunKey:
    languages: frozenset
    budget: int
    epochs: int
    seed: int

    def sorted_languages(self) -> list[str]:
        return sorted(self.languages)


def _config_hash(plan: ExperimentPlan, key: RunKey, input_dim: int) -> str:
    payload = json.dumps({
        "languages": key.sorted_languages(), "budget": key.budget,
        "seed": key.seed, "dev": plan.dev_language,
        "encoder": asdict(plan.encoder_config(input_dim)),
        "train": asdict(plan.train_config(key.seed, key.epochs)),
    }, sort_keys=True)
    return hashlib.sha1(payload.encode()).hexdigest()[:8]


def _model_id(plan: ExperimentPlan, key: RunKey, input_dim: int) -> str:
    langs = "+".join(key.sorted_languages())
    return f"{langs}_b{key.budget}_s{key.seed}_{_config_hash(plan, key, input_dim)}"


def _train_one(prep: PreparedCorpus, plan: ExperimentPlan, key: RunKey) -> TrainResult:
    cpu_start = time.process_time()
    pairs_by_language = {}
    for lang in key.sorted_languages():
        pairs_by_language[lang] = mine_pairs(prep.train_segments[lang], key.budget,
                                             per_language=True, rng_seed=key.seed)
    dev = (DevData(features=prep.features, segments=prep.dev_segments)
           if plan.dev_language else None)
    result = train_model(pairs_by_language, prep.features,
                         plan.encoder_config(prep.input_dim),
                         plan.train_config(key.seed, key.epochs), dev=dev)
    result.metadata["model_id"] = _model_id(plan, key, prep.input_dim)
    result.metadata["config_hash"] = _config_hash(plan, key, prep.input_dim)
    result.metadata["train_cpu_s"] = time.process_time() - cpu_start
    return result


_POOL_STATE: dict = {}


def _pool_init(prep: PreparedCorpus, plan: ExperimentPlan) -> None:
    _POOL_STATE["prep"] = prep
    _POOL_STATE["plan"] = plan


def _pool_train(key: RunKey) -> tuple[RunKey, TrainResult]:
    return key, _train_one(_POOL_STATE["prep"], _POOL_STATE["plan"], key)


class ExperimentRunner:
    def __init__(self, plan: ExperimentPlan, out_dir: str | None = None):
        self.plan = plan
        self.prep = prepare_corpus(plan)
        self.out_dir = out_dir
        self.models: dict[RunKey, TrainResult] = {}
        self._qbe_cache: dict[tuple[str, str], float] = {}
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- model management -------------------------------------------------

    def effective_budget(self, fraction: float = 1.0) -> int:
        return max(1, round(self.plan.pair_budget * fraction))

    def _key(self, languages, seed: int, fraction: float) -> RunKey:
        return RunKey(frozenset(languages), self.effective_budget(fraction),
                      self.plan.effective_epochs(fraction), seed)

    def get_model(self, languages, seed: int, fraction: float = 1.0) -> TrainResult:
        key = self._key(languages, seed, fraction)
        if key not in self.models:
            self._store(key, _train_one(self.prep, self.plan, key))
        return self.models[key]

    def prefetch(self, keys: list[RunKey]) -> None:
        """Train any missing models, in parallel when workers allow."""
        missing = sorted((k for k in set(keys) if k not in self.models),
                         key=lambda k: (k.seed, k.budget, k.epochs,
                                        tuple(k.sorted_languages())))
        if not missing:
            return
        workers = min(self.plan.n_workers, len(missing))
        if workers <= 1:
            for key in missing:
                self._store(key, _train_one(self.prep, self.plan, key))
            return
        # spawn, not fork: forking after BLAS work deadlocks OpenBLAS threads
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_pool_init,
                                 initargs=(self.prep, self.plan)) as pool:
            for key, result in pool.map(_pool_train, missing):
                self._store(key, result)

    def _store(self, key: RunKey, result: TrainResult) -> None:
        self.models[key] = result
        if self.out_dir:
            model_id = result.metadata["model_id"]
            result.save(os.path.join(self.out_dir, f"{model_id}.awec"))
            write_train_log(result.log, os.path.join(self.out_dir, f"{model_id}.log.csv"))

    def run_keys(self, groups: list[tuple[list[str], float]], seeds) -> list[RunKey]:
        return [self._key(langs, seed, frac)
                for langs, frac in groups for seed in seeds]

    # -- evaluation --------------------------------------------------------

    def _check_zero_resource(self, eval_lang: str) -> None:
        if eval_lang == self.plan.dev_language:
            raise ValueError(f"evaluation language {eval_lang!r} was used for "
                             "model selection")

    def eval_ap(self, model: TrainResult, eval_lang: str, run_langs: frozenset) -> float:
        self._check_zero_resource(eval_lang)
        if eval_lang in run_langs:
            items = self.prep.eval_items_heldout[eval_lang]
            note = "held-out speakers"
        else:
            items = self.prep.eval_items_full[eval_lang]
            note = "full (language unseen in training)"
        log.debug("zero-resource check: eval %s vs train %s -> %s",
                  eval_lang, sorted(run_langs), note)
        emb = ev.embed_segments(model.params, model.encoder_cfg,
                                self.prep.features, items)
        return ev.samediff_ap(emb).ap

    def eval_qbe(self, model: TrainResult, eval_lang: str, run_langs: frozenset) -> float:
        self._check_zero_resource(eval_lang)
        if eval_lang in run_langs:
            raise ValueError("QbE evaluation requires a fully unseen language")
        search, truth, queries = self._qbe_material(eval_lang)
        index = qbe_mod.build_index(model.params, model.encoder_cfg, search)
        scores = []
        for query in queries:
            res = qbe_mod.run_qbe(model.params, model.encoder_cfg, query,
                                  self.prep.features, index, truth)
            scores.append(res.p_at_10)
        return float(np.mean(scores))

    def _qbe_material(self, lang: str):
        """Search collection from train-speaker utterances of the (unseen)
        evaluation language; query instances from its held-out speakers."""
        search_side = self.prep.train_segments[lang]
        search_utts = sorted({s.utterance_id for s in search_side})
        search = {u: self.prep.features[u] for u in search_utts}
        truth: dict[str, set[str]] = {u: set() for u in search_utts}
        occurrences: dict[str, int] = {}
        for s in search_side:
            truth[s.utterance_id].add(s.word_type)
            occurrences[s.word_type] = occurrences.get(s.word_type, 0) + 1
        query_side: dict[str, list[WordSegment]] = {}
        for s in self.prep.eval_items_heldout[lang]:
            query_side.setdefault(s.word_type, []).append(s)
        eligible = sorted(
            (w for w in query_side
             if occurrences.get(w, 0) >= self.plan.qbe_min_occurrences),
            key=lambda w: (-occurrences[w], w))
        chosen = eligible[: self.plan.qbe_n_query_types]
        if not chosen:
            raise ValueError(f"no eligible query word types for {lang!r}")
        queries = []
        for word in chosen:
            insts = sorted(query_side[word],
                           key=lambda s: (s.utterance_id, s.start_frame))
            queries.append(qbe_mod.QbeQuery(
                query_word=word,
                instances=tuple(insts[: self.plan.qbe_instances_per_query])))
        return search, truth, queries

    # -- operations ---------------------------------------------------------

    def run_crosslingual_matrix(self) -> ResultTable:
        """Monolingual models on each training language, evaluated crosswise."""
        plan = self.plan
        groups = [([lang], 1.0) for lang in plan.train_languages]
        self.prefetch(self.run_keys(groups, plan.seeds))
        table = ResultTable()
        for seed in plan.seeds:
            for train_lang in plan.train_languages:
                model = self.get_model([train_lang], seed)
                run_langs = frozenset([train_lang])
                for eval_lang in plan.eval_languages:
                    if eval_lang == train_lang and not plan.include_diagonal:
                        continue
                    ap = self.eval_ap(model, eval_lang, run_langs)
                    table.add(ResultRow(model.metadata["model_id"], train_lang,
                                        eval_lang, "ap", ap, seed))
        return table

    def run_combination_table(self) -> ResultTable:
        """Multilingual models per listed combination, optional budget subsets."""
        plan = self.plan
        groups = [(combo, 1.0) for combo in plan.combinations]
        groups += [(combo, plan.subset_fraction) for combo in plan.subset_combinations]
        if not groups:
            raise ValueError("plan lists no combinations")
        self.prefetch(self.run_keys(groups, plan.seeds))
        table = ResultTable()
        for seed in plan.seeds:
            for combo, fraction in groups:
                model = self.get_model(combo, seed, fraction)
                run_langs = frozenset(combo)
                label = "+".join(sorted(combo))
                if fraction < 1.0:
                    label += f"@{fraction:g}"
                for eval_lang in plan.eval_languages:
                    if eval_lang in run_langs:
                        continue
                    ap = self.eval_ap(model, eval_lang, run_langs)
                    table.add(ResultRow(model.metadata["model_id"], label,
                                        eval_lang, "ap", ap, seed))
        return table

    def run_incremental_sequences(self, with_qbe: bool | None = None) -> ResultTable:
        """Cumulative models over each ordered language sequence."""
        plan = self.plan
        if not plan.sequences:
            raise ValueError("plan lists no sequences")
        if with_qbe is None:
            with_qbe = plan.qbe_enabled
        groups = [(seq[:k], 1.0)
                  for seq in plan.sequences for k in range(1, len(seq) + 1)]
        self.prefetch(self.run_keys(groups, plan.seeds))
        table = ResultTable()
        for seed in plan.seeds:
            for seq in plan.sequences:
                for k in range(1, len(seq) + 1):
                    model = self.get_model(seq[:k], seed)
                    run_langs = frozenset(seq[:k])
                    label = "+".join(seq[:k])
                    for eval_lang in plan.eval_languages:
                        if eval_lang in run_langs:
                            continue
                        ap = self.eval_ap(model, eval_lang, run_langs)
                        table.add(ResultRow(model.metadata["model_id"], label,
                                            eval_lang, "ap", ap, seed))
                        if with_qbe:
                            cache_key = (model.metadata["model_id"], eval_lang)
                            if cache_key not in self._qbe_cache:
                                self._qbe_cache[cache_key] = self.eval_qbe(
                                    model, eval_lang, run_langs)
                            table.add(ResultRow(model.metadata["model_id"], label,
                                                eval_lang, "p_at_10",
                                                self._qbe_cache[cache_key], seed))
        return table


def run_experiment(plan: ExperimentPlan, out_dir: str) -> ResultTable:
    """Execute the plan's tasks; write results.csv, heatmap.csv and runs."""
    runner = ExperimentRunner(plan, out_dir=out_dir)
    table = ResultTable()
    matrix_table = None
    for task in plan.tasks:
        if task == "matrix":
            matrix_table = runner.run_crosslingual_matrix()
            table.extend(matrix_table)
        elif task == "combinations":
            table.extend(runner.run_combination_table())
        elif task == "sequences":
            table.extend(runner.run_incremental_sequences())
        else:
            raise ValueError(f"unknown task {task!r}")
    table.write_csv(os.path.join(out_dir, "results.csv"))
    if matrix_table is not None:
        matrix_table.write_heatmap_csv(os.path.join(out_dir, "heatmap.csv"))
    return table
