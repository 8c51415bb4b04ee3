"""Contrastive training: batch assembly, Adam, multilingual pooling,
dev-language model selection.

Per epoch the pooled positive pairs are reshuffled and cut into batches.
Negatives come from the other segments inside the batch (default) or are
sampled from the corpus; a batch that cannot supply enough in-batch
negatives falls back to corpus sampling for the shortfall. Every draw is
taken from one generator seeded with (seed, epoch), so a (seed, epoch)
pair fully determines the batch stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import encoder as enc
from . import evaluate as ev
from .corpus import PositivePair, WordSegment, slice_segment
from .loss import contrastive_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    k_negatives: int = 20
    batch_pairs: int = 100
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 25
    seed: int = 0
    negative_policy: str = "in-batch"  # or "corpus-sampled"
    dev_cap: int = 1000  # same-different items scored per dev evaluation

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k_negatives < 1:
            raise ValueError("k_negatives must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.negative_policy not in ("in-batch", "corpus-sampled"):
            raise ValueError(f"unknown negative policy {self.negative_policy!r}")


@dataclass(frozen=True)
class TrainingExample:
    anchor: WordSegment
    positive: WordSegment
    negatives: tuple[WordSegment, ...]

    def __post_init__(self):
        for neg in self.negatives:
            if neg.word_type == self.anchor.word_type:
                raise ValueError("negative shares the anchor's word type")


def _occurrence_key(seg: WordSegment) -> tuple:
    return (seg.utterance_id, seg.start_frame, seg.end_frame)


def assemble_batches(pairs: list[PositivePair], all_segments: list[WordSegment],
                     cfg: TrainConfig, epoch_seed: int):
    """Yield lists of TrainingExample, deterministically per (seed, epoch)."""
    rng = np.random.default_rng([cfg.seed, epoch_seed])
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    for lo in range(0, len(shuffled), cfg.batch_pairs):
        chunk = shuffled[lo:lo + cfg.batch_pairs]
        pool: list[WordSegment] = []
        seen = set()
        for pair in chunk:
            for seg in (pair.anchor, pair.positive):
                key = _occurrence_key(seg)
                if key not in seen:
                    seen.add(key)
                    pool.append(seg)
        examples = []
        for pair in chunk:
            negatives = _draw_negatives(pair.anchor, pool, all_segments, cfg, rng)
            examples.append(TrainingExample(pair.anchor, pair.positive, negatives))
        yield examples


def _draw_negatives(anchor: WordSegment, pool: list[WordSegment],
                    all_segments: list[WordSegment], cfg: TrainConfig,
                    rng: np.random.Generator) -> tuple[WordSegment, ...]:
    chosen: list[WordSegment] = []
    if cfg.negative_policy == "in-batch":
        cands = [s for s in pool if s.word_type != anchor.word_type]
        if len(cands) >= cfg.k_negatives:
            idx = rng.choice(len(cands), size=cfg.k_negatives, replace=False)
            return tuple(cands[i] for i in np.sort(idx))
        chosen = list(cands)  # shortfall -> corpus fallback
    taken = {_occurrence_key(s) for s in chosen}
    cands = [s for s in all_segments
             if s.word_type != anchor.word_type and _occurrence_key(s) not in taken]
    missing = cfg.k_negatives - len(chosen)
    if len(cands) < missing:
        raise ValueError(
            f"cannot draw {cfg.k_negatives} negatives for word type "
            f"{anchor.word_type!r}: corpus has only {len(chosen) + len(cands)} "
            "distinct-type segments"
        )
    idx = rng.choice(len(cands), size=missing, replace=False)
    chosen.extend(cands[i] for i in np.sort(idx))
    return tuple(chosen)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: enc.EncoderParams) -> AdamState:
    return AdamState(m={k: np.zeros_like(t) for k, t in params.tensors.items()},
                     v={k: np.zeros_like(t) for k, t in params.tensors.items()})


def adam_step(params: enc.EncoderParams, grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig
              ) -> tuple[enc.EncoderParams, AdamState]:
    """Standard bias-corrected Adam update, in place."""
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise ValueError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name in params.names():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        params.tensors[name] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params, state


@dataclass
class DevData:
    """Held-out dev-language material for per-epoch model selection."""
    features: dict[str, np.ndarray]
    segments: list[WordSegment]

    def languages(self) -> set[str]:
        return {s.language_id for s in self.segments}


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    dev_ap: float  # nan when no dev data


@dataclass
class TrainResult:
    params: enc.EncoderParams
    encoder_cfg: enc.EncoderConfig
    train_cfg: TrainConfig
    metadata: dict
    log: list[EpochStats] = field(default_factory=list)

    def save(self, path) -> None:
        enc.save_checkpoint(self.params, self.encoder_cfg, self.metadata, path)


def _batch_update(params, encoder_cfg, features, examples, cfg, state):
    """One forward/backward/Adam step over a batch; returns the mean loss."""
    uniq: dict[tuple, int] = {}
    segs: list[WordSegment] = []
    for ex in examples:
        for seg in (ex.anchor, ex.positive, *ex.negatives):
            key = _occurrence_key(seg)
            if key not in uniq:
                uniq[key] = len(segs)
                segs.append(seg)
    seqs = [slice_segment(features, s) for s in segs]
    z, ctx = enc.forward_with_cache(params, encoder_cfg, seqs)

    d_emb = np.zeros_like(z)
    total = 0.0
    scale = 1.0 / len(examples)
    for ex in examples:
        ia = uniq[_occurrence_key(ex.anchor)]
        ip = uniq[_occurrence_key(ex.positive)]
        ins = [uniq[_occurrence_key(s)] for s in ex.negatives]
        loss, d_a, d_p, d_n = contrastive_loss(z[ia], z[ip], z[ins], cfg.tau)
        total += loss
        d_emb[ia] += scale * d_a
        d_emb[ip] += scale * d_p
        for j, i_neg in enumerate(ins):
            d_emb[i_neg] += scale * d_n[j]
    grads = enc.backward_from_cache(params, encoder_cfg, ctx, d_emb)
    adam_step(params, grads, state, cfg)
    return total * scale


def dev_average_precision(params, encoder_cfg, dev: DevData, cap: int,
                          subsample_seed: int) -> float:
    """Speaker-invariant same-different AP on a capped dev subsample."""
    segments = dev.segments
    if len(segments) > cap:
        rng = np.random.default_rng([subsample_seed, len(segments)])
        idx = np.sort(rng.choice(len(segments), size=cap, replace=False))
        segments = [segments[i] for i in idx]
    items = ev.embed_segments(params, encoder_cfg, dev.features, segments)
    return ev.samediff_ap(items).ap


def train_model(pairs_by_language: dict[str, list[PositivePair]],
                features: dict[str, np.ndarray],
                encoder_cfg: enc.EncoderConfig,
                train_cfg: TrainConfig,
                dev: DevData | None = None) -> TrainResult:
    """Train on pooled multilingual pairs; select the best dev-AP epoch.

    dev data must come from languages absent from training (the zero-resource
    protocol); without dev data the final epoch is returned.
    """
    if not pairs_by_language:
        raise ValueError("need at least one training language")
    train_languages = sorted(pairs_by_language)
    if dev is not None:
        overlap = dev.languages() & set(train_languages)
        if overlap:
            raise ValueError(
                f"dev language(s) {sorted(overlap)} appear in the training "
                "languages; zero-resource validation forbids this"
            )

    pooled: list[PositivePair] = []
    for lang in train_languages:
        if not pairs_by_language[lang]:
            raise ValueError(f"no pairs for training language {lang!r}")
        pooled.extend(pairs_by_language[lang])
    all_segments: list[WordSegment] = []
    seen = set()
    for pair in pooled:
        for seg in (pair.anchor, pair.positive):
            key = _occurrence_key(seg)
            if key not in seen:
                seen.add(key)
                all_segments.append(seg)

    params = enc.init_params(encoder_cfg, train_cfg.seed)
    state = init_adam_state(params)
    history: list[EpochStats] = []
    best_params = params.copy()
    best_ap = -np.inf
    best_epoch = 0
    for epoch in range(1, train_cfg.epochs + 1):
        losses = []
        for examples in assemble_batches(pooled, all_segments, train_cfg, epoch):
            losses.append(_batch_update(params, encoder_cfg, features,
                                        examples, train_cfg, state))
        mean_loss = float(np.mean(losses))
        dev_ap = float("nan")
        if dev is not None:
            dev_ap = dev_average_precision(params, encoder_cfg, dev,
                                           train_cfg.dev_cap, train_cfg.seed)
            if dev_ap > best_ap:
                best_ap, best_epoch = dev_ap, epoch
                best_params = params.copy()
        history.append(EpochStats(epoch=epoch, mean_loss=mean_loss, dev_ap=dev_ap))
        log.debug("epoch %d: mean loss %.4f dev AP %s", epoch, mean_loss, dev_ap)

    if dev is None:
        best_params, best_epoch, best_ap = params.copy(), train_cfg.epochs, float("nan")
    metadata = {
        "train_languages": train_languages,
        "seed": train_cfg.seed,
        "epoch": best_epoch,
        "dev_ap": None if np.isnan(best_ap) else best_ap,
        "n_pairs": {lang: len(pairs_by_language[lang]) for lang in train_languages},
        "train": asdict(train_cfg),
    }
    return TrainResult(params=best_params, encoder_cfg=encoder_cfg,
                       train_cfg=train_cfg, metadata=metadata, log=history)


def write_train_log(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as out:
        out.write("epoch,mean_loss,dev_ap\n")
        for row in history:
            out.write(f"{row.epoch},{row.mean_loss:.6f},{row.dev_ap:.6f}\n")
