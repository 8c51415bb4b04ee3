"""Command-line entry points for the AWE toolkit.

Subcommands: featurize, synth, mine-pairs, train, eval-samediff, qbe-index,
qbe, experiment. Config files (synth spec, train config, experiment plan)
are TOML.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import encoder as enc
from . import evaluate as ev
from . import qbe as qbe_mod
from .archive import load_archive_dict, write_feature_archive
from .corpus import load_alignments, mine_pairs, read_pairs, save_alignments, write_pairs
from .experiment import ExperimentPlan, run_experiment
from .features import MfccConfig, compute_mfcc, read_wav
from .synth import generate_synthetic_corpus, spec_from_mapping
from .train import DevData, TrainConfig, train_model, write_train_log

log = logging.getLogger(__name__)


def _load_toml(path) -> dict:
    with open(path, "rb") as inp:
        return tomllib.load(inp)


def cmd_featurize(args) -> int:
    cfg = MfccConfig(window_ms=args.window_ms, shift_ms=args.shift_ms,
                     n_mels=args.n_mels, n_ceps=args.n_ceps,
                     preemphasis=args.preemphasis, cmvn=not args.no_cmvn)
    wavs = sorted(f for f in os.listdir(args.wav_dir) if f.lower().endswith(".wav"))
    if not wavs:
        print(f"no .wav files under {args.wav_dir}", file=sys.stderr)
        return 1
    feats = []
    for name in wavs:
        wave = read_wav(os.path.join(args.wav_dir, name))
        feats.append(compute_mfcc(wave, cfg, utterance_id=os.path.splitext(name)[0]))
    write_feature_archive(feats, args.out)
    print(f"wrote {len(feats)} utterances to {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = spec_from_mapping(_load_toml(args.spec))
    corpus = generate_synthetic_corpus(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    write_feature_archive(corpus.features, os.path.join(args.out_dir, "feats.awef"))
    save_alignments(corpus.alignments, os.path.join(args.out_dir, "alignments.tsv"))
    with open(os.path.join(args.out_dir, "families.tsv"), "w", encoding="utf-8") as out:
        for lang in corpus.languages:
            out.write(f"{lang}\t{corpus.family_map[lang]}\n")
    print(f"wrote {len(corpus.features)} utterances, "
          f"{len(corpus.alignments)} segments, "
          f"{len(corpus.languages)} languages to {args.out_dir}")
    return 0


def cmd_mine_pairs(args) -> int:
    features = load_archive_dict(args.feats) if args.feats else None
    segments = load_alignments(args.align, features)
    pairs = mine_pairs(segments, args.n, per_language=not args.pooled,
                       rng_seed=args.seed)
    write_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def _train_configs_from_toml(path, input_dim: int
                             ) -> tuple[enc.EncoderConfig, TrainConfig]:
    raw = _load_toml(path) if path else {}
    enc_keys = {f: raw[f] for f in
                ("hidden_dim", "n_layers", "embed_dim", "cell", "max_frames")
                if f in raw}
    train_keys = {f: raw[f] for f in
                  ("tau", "k_negatives", "batch_pairs", "lr", "adam_beta1",
                   "adam_beta2", "adam_eps", "epochs", "seed",
                   "negative_policy", "dev_cap") if f in raw}
    return (enc.EncoderConfig(input_dim=input_dim, **enc_keys),
            TrainConfig(**train_keys))


def cmd_train(args) -> int:
    features = load_archive_dict(args.feats)
    pairs = []
    for path in args.pairs.split(","):
        pairs.extend(read_pairs(path))
    by_language: dict[str, list] = {}
    for pair in pairs:
        by_language.setdefault(pair.anchor.language_id, []).append(pair)
    dev = None
    if args.dev_feats and args.dev_align:
        dev_features = load_archive_dict(args.dev_feats)
        dev_segments = load_alignments(args.dev_align, dev_features)
        dev = DevData(features=dev_features, segments=dev_segments)
    encoder_cfg, train_cfg = _train_configs_from_toml(
        args.config, next(iter(features.values())).shape[1])
    result = train_model(by_language, features, encoder_cfg, train_cfg, dev=dev)
    result.save(args.out)
    if args.log:
        write_train_log(result.log, args.log)
    best = result.metadata
    print(f"trained on {'+'.join(best['train_languages'])}; "
          f"best epoch {best['epoch']} (dev AP {best['dev_ap']}); "
          f"saved {args.out}")
    return 0


def cmd_eval_samediff(args) -> int:
    params, cfg, _ = enc.load_checkpoint(args.model)
    features = load_archive_dict(args.feats)
    segments = load_alignments(args.align, features)
    items = ev.embed_segments(params, cfg, features, segments)
    result = ev.samediff_ap(items)
    with open(args.report, "w", encoding="utf-8") as out:
        out.write("n_items,n_scored,n_pos,ap\n")
        out.write(f"{len(items)},{result.n_scored_pairs},"
                  f"{result.n_positive_pairs},{result.ap:.6f}\n")
    if args.pr_curve:
        with open(args.pr_curve, "w", encoding="utf-8") as out:
            out.write("precision,recall\n")
            for precision, recall in result.pr_curve:
                out.write(f"{precision:.6f},{recall:.6f}\n")
    print(f"AP {result.ap:.4f} over {result.n_scored_pairs} pairs "
          f"({result.n_positive_pairs} positive); report: {args.report}")
    return 0


def cmd_qbe_index(args) -> int:
    params, cfg, _ = enc.load_checkpoint(args.model)
    features = load_archive_dict(args.feats)
    wcfg = qbe_mod.WindowConfig(min_len=args.min_len, max_len=args.max_len,
                                len_step=args.len_step, stride=args.stride)
    index = qbe_mod.build_index(params, cfg, features, wcfg)
    qbe_mod.write_index(index, args.out)
    print(f"indexed {len(index.utterance_ids)} utterances, "
          f"{index.n_windows} windows -> {args.out}")
    return 0


def cmd_qbe(args) -> int:
    params, cfg, _ = enc.load_checkpoint(args.model)
    index = qbe_mod.read_index(args.index)
    query_features = load_archive_dict(args.query_feats)
    query_segments = load_alignments(args.queries, query_features)
    truth: dict[str, set[str]] = {}
    with open(args.truth, "r", encoding="utf-8") as inp:
        for raw in inp:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            utt, word = line.split("\t")
            truth.setdefault(utt, set()).add(word)
    for utt in index.utterance_ids:
        truth.setdefault(utt, set())
    by_word: dict[str, list] = {}
    for seg in query_segments:
        by_word.setdefault(seg.word_type, []).append(seg)
    with open(args.report, "w", encoding="utf-8") as out:
        out.write("query_word,n_instances,relevant_total,p_at_10\n")
        for word in sorted(by_word):
            query = qbe_mod.QbeQuery(query_word=word,
                                     instances=tuple(by_word[word]))
            res = qbe_mod.run_qbe(params, cfg, query, query_features, index,
                                  truth, pool_min=args.pool_min)
            out.write(f"{word},{len(query.instances)},{res.relevant_total},"
                      f"{res.p_at_10:.6f}\n")
    print(f"scored {len(by_word)} query words; report: {args.report}")
    return 0


def _plan_from_toml(path) -> ExperimentPlan:
    raw = _load_toml(path)
    corpus = raw.pop("corpus", None)
    kwargs = dict(raw)
    if corpus is not None:
        kwargs["corpus_spec"] = spec_from_mapping(corpus)
    valid = set(ExperimentPlan.__dataclass_fields__)
    unknown = set(kwargs) - valid
    if unknown:
        raise ValueError(f"unknown plan key(s): {sorted(unknown)}")
    return ExperimentPlan(**kwargs)


def cmd_experiment(args) -> int:
    plan = _plan_from_toml(args.plan)
    table = run_experiment(plan, args.out)
    print(f"wrote {len(table.rows)} result rows to {args.out}/results.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awe",
        description="Acoustic word embeddings: train, evaluate, search.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="MFCCs for a directory of WAV files")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-cmvn", action="store_true")
    p.add_argument("--window-ms", type=float, default=25.0)
    p.add_argument("--shift-ms", type=float, default=10.0)
    p.add_argument("--n-mels", type=int, default=26)
    p.add_argument("--n-ceps", type=int, default=13)
    p.add_argument("--preemphasis", type=float, default=0.97)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("synth", help="generate the synthetic family corpus")
    p.add_argument("--spec", required=True, help="TOML synthetic corpus spec")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mine-pairs", help="sample positive word pairs")
    p.add_argument("--align", required=True)
    p.add_argument("--feats", help="archive for bounds validation")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pooled", action="store_true",
                   help="sample one pooled universe instead of per language")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine_pairs)

    p = sub.add_parser("train", help="train a contrastive encoder")
    p.add_argument("--feats", required=True)
    p.add_argument("--pairs", required=True, help="comma-separated pair TSVs")
    p.add_argument("--dev-feats")
    p.add_argument("--dev-align")
    p.add_argument("--config", help="TOML train/encoder config")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch CSV log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-samediff", help="speaker-invariant same-different AP")
    p.add_argument("--model", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--align", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--pr-curve")
    p.set_defaults(func=cmd_eval_samediff)

    p = sub.add_parser("qbe-index", help="embed search-collection windows")
    p.add_argument("--model", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-len", type=int, default=20)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--len-step", type=int, default=10)
    p.add_argument("--stride", type=int, default=3)
    p.set_defaults(func=cmd_qbe_index)

    p = sub.add_parser("qbe", help="query-by-example search with P@10")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True,
                   help="alignment TSV of spoken query instances")
    p.add_argument("--query-feats", required=True,
                   help="archive holding the query utterances")
    p.add_argument("--truth", required=True,
                   help="TSV of utterance_id, word_type containment rows")
    p.add_argument("--report", required=True)
    p.add_argument("--pool-min", action="store_true",
                   help="pool instances by per-utterance min instead of averaging")
    p.set_defaults(func=cmd_qbe)

    p = sub.add_parser("experiment", help="run an experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
