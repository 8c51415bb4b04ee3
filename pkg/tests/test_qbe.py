import numpy as np
import pytest

from awe.corpus import WordSegment
from awe.encoder import EncoderConfig, encode, init_params
from awe.qbe import (IndexError_, QbeQuery, SegmentIndex, WindowConfig,
                     build_index, enumerate_windows, read_index, run_qbe,
                     score_utterances, write_index)

CFG = EncoderConfig(input_dim=5, hidden_dim=8, n_layers=2, embed_dim=4,
                    max_frames=120)
WCFG = WindowConfig()


def feats(t, seed=0, dim=5):
    return np.random.default_rng(seed).standard_normal((t, dim)).astype(np.float32)


# -- window arithmetic --------------------------------------------------------

def test_boundary_single_window():
    assert enumerate_windows(20, WCFG) == [(0, 20)]


def test_t26_gives_three_windows():
    assert enumerate_windows(26, WCFG) == [(0, 20), (3, 20), (6, 20)]


def test_window_count_matches_bruteforce_double_loop():
    rng = np.random.default_rng(0)
    for t in rng.integers(20, 400, size=10):
        t = int(t)
        count = 0
        for start in range(0, t, WCFG.stride):
            for length in range(WCFG.min_len, WCFG.max_len + 1, WCFG.len_step):
                if start + length <= t and start <= t - WCFG.min_len:
                    count += 1
        assert len(enumerate_windows(t, WCFG)) == count


def test_short_utterance_flagged_single_window():
    assert enumerate_windows(13, WCFG) == [(0, 13)]


# -- index building -----------------------------------------------------------

def test_index_embeddings_match_encode_slices():
    params = init_params(CFG, 0)
    features = {"u0": feats(45, 1), "u1": feats(90, 2)}
    index = build_index(params, CFG, features, WCFG)
    for ui, utt in enumerate(index.utterance_ids):
        starts, lengths, emb = index.windows_for(ui)
        for k in range(starts.size):
            window = features[utt][starts[k]: starts[k] + lengths[k]]
            assert np.abs(emb[k].astype(np.float64)
                          - encode(params, CFG, window)).max() < 1e-6
    assert index.n_windows == sum(len(enumerate_windows(f.shape[0], WCFG))
                                  for f in features.values())


def test_index_respects_max_frames_truncation():
    cfg = EncoderConfig(input_dim=5, hidden_dim=8, n_layers=1, embed_dim=4,
                        max_frames=25)
    params = init_params(cfg, 3)
    features = {"u": feats(70, 5)}
    index = build_index(params, cfg, features, WCFG)
    starts, lengths, emb = index.windows_for(0)
    for k in range(starts.size):
        window = features["u"][starts[k]: starts[k] + lengths[k]]
        assert np.abs(emb[k].astype(np.float64)
                      - encode(params, cfg, window)).max() < 1e-6


def test_empty_archive_rejected():
    with pytest.raises(ValueError, match="empty"):
        build_index(init_params(CFG, 0), CFG, {}, WCFG)


def test_index_deterministic():
    params = init_params(CFG, 4)
    features = {"a": feats(64, 7), "b": feats(33, 8)}
    i1 = build_index(params, CFG, features, WCFG)
    i2 = build_index(params, CFG, features, WCFG)
    assert i1.embeddings.tobytes() == i2.embeddings.tobytes()


# -- scoring -------------------------------------------------------------------

def linear_scan_oracle(index, query):
    qn = np.asarray(query, float)
    qn = qn / np.linalg.norm(qn)
    best = {}
    for ui, utt in enumerate(index.utterance_ids):
        _, _, emb = index.windows_for(ui)
        score = None
        for row in emb:
            row = row.astype(np.float64)
            d = 1.0 - float(row @ qn / np.linalg.norm(row))
            score = d if score is None else min(score, d)
        best[utt] = score
    return sorted(best.items(), key=lambda kv: (kv[1], kv[0]))


def random_index(n_utts, seed, m=4):
    rng = np.random.default_rng(seed)
    offsets = [0]
    starts, lengths, embs = [], [], []
    for _ in range(n_utts):
        n_win = int(rng.integers(1, 40))
        starts.append(rng.integers(0, 100, size=n_win).astype(np.int32))
        lengths.append(np.full(n_win, 20, dtype=np.int32))
        embs.append(rng.standard_normal((n_win, m)).astype(np.float32))
        offsets.append(offsets[-1] + n_win)
    return SegmentIndex(
        utterance_ids=[f"utt{i:03d}" for i in range(n_utts)],
        utt_offsets=np.array(offsets, dtype=np.int64),
        window_starts=np.concatenate(starts),
        window_lengths=np.concatenate(lengths),
        embeddings=np.vstack(embs))


def test_scores_equal_linear_scan():
    # identical ranking; scores agree to 1e-12 (float dot products computed
    # by two independent strategies cannot be compared at zero tolerance)
    rng = np.random.default_rng(9)
    for seed in range(8):
        index = random_index(int(rng.integers(2, 50)), seed=seed + 10)
        query = rng.standard_normal(4)
        got = score_utterances(index, query)
        expected = linear_scan_oracle(index, query)
        assert [u for u, _ in got] == [u for u, _ in expected]
        assert np.allclose([s for _, s in got], [s for _, s in expected],
                           rtol=0, atol=1e-12)


def test_exact_ties_break_by_utterance_id():
    rng = np.random.default_rng(12)
    row = rng.standard_normal(4).astype(np.float32)
    emb = np.vstack([row, rng.standard_normal(4).astype(np.float32), row])
    index = SegmentIndex(["zz", "mm", "aa"], np.array([0, 1, 2, 3]),
                         np.zeros(3, np.int32), np.full(3, 20, np.int32), emb)
    ranked = score_utterances(index, row.astype(np.float64))
    assert ranked[0][0] == "aa" and ranked[1][0] == "zz"  # tie at distance 0
    assert ranked[0][1] == ranked[1][1]


def test_planted_window_scores_zero_and_ranks_first():
    index = random_index(12, seed=30)
    query = index.embeddings[17].astype(np.float64)  # copy of a real window row
    target = None
    for ui in range(len(index.utterance_ids)):
        lo, hi = index.utt_offsets[ui], index.utt_offsets[ui + 1]
        if lo <= 17 < hi:
            target = index.utterance_ids[ui]
    ranked = score_utterances(index, query)
    assert ranked[0][0] == target
    assert ranked[0][1] == pytest.approx(0.0, abs=1e-12)


def test_single_utterance_always_returned():
    index = random_index(1, seed=31)
    ranked = score_utterances(index, np.ones(4))
    assert len(ranked) == 1
    assert ranked[0][0] == "utt000"


def test_adding_windows_only_improves_score():
    rng = np.random.default_rng(32)
    base = random_index(6, seed=33)
    query = rng.standard_normal(4)
    before = dict(score_utterances(base, query))
    extra = rng.standard_normal((3, 4)).astype(np.float32)
    target = 2  # extend utterance 2 with extra windows
    lo, hi = base.utt_offsets[target], base.utt_offsets[target + 1]
    emb = np.vstack([base.embeddings[:hi], extra, base.embeddings[hi:]])
    offsets = base.utt_offsets.copy()
    offsets[target + 1:] += 3
    starts = np.concatenate([base.window_starts[:hi], np.zeros(3, np.int32),
                             base.window_starts[hi:]])
    lengths = np.concatenate([base.window_lengths[:hi], np.full(3, 20, np.int32),
                              base.window_lengths[hi:]])
    grown = SegmentIndex(base.utterance_ids, offsets, starts, lengths, emb)
    after = dict(score_utterances(grown, query))
    for utt in before:
        if utt == "utt002":
            assert after[utt] <= before[utt]
        else:
            assert after[utt] == before[utt]


def test_ranking_invariant_to_insertion_order():
    params = init_params(CFG, 5)
    features = {"a": feats(50, 40), "b": feats(61, 41), "c": feats(44, 42)}
    reordered = {"c": features["c"], "a": features["a"], "b": features["b"]}
    q = np.random.default_rng(43).standard_normal(4)
    r1 = score_utterances(build_index(params, CFG, features, WCFG), q)
    r2 = score_utterances(build_index(params, CFG, reordered, WCFG), q)
    assert r1 == r2


# -- planted-query corpus with an averaging oracle encoder ----------------------

def test_planted_query_tops_ranking_with_average_encoder():
    """Query rendered verbatim inside 5 of 20 utterances, disjoint phones
    elsewhere; with mean-pooled window embeddings the planted utterances
    must hold the top 5 ranks (distance exactly 0 at the aligned window)."""
    rng = np.random.default_rng(50)
    dim = 6
    query_frames = np.repeat(rng.standard_normal((3, dim)), 10, axis=0)  # 30 frames
    planted = {f"plant{i}" for i in range(5)}
    features = {}
    for i in range(5):
        left = np.repeat(rng.standard_normal((2, dim)), 12, axis=0)
        right = np.repeat(rng.standard_normal((2, dim)), 12, axis=0)
        # plant start must sit on the 3-frame stride grid for exact alignment
        features[f"plant{i}"] = np.vstack([left, query_frames, right])
    for i in range(15):
        other = np.repeat(rng.standard_normal((8, dim)), 10, axis=0)
        features[f"filler{i:02d}"] = other

    wcfg = WindowConfig(min_len=20, max_len=60, len_step=10, stride=3)
    offsets, starts, lengths, embs, ids = [0], [], [], [], []
    for utt, frames in features.items():
        wins = enumerate_windows(frames.shape[0], wcfg)
        ids.append(utt)
        starts.append(np.array([w[0] for w in wins], np.int32))
        lengths.append(np.array([w[1] for w in wins], np.int32))
        embs.append(np.stack([frames[s: s + l].mean(axis=0)
                              for s, l in wins]).astype(np.float32))
        offsets.append(offsets[-1] + len(wins))
    index = SegmentIndex(ids, np.array(offsets, np.int64),
                         np.concatenate(starts), np.concatenate(lengths),
                         np.vstack(embs))
    query_emb = query_frames.mean(axis=0)
    ranked = score_utterances(index, query_emb)
    top5 = {utt for utt, _ in ranked[:5]}
    assert top5 == planted
    for utt, score in ranked[:5]:
        assert score == pytest.approx(0.0, abs=1e-12)  # exact alignment exists
    # brute-force verification of ranking and scores
    oracle = linear_scan_oracle(index, query_emb)
    assert [u for u, _ in ranked] == [u for u, _ in oracle]
    assert np.allclose([s for _, s in ranked], [s for _, s in oracle],
                       rtol=0, atol=1e-12)


# -- run_qbe ---------------------------------------------------------------------

def qbe_setup(seed=60):
    params = init_params(CFG, seed)
    rng = np.random.default_rng(seed)
    search = {f"u{i}": feats(40, seed + i) for i in range(6)}
    truth = {f"u{i}": ({"dog"} if i < 3 else {"cat"}) for i in range(6)}
    qfeats = {"q0": feats(30, seed + 100), "q1": feats(28, seed + 101)}
    instances = (WordSegment("q0", "dog", "s0", "aa", 0, 25),
                 WordSegment("q1", "dog", "s1", "aa", 3, 27))
    return params, search, truth, qfeats, QbeQuery("dog", instances)


def test_p_at_10_bounds():
    params, search, truth, qfeats, query = qbe_setup()
    index = build_index(params, CFG, search, WCFG)
    all_true = {u: {"dog"} for u in search}
    res = run_qbe(params, CFG, query, qfeats, index, all_true)
    assert res.p_at_10 == 1.0
    # no indexed utterance contains the word (it exists only in a truth row
    # for an unindexed utterance, keeping it in the vocabulary)
    none_true = {u: {"cat"} for u in search}
    none_true["external_utt"] = {"dog"}
    res0 = run_qbe(params, CFG, query, qfeats, index, none_true)
    assert res0.p_at_10 == 0.0
    assert res0.relevant_total == 0


def test_p_at_min_when_fewer_than_ten():
    params, search, truth, qfeats, query = qbe_setup()
    index = build_index(params, CFG, search, WCFG)
    res = run_qbe(params, CFG, query, qfeats, index, truth)
    # 6 indexed utterances, 3 relevant; precision quantised in sixths
    assert res.relevant_total == 3
    for p in res.per_instance_p_at_10:
        assert p in {i / 6 for i in range(7)}
    assert res.p_at_10 == pytest.approx(np.mean(res.per_instance_p_at_10))


def test_pool_min_single_ranking():
    params, search, truth, qfeats, query = qbe_setup()
    index = build_index(params, CFG, search, WCFG)
    res = run_qbe(params, CFG, query, qfeats, index, truth, pool_min=True)
    assert len(res.rankings) == 1
    pooled = dict(res.rankings[0])
    # pooled score is the min over per-instance scores
    individual = []
    from awe.corpus import slice_segment
    from awe.encoder import encode_batch
    z = encode_batch(params, CFG, [slice_segment(qfeats, s) for s in query.instances])
    for i in range(2):
        individual.append(dict(score_utterances(index, z[i])))
    for utt in pooled:
        assert pooled[utt] == pytest.approx(min(individual[0][utt],
                                                individual[1][utt]), abs=1e-12)


def test_truth_must_cover_index():
    params, search, truth, qfeats, query = qbe_setup()
    index = build_index(params, CFG, search, WCFG)
    incomplete = dict(truth)
    del incomplete["u3"]
    with pytest.raises(ValueError, match="ground truth missing"):
        run_qbe(params, CFG, query, qfeats, index, incomplete)


def test_unknown_query_word_rejected():
    params, search, truth, qfeats, query = qbe_setup()
    index = build_index(params, CFG, search, WCFG)
    bad = QbeQuery("zebra", query.instances)
    with pytest.raises(ValueError, match="zebra"):
        run_qbe(params, CFG, bad, qfeats, index, truth)


def test_random_scorer_p10_near_relevant_fraction():
    rng = np.random.default_rng(70)
    n_utts, frac = 40, 0.5
    values = []
    for seed in range(20):
        index = random_index(n_utts, seed=seed + 200)
        relevant = {f"utt{i:03d}" for i in range(int(n_utts * frac))}
        query = rng.standard_normal(4)  # unrelated to any window: random ranking
        ranked = score_utterances(index, query)
        top = [u for u, _ in ranked[:10]]
        values.append(sum(1 for u in top if u in relevant) / 10)
    assert abs(np.mean(values) - frac) / frac < 0.2


# -- AWEI round trip ---------------------------------------------------------------

def test_index_file_round_trip(tmp_path):
    params = init_params(CFG, 6)
    features = {"a": feats(50, 80), "b": feats(26, 81)}
    index = build_index(params, CFG, features, WCFG)
    path = tmp_path / "idx.awei"
    write_index(index, path)
    back = read_index(path)
    assert back.utterance_ids == index.utterance_ids
    assert np.array_equal(back.utt_offsets, index.utt_offsets)
    assert np.array_equal(back.window_starts, index.window_starts)
    assert np.array_equal(back.window_lengths, index.window_lengths)
    assert back.embeddings.tobytes() == index.embeddings.tobytes()


def test_index_file_bad_magic(tmp_path):
    path = tmp_path / "idx.awei"
    path.write_bytes(b"WHAT" + b"\x00" * 20)
    with pytest.raises(IndexError_, match="magic"):
        read_index(path)


def test_index_file_truncated(tmp_path):
    params = init_params(CFG, 7)
    index = build_index(params, CFG, {"a": feats(50, 90)}, WCFG)
    path = tmp_path / "idx.awei"
    write_index(index, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(IndexError_, match="truncated"):
        read_index(path)
