import numpy as np
import pytest

from awe.archive import (ArchiveError, read_feature_archive,
                         write_feature_archive)
from awe.features import (FeatureSequence, MfccConfig, Waveform, compute_mfcc,
                          log_mel_energies, read_wav, write_wav)

RATE = 16000
NO_CMVN = MfccConfig(cmvn=False)


def tone(freq, seconds=1.0, rate=RATE, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=rate)


def noise(seconds=1.0, rate=RATE, seed=0, amp=0.3):
    rng = np.random.default_rng(seed)
    return Waveform(samples=amp * rng.standard_normal(int(seconds * rate)),
                    sample_rate=rate)


def test_silence_gives_constant_frames():
    wave = Waveform(samples=np.zeros(RATE), sample_rate=RATE)
    feats = compute_mfcc(wave, NO_CMVN)
    assert feats.n_frames == 98
    assert feats.dim == 13
    assert np.allclose(feats.frames, feats.frames[0], atol=1e-5)


def test_frame_count_formula():
    for n_samples in (RATE, 400, 401, 560, 12345):
        wave = noise(n_samples / RATE)
        feats = compute_mfcc(wave, NO_CMVN)
        assert feats.n_frames == 1 + (n_samples - 400) // 160


def test_gain_change_moves_only_c0():
    wave = noise(seed=3)
    half = Waveform(samples=0.5 * wave.samples, sample_rate=RATE)
    a = compute_mfcc(wave, NO_CMVN).frames
    b = compute_mfcc(half, NO_CMVN).frames
    # a uniform log-energy shift lands entirely on coefficient 0
    assert np.abs(a[:, 1:] - b[:, 1:]).max() < 1e-6
    c0_diff = a[:, 0] - b[:, 0]
    assert np.abs(c0_diff - c0_diff[0]).max() < 1e-5
    assert abs(c0_diff[0]) > 0.1


def expected_mel_filter(freq_hz, n_mels, rate):
    """Independent triangle-weight argmax from the mel edge formula."""
    top_mel = 2595.0 * np.log10(1.0 + (rate / 2.0) / 700.0)
    edges = 700.0 * (10.0 ** (np.linspace(0.0, top_mel, n_mels + 2) / 2595.0) - 1.0)
    weights = []
    for j in range(n_mels):
        left, centre, right = edges[j], edges[j + 1], edges[j + 2]
        weights.append(max(0.0, min((freq_hz - left) / (centre - left),
                                    (right - freq_hz) / (right - centre))))
    return int(np.argmax(weights))


def test_sine_hits_expected_mel_filter():
    wave = tone(440.0)
    feats = compute_mfcc(wave, NO_CMVN)
    assert feats.n_frames == 98
    assert np.all(np.isfinite(feats.frames))
    logmel = log_mel_energies(wave, NO_CMVN)
    measured = int(np.argmax(np.exp(logmel).mean(axis=0)))
    assert measured == expected_mel_filter(440.0, NO_CMVN.n_mels, RATE)


def test_cmvn_normalises_each_coefficient():
    feats = compute_mfcc(noise(seed=5), MfccConfig(cmvn=True))
    assert np.abs(feats.frames.mean(axis=0)).max() < 1e-4
    assert np.abs(feats.frames.var(axis=0) - 1.0).max() < 1e-3


def test_compute_mfcc_is_pure():
    wave = noise(seed=9)
    a = compute_mfcc(wave, MfccConfig())
    b = compute_mfcc(wave, MfccConfig())
    assert a.frames.tobytes() == b.frames.tobytes()


def test_output_finite_for_random_inputs():
    for seed in range(5):
        feats = compute_mfcc(noise(0.3, seed=seed), MfccConfig())
        assert np.all(np.isfinite(feats.frames))


def test_time_shift_alignment():
    wave = noise(seed=11)
    shifted = Waveform(samples=np.concatenate([np.zeros(160), wave.samples]),
                       sample_rate=RATE)
    a = compute_mfcc(wave, NO_CMVN).frames
    b = compute_mfcc(shifted, NO_CMVN).frames
    assert b.shape[0] == a.shape[0] + 1
    assert np.abs(b[1:] - a).max() < 1e-5


def test_short_audio_rejected():
    wave = Waveform(samples=np.zeros(399), sample_rate=RATE)
    with pytest.raises(ValueError, match="utterance too short"):
        compute_mfcc(wave, MfccConfig())


def test_unsupported_rate_rejected():
    with pytest.raises(ValueError, match="sample rate"):
        Waveform(samples=np.zeros(100), sample_rate=12345)


def test_config_validation():
    with pytest.raises(ValueError):
        MfccConfig(n_ceps=30, n_mels=26)
    with pytest.raises(ValueError):
        MfccConfig(preemphasis=1.0)
    with pytest.raises(ValueError):
        MfccConfig(window_ms=5.0, shift_ms=10.0)


def test_wav_round_trip(tmp_path):
    raw = noise(0.25, seed=2)
    wave = Waveform(samples=np.clip(raw.samples, -0.99, 0.99),
                    sample_rate=raw.sample_rate)
    path = tmp_path / "x.wav"
    write_wav(path, wave)
    back = read_wav(path)
    assert back.sample_rate == RATE
    assert np.abs(back.samples - wave.samples).max() < 1e-4


# -- archive -----------------------------------------------------------------

def seq(utt, t=3, d=13, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSequence(frames=rng.standard_normal((t, d)).astype(np.float32),
                           frame_shift_ms=10.0, utterance_id=utt)


def test_archive_round_trip_exact(tmp_path):
    path = tmp_path / "f.awef"
    feats = [seq("a", 3), seq("b", 7, seed=1), seq("c", 120, seed=2)]
    write_feature_archive(feats, path)
    back = read_feature_archive(path)
    assert [f.utterance_id for f in back] == ["a", "b", "c"]
    for orig, copy in zip(feats, back):
        assert orig.frames.tobytes() == copy.frames.tobytes()


def test_archive_empty_ok(tmp_path):
    path = tmp_path / "f.awef"
    write_feature_archive([], path)
    assert read_feature_archive(path) == []


def test_archive_duplicate_id_rejected(tmp_path):
    with pytest.raises(ArchiveError, match="duplicate"):
        write_feature_archive([seq("a"), seq("a")], tmp_path / "f.awef")


def test_archive_bad_magic(tmp_path):
    path = tmp_path / "f.awef"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ArchiveError, match="magic"):
        read_feature_archive(path)


def test_archive_truncated(tmp_path):
    path = tmp_path / "f.awef"
    write_feature_archive([seq("a", 50)], path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ArchiveError, match="truncated"):
        read_feature_archive(path)
