import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from dysvc import dsp
from dysvc.corpus import Utterance


def sine(freq, duration=1.0, sr=16000, amp=1.0):
    t = np.arange(int(duration * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


class TestMelspec:
    def test_zero_signal_hits_log_floor(self):
        m = dsp.melspec(np.zeros(16000))
        assert np.all(m.frames == np.log(1e-10))

    def test_frame_count_formula(self):
        m = dsp.melspec(np.ones(16384) * 0.1)
        assert m.n_frames == 1 + (16384 - 1024) // 256 == 61

    def test_sine_peaks_in_nearest_band(self):
        m = dsp.melspec(sine(1000.0))
        centers = dsp.mel_band_centers()
        expected = int(np.argmin(np.abs(centers - 1000.0)))
        got = int(np.argmax(m.frames.mean(axis=0)))
        assert abs(got - expected) <= 1

    def test_too_short_signal_rejected(self):
        with pytest.raises(dsp.DspError):
            dsp.melspec(np.zeros(1023))

    def test_wrong_rate_rejected(self):
        with pytest.raises(dsp.DspError):
            dsp.melspec(np.zeros(16000), sample_rate=8000)

    def test_shift_by_hop_shifts_frames(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(8192)
        a = dsp.melspec(x)
        b = dsp.melspec(x[256:])
        assert_allclose(b.frames, a.frames[1:], atol=1e-9)

    def test_deterministic(self):
        x = sine(440.0, duration=0.5)
        assert np.array_equal(dsp.melspec(x).frames, dsp.melspec(x).frames)


def _mem_utt(sid, word, samples, split="train"):
    return Utterance(utt_id="%s_%s" % (sid, word), speaker_id=sid, word_id=word,
                     path=None, n_samples=len(samples), sample_rate=16000,
                     phonemes=("t", "aa"), split=split, _cache=samples)


class _StubIndex:
    def __init__(self, utterances):
        self.utterances = list(utterances)


class TestSpeakerStats:
    def test_constant_frames_clamp_std(self):
        x = np.zeros(4096)  # all-silence: every mel entry equals the log floor
        stats = dsp.speaker_stats(_StubIndex([_mem_utt("A", "W1", x)]), "A")
        assert_allclose(stats.mean, np.log(1e-10))
        assert np.all(stats.std == 1e-8)

    def test_two_utterances_hand_computed(self):
        rng = np.random.default_rng(5)
        xs = [rng.standard_normal(4096) for _ in range(2)]
        utts = [_mem_utt("A", "W%d" % i, x) for i, x in enumerate(xs)]
        stats = dsp.speaker_stats(_StubIndex(utts), "A")
        frames = np.concatenate([dsp.melspec(x).frames for x in xs])
        assert_allclose(stats.mean, frames.mean(axis=0))
        assert_allclose(stats.std, np.maximum(frames.std(axis=0), 1e-8))

    def test_order_invariance(self):
        rng = np.random.default_rng(6)
        xs = [rng.standard_normal(4096) for _ in range(3)]
        utts = [_mem_utt("A", "W%d" % i, x) for i, x in enumerate(xs)]
        s1 = dsp.speaker_stats(_StubIndex(utts), "A")
        s2 = dsp.speaker_stats(_StubIndex(utts[::-1]), "A")
        assert_allclose(s1.mean, s2.mean, atol=1e-12)
        assert_allclose(s1.std, s2.std, atol=1e-12)

    def test_no_train_utterances_rejected(self):
        utt = _mem_utt("A", "W1", np.zeros(4096), split="test")
        with pytest.raises(dsp.DspError):
            dsp.speaker_stats(_StubIndex([utt]), "A")


class TestNormalize:
    def test_mean_frames_map_to_zero(self):
        stats = dsp.FeatureStats("A", mean=np.full(80, 2.0), std=np.full(80, 3.0))
        m = dsp.MelSpectrogram(frames=np.full((5, 80), 2.0))
        assert np.all(dsp.normalize(m, stats).frames == 0.0)

    def test_identity_stats(self):
        stats = dsp.FeatureStats("A", mean=np.zeros(80), std=np.ones(80))
        m = dsp.MelSpectrogram(frames=np.random.default_rng(0).standard_normal((7, 80)))
        assert_allclose(dsp.normalize(m, stats).frames, m.frames)

    def test_band_mismatch(self):
        stats = dsp.FeatureStats("A", mean=np.zeros(40), std=np.ones(40))
        m = dsp.MelSpectrogram(frames=np.zeros((5, 80)))
        with pytest.raises(dsp.DspError):
            dsp.normalize(m, stats)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        frames = rng.standard_normal((6, 80)) * 5.0
        stats = dsp.FeatureStats("A", mean=rng.standard_normal(80),
                                 std=np.maximum(np.abs(rng.standard_normal(80)), 1e-3))
        m = dsp.MelSpectrogram(frames=frames)
        back = dsp.denormalize(dsp.normalize(m, stats), stats)
        assert np.max(np.abs(back.frames - frames)) < 1e-9


def brute_force_dtw_cost(dist):
    """Minimum path cost by exhaustive enumeration of all monotone paths."""
    tx, ty = dist.shape
    best = [np.inf]

    def walk(i, j, cost):
        cost += dist[i, j]
        if cost >= best[0]:
            return
        if i == tx - 1 and j == ty - 1:
            best[0] = cost
            return
        if i + 1 < tx and j + 1 < ty:
            walk(i + 1, j + 1, cost)
        if i + 1 < tx:
            walk(i + 1, j, cost)
        if j + 1 < ty:
            walk(i, j + 1, cost)

    walk(0, 0, 0.0)
    return best[0]


class TestDtw:
    def test_identical_inputs_give_diagonal(self):
        x = np.random.default_rng(1).standard_normal((6, 4))
        path = dsp.dtw(x, x)
        assert path.pairs == tuple((i, i) for i in range(6))
        assert path.cost == pytest.approx(0.0, abs=1e-12)

    def test_hand_grid_matches_enumeration(self):
        # 3 x 3 frames engineered so the distance grid is irregular
        x = np.array([[0.0], [1.0], [4.0]])
        y = np.array([[0.5], [2.0], [3.5]])
        path = dsp.dtw(x, y)
        dist = np.abs(x - y.T)
        assert path.cost == pytest.approx(brute_force_dtw_cost(dist))
        # path cost must equal the sum of visited cell distances
        assert path.cost == pytest.approx(sum(dist[i, j] for i, j in path.pairs))

    def test_cost_symmetry(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 3))
        y = rng.standard_normal((7, 3))
        assert dsp.dtw(x, y).cost == pytest.approx(dsp.dtw(y, x).cost, rel=1e-12)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            tx, ty = rng.integers(1, 7, size=2)
            x = rng.standard_normal((tx, 2))
            y = rng.standard_normal((ty, 2))
            dist = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))
            assert dsp.dtw(x, y).cost == pytest.approx(brute_force_dtw_cost(dist))

    def test_path_structure(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((9, 3))
        y = rng.standard_normal((5, 3))
        path = dsp.dtw(x, y)
        assert path.pairs[0] == (0, 0)
        assert path.pairs[-1] == (8, 4)
        steps = {(a2 - a1, b2 - b1)
                 for (a1, b1), (a2, b2) in zip(path.pairs, path.pairs[1:])}
        assert steps <= {(1, 0), (0, 1), (1, 1)}

    def test_band_mismatch_rejected(self):
        with pytest.raises(dsp.DspError):
            dsp.dtw(np.zeros((3, 4)), np.zeros((3, 5)))


class TestAlignTo:
    def test_self_alignment_is_identity(self):
        x = dsp.MelSpectrogram(frames=np.random.default_rng(7).standard_normal((12, 80)))
        out = dsp.align_to(x, x)
        assert np.array_equal(out.frames, x.frames)

    def test_duplicated_frames_average(self):
        rng = np.random.default_rng(8)
        ref = rng.standard_normal((6, 3))
        x = np.repeat(ref, 2, axis=0)
        out = dsp.align_to(x, ref)
        assert out.frames.shape == (6, 3)
        assert_allclose(out.frames, ref, atol=1e-12)

    def test_output_length_matches_ref(self):
        rng = np.random.default_rng(9)
        for tx, ty in [(3, 11), (20, 4), (7, 7)]:
            x = rng.standard_normal((tx, 5))
            ref = rng.standard_normal((ty, 5))
            assert dsp.align_to(x, ref).frames.shape == (ty, 5)


class TestGriffinLim:
    def test_analysis_synthesis_band_profile(self):
        x = sine(440.0, duration=0.8) * 0.8 + sine(1800.0, duration=0.8) * 0.3
        m = dsp.melspec(x)
        y = dsp.griffin_lim(m, iterations=40)
        m2 = dsp.melspec(y)
        t = min(m.n_frames, m2.n_frames)
        prof1 = m.frames[:t].mean(axis=0)
        prof2 = m2.frames[:t].mean(axis=0)
        r = np.corrcoef(prof1, prof2)[0, 1]
        assert r >= 0.95

    def test_spectral_convergence_nonincreasing(self):
        x = sine(300.0, duration=0.4) + 0.2 * sine(2300.0, duration=0.4)
        m = dsp.melspec(x)
        _, trace = dsp.griffin_lim(m, iterations=25, return_trace=True)
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-9)

    def test_output_length_formula(self):
        m = dsp.melspec(sine(500.0, duration=0.5))
        y = dsp.griffin_lim(m, iterations=2)
        assert len(y) == (m.n_frames - 1) * 256 + 1024

    def test_iteration_count_validated(self):
        m = dsp.melspec(sine(500.0, duration=0.2))
        with pytest.raises(dsp.DspError):
            dsp.griffin_lim(m, iterations=0)
