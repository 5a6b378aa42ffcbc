import hashlib
import shutil
import statistics
import wave

import numpy as np
import pytest

from dysvc import corpus

from conftest import make_memory_index


def write_minimal_metadata(root):
    root.mkdir(parents=True, exist_ok=True)
    corpus.write_speakers_tsv(
        [corpus.SpeakerProfile("A01", "normal", "m"),
         corpus.SpeakerProfile("B01", "dysarthric", "f", ster=40.0)],
        root / "speakers.tsv")
    corpus.write_lexicon({"W001": ("t", "aa"), "W002": ("k", "ee")}, root / "lexicon.txt")


class TestLoadCorpus:
    def test_empty_audio_with_valid_metadata(self, tmp_path):
        write_minimal_metadata(tmp_path)
        (tmp_path / "audio").mkdir()
        index = corpus.load_corpus(tmp_path)
        assert len(index.utterances) == 0
        assert set(index.speakers) == {"A01", "B01"}

    def test_missing_metadata_is_fatal_and_names_file(self, tmp_path):
        write_minimal_metadata(tmp_path)
        (tmp_path / "speakers.tsv").unlink()
        with pytest.raises(corpus.CorpusError, match="speakers.tsv"):
            corpus.load_corpus(tmp_path)

    def test_wrong_sample_rate_names_file(self, tmp_path):
        write_minimal_metadata(tmp_path)
        wav_path = tmp_path / "audio" / "A01" / "A01_W001.wav"
        wav_path.parent.mkdir(parents=True)
        with wave.open(str(wav_path), "wb") as f:
            f.setnchannels(1)
            f.setsampwidth(2)
            f.setframerate(8000)
            f.writeframes(np.zeros(8000, dtype="<i2").tobytes())
        with pytest.raises(corpus.CorpusError, match="A01_W001.wav.*16000"):
            corpus.load_corpus(tmp_path)

    def test_word_missing_from_lexicon_names_utt(self, tmp_path):
        write_minimal_metadata(tmp_path)
        corpus.write_wav(tmp_path / "audio" / "A01" / "A01_W999.wav", np.zeros(1600))
        with pytest.raises(corpus.CorpusError, match="A01_W999"):
            corpus.load_corpus(tmp_path)

    def test_round_trip_through_generator(self, tiny_corpus):
        reloaded = corpus.load_corpus(tiny_corpus.root)
        assert set(reloaded.speakers) == set(tiny_corpus.speakers)
        assert len(reloaded.utterances) == 7 * 12
        assert reloaded.lexicon == tiny_corpus.lexicon
        assert [u.utt_id for u in reloaded.utterances] == \
               [u.utt_id for u in tiny_corpus.utterances]
        for sid in reloaded.speakers:
            assert reloaded.speakers[sid] == tiny_corpus.speakers[sid]

    def test_splits_with_unknown_utt_rejected(self, tmp_path):
        write_minimal_metadata(tmp_path)
        corpus.write_wav(tmp_path / "audio" / "A01" / "A01_W001.wav", np.zeros(1600))
        (tmp_path / "splits.tsv").write_text("A01_W001\ttrain\nNOPE_W001\ttest\n")
        with pytest.raises(corpus.CorpusError, match="NOPE_W001"):
            corpus.load_corpus(tmp_path)


class TestSpeakerProfile:
    def test_dysarthric_requires_ster(self):
        with pytest.raises(corpus.CorpusError, match="STER"):
            corpus.SpeakerProfile("X", "dysarthric", "m")

    def test_normal_must_not_have_ster(self):
        with pytest.raises(corpus.CorpusError, match="STER"):
            corpus.SpeakerProfile("X", "normal", "m", ster=10.0)

    def test_band_from_ster_is_display_only(self):
        assert corpus.SpeakerProfile("X", "dysarthric", "m", ster=7.0).intelligibility_band == "high"
        assert corpus.SpeakerProfile("X", "dysarthric", "m", ster=42.0).intelligibility_band == "mid"
        assert corpus.SpeakerProfile("X", "dysarthric", "m", ster=98.0).intelligibility_band == "low"
        assert corpus.SpeakerProfile("X", "normal", "m").intelligibility_band == "none"


class TestGenerator:
    def test_identity_rendering_duration(self, tiny_corpus):
        templates = {t.word_id: t for t in corpus.word_templates(7, 12)}
        hop_s = 256 / 16000
        for u in tiny_corpus.utterances_for("N03"):  # stretch 1.0, tilt 0
            assert abs(u.duration - templates[u.word_id].duration) <= hop_s

    def test_stretch_ratio(self, tiny_corpus):
        by_word_n = {u.word_id: u for u in tiny_corpus.utterances_for("N01")}
        ratios = [u.duration / by_word_n[u.word_id].duration
                  for u in tiny_corpus.utterances_for("D02")]
        med = statistics.median(ratios)
        assert 1.5 * 0.95 <= med <= 1.5 * 1.05

    def test_duration_monotone_in_stretch(self, tiny_corpus):
        word = "W001"
        durs = []
        for sid in ("N01", "D01", "D02", "D03"):  # stretch 1.0, 1.25, 1.5, 1.75
            u = [u for u in tiny_corpus.utterances_for(sid) if u.word_id == word][0]
            durs.append(u.duration)
        assert durs == sorted(durs)
        assert len(set(durs)) == len(durs)

    def test_same_seed_bit_identical(self, tiny_corpus, tmp_path):
        again = corpus.generate_synthetic_corpus(
            seed=7, n_normal=4, n_dysarthric=3, words_per_speaker=12,
            out=tmp_path / "again")
        for u1, u2 in zip(tiny_corpus.utterances, again.utterances):
            h1 = hashlib.sha256(u1.path.read_bytes()).hexdigest()
            h2 = hashlib.sha256(u2.path.read_bytes()).hexdigest()
            assert h1 == h2, u1.utt_id

    def test_pseudo_ster_monotone_in_stretch(self, tiny_corpus):
        sters = [tiny_corpus.speakers["D%02d" % i].ster for i in (1, 2, 3)]
        assert sters == sorted(sters)
        assert len(set(sters)) == 3

    def test_counts_validated(self, tmp_path):
        with pytest.raises(corpus.CorpusError):
            corpus.generate_synthetic_corpus(seed=1, n_normal=0, n_dysarthric=1,
                                             words_per_speaker=2, out=tmp_path / "x")


class TestSplitTrainTest:
    def test_paper_scale_split_counts(self):
        index = make_memory_index(n_speakers=3, n_words=765)
        out = corpus.split_train_test(index, 510, 255)
        for sid in out.speakers:
            utts = out.utterances_for(sid)
            assert sum(1 for u in utts if u.split == "train") == 510
            assert sum(1 for u in utts if u.split == "test") == 255

    def test_test_words_parallel_across_speakers(self):
        index = make_memory_index(n_speakers=4, n_words=10)
        out = corpus.split_train_test(index, 6, 4)
        test_words = [tuple(sorted({u.word_id for u in out.utterances_for(sid, "test")}))
                      for sid in sorted(out.speakers)]
        assert len(set(test_words)) == 1

    def test_zero_train_count(self):
        index = make_memory_index(n_speakers=2, n_words=5)
        out = corpus.split_train_test(index, 0, 3)
        assert all(u.split == "test" for u in out.utterances)
        assert len(out.utterances_for("S01")) == 3

    def test_deterministic(self):
        index = make_memory_index(n_speakers=3, n_words=20)
        a = corpus.split_train_test(index, 12, 6)
        b = corpus.split_train_test(index, 12, 6)
        assert [(u.utt_id, u.split) for u in a.utterances] == \
               [(u.utt_id, u.split) for u in b.utterances]

    def test_insufficient_words_names_speaker(self):
        index = make_memory_index(n_speakers=2, n_words=6,
                                  speaker_words={"S02": ["W001", "W002"]})
        with pytest.raises(corpus.CorpusError, match="S02"):
            corpus.split_train_test(index, 4, 2)


class TestParallelPairs:
    def test_paper_scale_pair_count(self):
        # 13 normal sources x 510 shared train words against one target
        index = make_memory_index(n_speakers=14, n_words=510)
        sources = ["S%02d" % i for i in range(2, 15)]
        pairs = corpus.parallel_pairs(index, sources, "S01", "train")
        assert len(pairs) == 13 * 510

    def test_sources_equal_target_rejected(self):
        index = make_memory_index(n_speakers=2, n_words=3)
        with pytest.raises(corpus.CorpusError):
            corpus.parallel_pairs(index, {"S01"}, "S01", "train")

    def test_target_missing_words_halves_pairs(self):
        words = ["W%03d" % (i + 1) for i in range(8)]
        index = make_memory_index(n_speakers=3, n_words=8,
                                  speaker_words={"S01": words[:4]})
        pairs = corpus.parallel_pairs(index, ["S02", "S03"], "S01", "train")
        assert len(pairs) == 2 * 4

    def test_no_shared_words_gives_empty_with_warning(self, caplog):
        index = make_memory_index(n_speakers=2, n_words=4,
                                  speaker_words={"S01": ["W001"], "S02": ["W002"]})
        with caplog.at_level("WARNING"):
            pairs = corpus.parallel_pairs(index, ["S02"], "S01", "train")
        assert pairs == []
        assert any("no shared word" in r.message for r in caplog.records)

    def test_ordering_deterministic(self):
        index = make_memory_index(n_speakers=3, n_words=4)
        pairs = corpus.parallel_pairs(index, ["S03", "S02"], "S01", "train")
        keys = [(s.word_id, s.speaker_id) for s, _ in pairs]
        assert keys == sorted(keys)


class TestWavIO:
    def test_round_trip(self, tmp_path):
        x = np.clip(np.random.default_rng(0).standard_normal(3200) * 0.2, -1, 1)
        path = tmp_path / "x.wav"
        corpus.write_wav(path, x)
        y = corpus.read_wav(path, expected_rate=16000)
        assert len(y) == len(x)
        assert np.max(np.abs(y - x)) < 2.0 / 32768
