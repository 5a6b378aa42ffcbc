import numpy as np
import pytest

from dysvc import corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small deterministic synthetic corpus shared across test modules.

    4 normal speakers (stretch 1.0, tilts +6/-6/0/+3) and 3 dysarthric
    speakers (stretch 1.25/1.5/1.75), 12 words, 8 train / 4 test.
    """
    root = tmp_path_factory.mktemp("corpus") / "synth"
    return corpus.generate_synthetic_corpus(
        seed=7, n_normal=4, n_dysarthric=3, words_per_speaker=12, out=root)


def make_memory_index(n_speakers=2, n_words=4, split="train", words=None,
                      speaker_words=None):
    """In-memory CorpusIndex with stub audio, for split/pairing logic tests.

    ``speaker_words`` optionally maps speaker_id -> word list to model
    speakers with unequal vocabularies.
    """
    words = words or ["W%03d" % (i + 1) for i in range(n_words)]
    lexicon = {w: ("t", "aa") for w in words}
    speakers = []
    utts = []
    samples = np.zeros(1600)
    for i in range(n_speakers):
        sid = "S%02d" % (i + 1)
        group = "dysarthric" if i == 0 else "normal"
        speakers.append(corpus.SpeakerProfile(
            speaker_id=sid, group=group, gender="m" if i % 2 == 0 else "f",
            ster=50.0 if group == "dysarthric" else None))
        for w in (speaker_words or {}).get(sid, words):
            utts.append(corpus.Utterance(
                utt_id="%s_%s" % (sid, w), speaker_id=sid, word_id=w,
                path=None, n_samples=len(samples), sample_rate=16000,
                phonemes=lexicon[w], split=split, _cache=samples))
    return corpus.CorpusIndex(speakers=speakers, utterances=utts, lexicon=lexicon)
