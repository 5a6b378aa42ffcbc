"""Corpus data model, directory-layout ingestion and synthetic generation.

Corpus layout (all text UTF-8, LF line endings, no header rows)::

    root/speakers.tsv    speaker_id  group  gender  ster|-  stretch|-  tilt|-
    root/lexicon.txt     WORD_ID phoneme phoneme ...
    root/splits.tsv      utt_id  train|test          (optional)
    root/audio/<speaker_id>/<speaker_id>_<word_id>.wav   16-bit PCM mono 16 kHz

The synthetic generator emits this exact layout.  Its "dysarthria" is
controlled by two known parameters per speaker: a uniform time-stretch
and a spectral tilt in dB/octave.  Dysarthric speakers additionally get
inserted inter-syllable pauses and a slow amplitude tremor, both scaled
with the stretch, so that severity grows along one knob.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE

logger = logging.getLogger(__name__)

MIN_DURATION = 0.05
MAX_DURATION = 30.0

# 20-symbol phoneme inventory for synthetic corpora
CONSONANTS = ("t", "k", "p", "s", "m", "n", "r", "l")
VOWELS = ("aa", "ee", "ii", "oo", "uu", "ay", "oy", "aw", "eh", "ih", "uh", "er")
PHONEME_INVENTORY = CONSONANTS + VOWELS


class CorpusError(ValueError):
    """Raised for malformed corpus layouts or metadata."""


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    group: str                      # "normal" | "dysarthric"
    gender: str                     # "m" | "f"
    ster: float | None = None       # percent in [0, 100]; dysarthric only
    synth_params: dict | None = None  # {"stretch": float, "tilt_db_per_octave": float}

    def __post_init__(self):
        if self.group not in ("normal", "dysarthric"):
            raise CorpusError("speaker %s: bad group %r" % (self.speaker_id, self.group))
        if self.gender not in ("m", "f"):
            raise CorpusError("speaker %s: bad gender %r" % (self.speaker_id, self.gender))
        if self.group == "dysarthric" and self.ster is None:
            raise CorpusError("dysarthric speaker %s is missing an STER value" % self.speaker_id)
        if self.group == "normal" and self.ster is not None:
            raise CorpusError("normal speaker %s must not carry an STER value" % self.speaker_id)
        if self.ster is not None and not 0.0 <= self.ster <= 100.0:
            raise CorpusError("speaker %s: STER %r outside [0, 100]" % (self.speaker_id, self.ster))
        if self.synth_params is not None and self.synth_params.get("stretch", 1.0) <= 0:
            raise CorpusError("speaker %s: stretch must be > 0" % self.speaker_id)

    @property
    def is_synthetic(self) -> bool:
        return self.synth_params is not None

    @property
    def intelligibility_band(self) -> str:
        """Display-only severity band derived from STER (high = lowest STER)."""
        if self.ster is None:
            return "none"
        if self.ster <= 25.0:
            return "high"
        if self.ster <= 75.0:
            return "mid"
        return "low"


@dataclass
class Utterance:
    """One recorded/synthesized word token; audio is loaded lazily.

    ``path`` may be None for in-memory utterances, in which case the
    samples must be supplied through ``_cache``.
    """

    utt_id: str
    speaker_id: str
    word_id: str
    path: Path | None
    n_samples: int
    sample_rate: int
    phonemes: tuple
    split: str = "train"
    _cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def samples(self) -> np.ndarray:
        if self._cache is None:
            if self.path is None:
                raise CorpusError("utterance %s has neither a path nor samples" % self.utt_id)
            self._cache = read_wav(self.path, expected_rate=self.sample_rate)
        return self._cache


class CorpusIndex:
    """Immutable view of a corpus: speakers, utterance descriptors, lexicon."""

    def __init__(self, speakers, utterances, lexicon, root=None):
        self.root = Path(root) if root is not None else None
        self.speakers = {s.speaker_id: s for s in speakers}
        self.utterances = tuple(sorted(utterances, key=lambda u: u.utt_id))
        self.lexicon = dict(lexicon)
        self._by_id = {u.utt_id: u for u in self.utterances}
        for u in self.utterances:
            if u.word_id not in self.lexicon:
                raise CorpusError("utterance %s: word %s absent from lexicon"
                                  % (u.utt_id, u.word_id))
            if u.speaker_id not in self.speakers:
                raise CorpusError("utterance %s: unknown speaker %s"
                                  % (u.utt_id, u.speaker_id))
        self.parallel_index: dict = {}
        for u in self.utterances:
            self.parallel_index.setdefault((u.word_id, u.split), []).append(u.utt_id)
        self.parallel_index = {k: tuple(v) for k, v in self.parallel_index.items()}

    def utterance(self, utt_id: str) -> Utterance:
        try:
            return self._by_id[utt_id]
        except KeyError:
            raise CorpusError("unknown utterance id %s" % utt_id) from None

    def utterances_for(self, speaker_id: str, split: str | None = None):
        return [u for u in self.utterances
                if u.speaker_id == speaker_id and (split is None or u.split == split)]

    def speakers_in_group(self, group: str):
        return sorted(s.speaker_id for s in self.speakers.values() if s.group == group)

    def words_for(self, speaker_id: str, split: str | None = None):
        return sorted({u.word_id for u in self.utterances_for(speaker_id, split)})


def read_wav(path, expected_rate: int | None = None) -> np.ndarray:
    """Read a 16-bit PCM mono wav into float64 samples in [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        rate = f.getframerate()
        if expected_rate is not None and rate != expected_rate:
            raise CorpusError("%s: sample rate %d Hz, expected %d Hz"
                              % (path, rate, expected_rate))
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise CorpusError("%s: expected 16-bit PCM mono" % path)
        data = f.readframes(f.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def _wav_header(path) -> tuple:
    with wave.open(str(path), "rb") as f:
        return f.getframerate(), f.getnchannels(), f.getsampwidth(), f.getnframes()


def _parse_optional_float(text: str, what: str, line_no: int) -> float | None:
    if text == "-":
        return None
    try:
        return float(text)
    except ValueError:
        raise CorpusError("speakers.tsv line %d: bad %s value %r" % (line_no, what, text)) from None


def read_speakers_tsv(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise CorpusError("missing metadata file: %s" % path)
    speakers = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise CorpusError("speakers.tsv line %d: expected 6 tab-separated fields, got %d"
                              % (line_no, len(parts)))
        sid, group, gender, ster_s, stretch_s, tilt_s = parts
        ster = _parse_optional_float(ster_s, "ster", line_no)
        stretch = _parse_optional_float(stretch_s, "stretch", line_no)
        tilt = _parse_optional_float(tilt_s, "tilt", line_no)
        if (stretch is None) != (tilt is None):
            raise CorpusError("speakers.tsv line %d: stretch and tilt must both be "
                              "present or both be '-'" % line_no)
        synth = None
        if stretch is not None:
            synth = {"stretch": stretch, "tilt_db_per_octave": tilt}
        speakers.append(SpeakerProfile(speaker_id=sid, group=group, gender=gender,
                                       ster=ster, synth_params=synth))
    return speakers


def read_lexicon(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CorpusError("missing metadata file: %s" % path)
    lexicon = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise CorpusError("lexicon.txt line %d: expected 'WORD phonemes...'" % line_no)
        lexicon[parts[0]] = tuple(parts[1:])
    return lexicon


def read_splits_tsv(path) -> dict:
    splits = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise CorpusError("splits.tsv line %d: expected 'utt_id<TAB>train|test'" % line_no)
        splits[parts[0]] = parts[1]
    return splits


def write_splits_tsv(index: CorpusIndex, path) -> None:
    lines = ["%s\t%s" % (u.utt_id, u.split) for u in index.utterances]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_speakers_tsv(speakers, path) -> None:
    def fmt(v):
        return "-" if v is None else ("%g" % v)

    lines = []
    for s in speakers:
        sp = s.synth_params or {}
        lines.append("\t".join([s.speaker_id, s.group, s.gender, fmt(s.ster),
                                fmt(sp.get("stretch")), fmt(sp.get("tilt_db_per_octave"))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_lexicon(lexicon: dict, path) -> None:
    lines = ["%s %s" % (w, " ".join(ph)) for w, ph in sorted(lexicon.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(root) -> CorpusIndex:
    """Load and fully validate a corpus directory.

    Missing metadata files are fatal; a wav with the wrong sample rate or
    channel layout is reported per file; a word missing from the lexicon
    is reported per utterance.  An empty or missing audio tree yields an
    index with zero utterances.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError("corpus root does not exist: %s" % root)
    speakers = read_speakers_tsv(root / "speakers.tsv")
    lexicon = read_lexicon(root / "lexicon.txt")
    speaker_ids = {s.speaker_id for s in speakers}

    splits = {}
    if (root / "splits.tsv").is_file():
        splits = read_splits_tsv(root / "splits.tsv")

    utterances = []
    audio_root = root / "audio"
    if audio_root.is_dir():
        for spk_dir in sorted(audio_root.iterdir()):
            if not spk_dir.is_dir():
                continue
            if spk_dir.name not in speaker_ids:
                raise CorpusError("audio directory %s has no entry in speakers.tsv" % spk_dir)
            for wav_path in sorted(spk_dir.glob("*.wav")):
                utt_id = wav_path.stem
                prefix = spk_dir.name + "_"
                if not utt_id.startswith(prefix):
                    raise CorpusError("bad wav name %s: expected %s<word_id>.wav"
                                      % (wav_path, prefix))
                word_id = utt_id[len(prefix):]
                if word_id not in lexicon:
                    raise CorpusError("utterance %s: word %s absent from lexicon"
                                      % (utt_id, word_id))
                rate, channels, width, n_frames = _wav_header(wav_path)
                if rate != SAMPLE_RATE:
                    raise CorpusError("%s: sample rate %d Hz, expected %d Hz"
                                      % (wav_path, rate, SAMPLE_RATE))
                if channels != 1 or width != 2:
                    raise CorpusError("%s: expected 16-bit PCM mono" % wav_path)
                duration = n_frames / rate
                if n_frames == 0 or not MIN_DURATION <= duration <= MAX_DURATION:
                    raise CorpusError("utterance %s: duration %.3f s outside [%.2f, %.1f] s"
                                      % (utt_id, duration, MIN_DURATION, MAX_DURATION))
                utterances.append(Utterance(
                    utt_id=utt_id, speaker_id=spk_dir.name, word_id=word_id,
                    path=wav_path, n_samples=n_frames, sample_rate=rate,
                    phonemes=lexicon[word_id], split=splits.get(utt_id, "train")))

    unknown = set(splits) - {u.utt_id for u in utterances}
    if unknown:
        raise CorpusError("splits.tsv names unknown utterance(s): %s"
                          % ", ".join(sorted(unknown)[:5]))
    return CorpusIndex(speakers=speakers, utterances=utterances, lexicon=lexicon, root=root)


def split_train_test(index: CorpusIndex, train_count: int, test_count: int) -> CorpusIndex:
    """Assign train/test splits by word, parallel across speakers.

    The word list common to all speakers is sorted; the first
    ``train_count`` words become the train split and the next
    ``test_count`` the test split.  The returned index contains only
    utterances of the selected words, so the same inputs always produce
    the same split.
    """
    if train_count < 0 or test_count < 0:
        raise CorpusError("split counts must be nonnegative")
    needed = train_count + test_count
    speaker_ids = sorted({u.speaker_id for u in index.utterances})
    if not speaker_ids and needed > 0:
        raise CorpusError("corpus has no utterances to split")
    common = None
    for sid in speaker_ids:
        words = set(index.words_for(sid))
        if len(words) < needed:
            raise CorpusError("speaker %s has %d words, needs %d for a %d/%d split"
                              % (sid, len(words), needed, train_count, test_count))
        common = words if common is None else (common & words)
    common = sorted(common or [])
    if len(common) < needed:
        deficient = min(speaker_ids, key=lambda s: len(set(index.words_for(s)) & set(common)))
        raise CorpusError("only %d words are shared by all speakers (need %d); "
                          "check speaker %s" % (len(common), needed, deficient))
    train_words = set(common[:train_count])
    test_words = set(common[train_count:needed])
    out = []
    for u in index.utterances:
        if u.word_id in train_words:
            out.append(replace(u, split="train"))
        elif u.word_id in test_words:
            out.append(replace(u, split="test"))
    return CorpusIndex(speakers=index.speakers.values(), utterances=out,
                       lexicon=index.lexicon, root=index.root)


def parallel_pairs(index: CorpusIndex, sources, target: str, split: str):
    """(source utterance, target utterance) pairs sharing a word id.

    One pair per source utterance whose word the target also has in the
    given split, ordered by (word_id, source speaker_id).
    """
    sources = sorted(set(sources))
    if not sources:
        raise CorpusError("sources must be nonempty")
    if target in sources:
        raise CorpusError("sources must not contain the target speaker %s" % target)
    if target not in index.speakers:
        raise CorpusError("unknown target speaker %s" % target)
    for sid in sources:
        if sid not in index.speakers:
            raise CorpusError("unknown source speaker %s" % sid)
    target_by_word = {u.word_id: u for u in index.utterances_for(target, split)}
    pairs = []
    for word_id in sorted(target_by_word):
        for sid in sources:
            for u in index.utterances_for(sid, split):
                if u.word_id == word_id:
                    pairs.append((u, target_by_word[word_id]))
    pairs.sort(key=lambda p: (p[0].word_id, p[0].speaker_id, p[0].utt_id))
    if not pairs:
        logger.warning("no shared word ids between sources %s and target %s (split=%s)",
                       sources, target, split)
    return pairs


# ---------------------------------------------------------------------------
# synthetic corpus generation
# ---------------------------------------------------------------------------

_VOWEL_FORMANTS = {
    "aa": (730, 1090), "ee": (530, 1840), "ii": (270, 2290), "oo": (570, 840),
    "uu": (300, 870), "ay": (660, 1720), "oy": (450, 1030), "aw": (640, 1190),
    "eh": (550, 1770), "ih": (390, 1990), "uh": (440, 1020), "er": (490, 1350),
}
_CONSONANT_BANDS = {
    "t": (2500, 6000), "k": (1200, 3500), "p": (400, 1500), "s": (3500, 7200),
    "m": (150, 500), "n": (250, 700), "r": (500, 1500), "l": (700, 1800),
}

_BASE_GAP = 0.05          # inter-syllable silence in the template, seconds
_EXTRA_PAUSE = 0.03       # inserted pause per gap, scaled by (stretch - 1)
_BURST_DURATION = 0.03
_LEAD_SILENCE = 0.03      # surrounding silence, scaled by stretch; the longer
_TAIL_SILENCE = 0.08      # tail makes the end of a word acoustically unambiguous


@dataclass(frozen=True)
class WordTemplate:
    word_id: str
    syllables: tuple          # of (consonant, vowel, vowel_duration)
    phonemes: tuple

    @property
    def duration(self) -> float:
        """Template duration at stretch 1.0, before any inserted pauses."""
        d = sum(_BURST_DURATION + dur for _, _, dur in self.syllables)
        return d + _BASE_GAP * (len(self.syllables) - 1) + _LEAD_SILENCE + _TAIL_SILENCE


@dataclass(frozen=True)
class Voice:
    speaker_id: str
    gender: str
    group: str
    f0: float
    stretch: float
    tilt_db_per_octave: float
    tremor_depth: float
    tremor_rate: float


def word_templates(seed: int, n_words: int) -> list:
    """Deterministic word templates shared by every synthetic speaker.

    Syllables are drawn without replacement within a word, so no word
    contains the same consonant-vowel pair twice.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n_combos = len(CONSONANTS) * len(VOWELS)
    templates = []
    for i in range(n_words):
        n_syl = 2 + i % 4
        combos = rng.permutation(n_combos)[:n_syl]
        syllables = []
        for combo in combos:
            cons = CONSONANTS[int(combo) // len(VOWELS)]
            vowel = VOWELS[int(combo) % len(VOWELS)]
            dur = float(rng.uniform(0.13, 0.26))
            syllables.append((cons, vowel, dur))
        phonemes = tuple(p for c, v, _ in syllables for p in (c, v))
        templates.append(WordTemplate(word_id="W%03d" % (i + 1),
                                      syllables=tuple(syllables), phonemes=phonemes))
    return templates


def synthetic_voices(n_normal: int, n_dysarthric: int) -> list:
    """Deterministic speaker parameter assignment for the generator."""
    tilt_cycle = (6.0, -6.0, 0.0, 3.0, -3.0)
    voices = []
    for i in range(n_normal):
        gender = "m" if i % 2 == 0 else "f"
        f0 = 105.0 + 11.0 * (i // 2) if gender == "m" else 195.0 + 13.0 * (i // 2)
        voices.append(Voice(speaker_id="N%02d" % (i + 1), gender=gender, group="normal",
                            f0=f0, stretch=1.0,
                            tilt_db_per_octave=tilt_cycle[i % len(tilt_cycle)],
                            tremor_depth=0.0, tremor_rate=0.0))
    for i in range(n_dysarthric):
        gender = "m" if i % 2 == 0 else "f"
        f0 = 118.0 + 9.0 * (i // 2) if gender == "m" else 205.0 + 9.0 * (i // 2)
        stretch = 1.25 + 0.25 * i
        voices.append(Voice(speaker_id="D%02d" % (i + 1), gender=gender, group="dysarthric",
                            f0=f0, stretch=stretch,
                            tilt_db_per_octave=-(1.0 + 0.5 * i),
                            tremor_depth=min(0.8, 0.9 * (stretch - 1.0)),
                            tremor_rate=4.0 + 0.7 * i))
    return voices


def pseudo_ster(stretch: float, tilt_db_per_octave: float) -> float:
    """Monotone severity proxy for synthetic speakers, in [0, 100]."""
    return round(min(100.0, 60.0 * (stretch - 1.0) + 20.0 * abs(tilt_db_per_octave) / 6.0), 1)


def _band_noise(n: int, sr: int, lo: float, hi: float, rng) -> np.ndarray:
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    y = np.fft.irfft(spec, n=n)
    peak = np.max(np.abs(y))
    return y / peak if peak > 0 else y


def _ramp(n_ramp: int, n_total: int) -> np.ndarray:
    env = np.ones(n_total)
    n_ramp = min(n_ramp, n_total // 2)
    if n_ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_ramp) / n_ramp)
        env[:n_ramp] = r
        env[-n_ramp:] = r[::-1]
    return env


def _vowel_tone(f0: float, formants: tuple, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    out = np.zeros(n)
    h = 1
    while h * f0 < 7400.0:
        fh = h * f0
        amp = 0.03 / h
        for fc in formants:
            amp += np.exp(-0.5 * ((fh - fc) / (0.18 * fc + 60.0)) ** 2)
        out += amp * np.sin(2.0 * np.pi * fh * t)
        h += 1
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def render_word(template: WordTemplate, voice: Voice, rng,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Render one word for one synthetic voice; deterministic given rng state."""
    sr = sample_rate
    s = voice.stretch
    pieces = [np.zeros(int(round(_LEAD_SILENCE * s * sr)))]
    for k, (cons, vowel, dur) in enumerate(template.syllables):
        n_burst = int(round(_BURST_DURATION * s * sr))
        lo, hi = _CONSONANT_BANDS[cons]
        burst = 0.45 * _band_noise(n_burst, sr, lo, hi, rng) * _ramp(int(0.005 * sr), n_burst)
        n_vowel = int(round(dur * s * sr))
        tone = _vowel_tone(voice.f0, _VOWEL_FORMANTS[vowel], n_vowel, sr)
        tone = tone * _ramp(int(0.012 * sr), n_vowel)
        pieces.append(burst)
        pieces.append(tone)
        if k < len(template.syllables) - 1:
            gap = _BASE_GAP * s
            if voice.group == "dysarthric":
                gap += _EXTRA_PAUSE * (s - 1.0)
            pieces.append(np.zeros(int(round(gap * sr))))
    pieces.append(np.zeros(int(round(_TAIL_SILENCE * s * sr))))
    x = np.concatenate(pieces)
    if voice.tremor_depth > 0:
        t = np.arange(len(x)) / sr
        phase = rng.uniform(0, 2 * np.pi)
        x = x * (1.0 + voice.tremor_depth * np.sin(2 * np.pi * voice.tremor_rate * t + phase))
    if voice.tilt_db_per_octave != 0.0:
        spec = np.fft.rfft(x)
        freqs = np.maximum(np.fft.rfftfreq(len(x), 1.0 / sr), 30.0)
        gain = 10.0 ** (voice.tilt_db_per_octave * np.log2(freqs / 1000.0) / 20.0)
        x = np.fft.irfft(spec * gain, n=len(x))
    peak = np.max(np.abs(x))
    return x * (0.7 / peak) if peak > 0 else x


def generate_synthetic_corpus(seed: int, n_normal: int, n_dysarthric: int,
                              words_per_speaker: int, out,
                              train_fraction: float = 0.7) -> CorpusIndex:
    """Write a complete synthetic corpus and return it loaded and validated.

    Every speaker utters every word.  Dysarthric speakers get pseudo-STER
    values that increase monotonically with their stretch.  The output is
    bit-identical for a fixed seed.
    """
    if n_normal < 1 or n_dysarthric < 0 or words_per_speaker < 1:
        raise CorpusError("speaker and word counts must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    templates = word_templates(seed, words_per_speaker)
    voices = synthetic_voices(n_normal, n_dysarthric)

    speakers = []
    for v in voices:
        ster = pseudo_ster(v.stretch, v.tilt_db_per_octave) if v.group == "dysarthric" else None
        speakers.append(SpeakerProfile(
            speaker_id=v.speaker_id, group=v.group, gender=v.gender, ster=ster,
            synth_params={"stretch": v.stretch, "tilt_db_per_octave": v.tilt_db_per_octave}))
    write_speakers_tsv(speakers, out / "speakers.tsv")
    write_lexicon({t.word_id: t.phonemes for t in templates}, out / "lexicon.txt")

    for si, v in enumerate(voices):
        spk_dir = out / "audio" / v.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        for wi, template in enumerate(templates):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 2, si, wi]))
            samples = render_word(template, v, rng)
            write_wav(spk_dir / ("%s_%s.wav" % (v.speaker_id, template.word_id)), samples)

    n_train = max(1, round(train_fraction * words_per_speaker))
    n_train = min(n_train, words_per_speaker)
    n_test = words_per_speaker - n_train
    index = load_corpus(out)
    index = split_train_test(index, n_train, n_test)
    write_splits_tsv(index, out / "splits.tsv")
    return load_corpus(out)
