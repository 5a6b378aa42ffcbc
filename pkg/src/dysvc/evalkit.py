"""Objective evaluation and statistical analysis.

Implements the pathological intelligibility scores (correlation of a
time-aligned test utterance against a reference formed from healthy
speakers), phoneme error rate from supplied hypothesis transcripts,
speaker-level aggregation with Pearson correlation against severity
(STER), and exact binomial / Wilcoxon signed-rank significance tests.

Both intelligibility scores operate on log-mel bands after DTW
alignment onto the reference time base:

* P-STOI: Pearson correlation between test and reference temporal
  envelopes, per band and per 30-frame segment (hop 15, trailing
  partial of at least 10 frames kept), averaged over all of them.
* P-ESTOI: within each segment, rows (bands) are mean/norm normalized,
  then columns (frames); the score is the average frame-wise inner
  product, averaged over segments.

Zero-variance envelopes contribute a correlation of 0 rather than a
numerical fault.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import MelSpectrogram, align_to, dtw, melspec

logger = logging.getLogger(__name__)

SEGMENT_FRAMES = 30
SEGMENT_HOP = 15
MIN_SEGMENT_FRAMES = 10
EPS = 1e-12


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceModel:
    """Aggregated reference mel for one (word, gender) cell."""

    gender: str
    word_id: str
    ref_mel: MelSpectrogram
    medoid_utt_id: str = ""
    n_sources: int = 0


def build_reference(index, word_id: str, gender: str) -> ReferenceModel:
    """Reference from the normal speakers of one gender for one word.

    The medoid utterance (minimum summed DTW cost to the others, ties by
    utterance id) provides the time base; every other candidate is
    aligned onto it and the log-mels are averaged.
    """
    cands = [u for u in index.utterances
             if u.word_id == word_id
             and index.speakers[u.speaker_id].group == "normal"
             and index.speakers[u.speaker_id].gender == gender]
    cands.sort(key=lambda u: u.utt_id)
    if len(cands) < 2:
        raise EvalError("need >= 2 normal %s-gender utterances of word %s, found %d"
                        % (gender, word_id, len(cands)))
    mels = [melspec(u.samples, u.sample_rate) for u in cands]
    n = len(cands)
    costs = np.zeros(n)
    for i in range(n):
        for j in range(i + 1, n):
            c = dtw(mels[i], mels[j]).cost
            costs[i] += c
            costs[j] += c
    medoid = int(np.argmin(costs))
    base = mels[medoid]
    acc = base.frames.copy()
    for i, m in enumerate(mels):
        if i != medoid:
            acc += align_to(m, base).frames
    return ReferenceModel(gender=gender, word_id=word_id,
                          ref_mel=base.with_frames(acc / n),
                          medoid_utt_id=cands[medoid].utt_id, n_sources=n)


def _ref_frames(ref) -> np.ndarray:
    if isinstance(ref, ReferenceModel):
        return ref.ref_mel.frames
    if isinstance(ref, MelSpectrogram):
        return ref.frames
    return np.asarray(ref, dtype=np.float64)


def _segments(t: int):
    """Segment (start, stop) list: full 30-frame windows every 15 frames,
    plus one trailing partial of >= 10 frames when it covers new ground."""
    if t < MIN_SEGMENT_FRAMES:
        raise EvalError("reference shorter than %d frames (%d)" % (MIN_SEGMENT_FRAMES, t))
    segs = []
    start = 0
    while start + SEGMENT_FRAMES <= t:
        segs.append((start, start + SEGMENT_FRAMES))
        start += SEGMENT_HOP
    if segs:
        tail_start = segs[-1][0] + SEGMENT_HOP
        covered_to = segs[-1][1]
    else:
        tail_start, covered_to = 0, 0
    if t > covered_to and t - tail_start >= MIN_SEGMENT_FRAMES:
        segs.append((tail_start, t))
    if not segs:
        segs.append((0, t))
    return segs


def _pearson_or_zero(a: np.ndarray, b: np.ndarray) -> float:
    am = a - a.mean()
    bm = b - b.mean()
    na = np.sqrt((am * am).sum())
    nb = np.sqrt((bm * bm).sum())
    if na < EPS or nb < EPS:
        return 0.0
    return float((am * bm).sum() / (na * nb))


def p_stoi(test_mel, ref) -> float:
    """Envelope-correlation intelligibility score in [-1, 1].

    Reports clip it to [0, 1]; the raw value is returned here.
    """
    ref_frames = _ref_frames(ref)
    test = align_to(test_mel, ref_frames if not isinstance(ref, ReferenceModel)
                    else ref.ref_mel).frames
    if test.shape[1] != ref_frames.shape[1]:
        raise EvalError("band count mismatch")
    segs = _segments(ref_frames.shape[0])
    vals = []
    for start, stop in segs:
        for b in range(ref_frames.shape[1]):
            vals.append(_pearson_or_zero(test[start:stop, b], ref_frames[start:stop, b]))
    return float(np.mean(vals))


def _row_col_normalize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > EPS)
    x = x - x.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(x, axis=0, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > EPS)


def p_estoi(test_mel, ref) -> float:
    """Normalized-correlation intelligibility score.

    Within each segment the (bands x frames) block is band-normalized
    then frame-normalized, and corresponding frames are compared by
    inner product.
    """
    ref_frames = _ref_frames(ref)
    test = align_to(test_mel, ref_frames if not isinstance(ref, ReferenceModel)
                    else ref.ref_mel).frames
    if test.shape[1] != ref_frames.shape[1]:
        raise EvalError("band count mismatch")
    segs = _segments(ref_frames.shape[0])
    vals = []
    for start, stop in segs:
        x = _row_col_normalize(test[start:stop].T)    # (bands, frames)
        y = _row_col_normalize(ref_frames[start:stop].T)
        vals.append(float((x * y).sum(axis=0).mean()))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# phoneme error rate
# ---------------------------------------------------------------------------

def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two symbol sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, sa in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, sb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (sa != sb))
        prev = cur
    return prev[len(b)]


def per(reference, hypothesis) -> float:
    """Phoneme error rate in percent: 100 * (S + D + I) / N.

    N is the reference length; heavy insertion can push the rate past
    100.
    """
    reference = list(reference)
    if not reference:
        raise EvalError("reference phoneme sequence is empty")
    return 100.0 * levenshtein(reference, list(hypothesis)) / len(reference)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def pearson_r(x, y) -> float:
    """Sample Pearson correlation of two equally long sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise EvalError("inputs must be equally long 1-D sequences")
    if len(x) < 3:
        raise EvalError("need at least 3 points, got %d" % len(x))
    xm = x - x.mean()
    ym = y - y.mean()
    vx = (xm * xm).sum()
    vy = (ym * ym).sum()
    if vx < EPS or vy < EPS:
        raise EvalError("zero variance input")
    return float((xm * ym).sum() / math.sqrt(vx * vy))


def _binom_logpmf(k: int, n: int, p: float) -> float:
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(p) + (n - k) * math.log1p(-p))


def binomial_test(k: int, n: int, p0: float = 0.5, sided: str = "greater") -> float:
    """Exact binomial p-value by direct tail summation (no approximation).

    ``sided`` is "greater" (P[K >= k]), "less" (P[K <= k]) or
    "two-sided" (sum of all outcomes no more probable than k).
    """
    if not (isinstance(k, (int, np.integer)) and isinstance(n, (int, np.integer))):
        raise EvalError("k and n must be integers")
    if not 0 <= k <= n or n < 1:
        raise EvalError("need 0 <= k <= n, got k=%s n=%s" % (k, n))
    if not 0.0 < p0 < 1.0:
        raise EvalError("p0 must be in (0, 1)")
    pmf = [math.exp(_binom_logpmf(i, n, p0)) for i in range(n + 1)]
    if sided == "greater":
        p = math.fsum(pmf[k:])
    elif sided == "less":
        p = math.fsum(pmf[:k + 1])
    elif sided == "two-sided":
        cutoff = pmf[k] * (1.0 + 1e-7)
        p = math.fsum(q for q in pmf if q <= cutoff)
    else:
        raise EvalError("sided must be greater, less or two-sided")
    return min(1.0, p)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b) -> tuple:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped and tied absolute differences get
    average ranks.  The statistic is min(W+, W-).  The p-value is exact
    (enumeration of all sign patterns) for up to 12 effective pairs and
    a tie-corrected normal approximation beyond that.  All-zero
    differences give (0.0, 1.0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError("inputs must be equally long 1-D sequences")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 0.0, 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    total = ranks.sum()
    if n <= 12:
        count = 0
        for signs in itertools.product((0, 1), repeat=n):
            w = float(sum(r for r, s in zip(ranks, signs) if s))
            if w <= stat + 1e-12 or w >= total - stat - 1e-12:
                count += 1
        p = count / 2.0 ** n
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
        if var <= 0:
            return stat, 1.0
        z = (mu - stat) / math.sqrt(var)
        p = math.erfc(z / math.sqrt(2.0))
    return stat, min(1.0, p)


def significance_stars(p: float) -> str:
    """Report marker: *** below 0.001, * below 0.05, empty otherwise."""
    if p < 0.001:
        return "***"
    if p < 0.05:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# transcript and severity-table files
# ---------------------------------------------------------------------------

def read_hypotheses(path) -> dict:
    """Hypothesis transcripts: lines of 'utt_id<TAB>phoneme phoneme ...'."""
    out = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt_id, _, rest = line.partition("\t")
        if not utt_id or not rest.strip():
            raise EvalError("%s line %d: expected 'utt_id<TAB>phonemes'" % (path, line_no))
        out[utt_id] = tuple(rest.split())
    return out


def write_hypotheses(hyps: dict, path) -> None:
    lines = ["%s\t%s" % (utt_id, " ".join(ph)) for utt_id, ph in sorted(hyps.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ster_table(path) -> dict:
    """Severity table: lines of 'speaker_id<TAB>ster'."""
    out = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise EvalError("%s line %d: expected 'speaker_id<TAB>ster'" % (path, line_no))
        out[parts[0]] = float(parts[1])
    return out


# ---------------------------------------------------------------------------
# template-matching toy recognizer
# ---------------------------------------------------------------------------

class TemplateRecognizer:
    """Nearest-exemplar phoneme recognizer for synthetic-corpus tests.

    Transcribes a mel by finding the training exemplar with the lowest
    length-normalized DTW cost and emitting that exemplar's phonemes.
    Stands in for a real phoneme recognizer, which is out of scope.
    """

    def __init__(self, exemplars):
        # exemplars: list of (utt_id, mel frames, phonemes), order fixed
        self.exemplars = sorted(exemplars, key=lambda e: e[0])
        if not self.exemplars:
            raise EvalError("recognizer needs at least one exemplar")

    @classmethod
    def from_index(cls, index, speakers=None, split: str = "train") -> "TemplateRecognizer":
        exemplars = []
        for u in index.utterances:
            if u.split != split:
                continue
            if speakers is not None and u.speaker_id not in speakers:
                continue
            exemplars.append((u.utt_id, melspec(u.samples, u.sample_rate).frames,
                              tuple(u.phonemes)))
        return cls(exemplars)

    def transcribe(self, mel) -> tuple:
        frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
        best = None
        best_cost = math.inf
        for utt_id, ex_frames, phonemes in self.exemplars:
            cost = dtw(frames, ex_frames).cost / (len(frames) + len(ex_frames))
            if cost < best_cost:
                best_cost = cost
                best = phonemes
        return best


# ---------------------------------------------------------------------------
# system evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvertedUtterance:
    """One converted item to score: mel plus its provenance."""

    utt_id: str
    stage: str                # "VTN" | "VTN-VAE"
    target_speaker: str       # dysarthric speaker the conversion aimed at
    word_id: str
    mel: MelSpectrogram


@dataclass
class EvalReport:
    """Per-utterance scores, per-speaker means, severity correlations."""

    utterance_scores: list = field(default_factory=list)
    speaker_means: dict = field(default_factory=dict)   # (stage, metric) -> {spk: val}
    correlations: dict = field(default_factory=dict)    # (stage, metric) -> signed r
    gt_correlations: dict = field(default_factory=dict)  # metric -> signed r
    ster: dict = field(default_factory=dict)            # speaker -> ster
    stages: tuple = ()
    speakers: tuple = ()

    def mean_for(self, stage: str, metric: str, speaker: str):
        return self.speaker_means.get((stage, metric), {}).get(speaker)


_METRICS = ("p_stoi", "p_estoi", "per")


def _speaker_mean(rows, stage, metric):
    out = {}
    by_spk: dict = {}
    for r in rows:
        if r["stage"] != stage or r[metric] is None:
            continue
        by_spk.setdefault(r["target_speaker"], []).append(r[metric])
    for spk, vals in by_spk.items():
        out[spk] = float(np.mean(vals))
    return out


def evaluate_system(converted, index, hypotheses=None, ster=None, *,
                    include_ground_truth: bool = True) -> EvalReport:
    """Score converted utterances and aggregate a severity report.

    ``converted`` is a sequence of :class:`ConvertedUtterance`.
    ``hypotheses`` maps stage tag to a transcript file path or dict (the
    ground-truth stage tag is "GT").  ``ster`` is a speaker->value
    mapping or a table path; when omitted it is pulled from the corpus
    profiles.  With ``include_ground_truth`` the real dysarthric test
    utterances are scored the same way to produce reference
    correlations.
    """
    if ster is None:
        ster = {sid: p.ster for sid, p in index.speakers.items() if p.ster is not None}
    elif isinstance(ster, (str, Path)):
        ster = read_ster_table(ster)
    hypotheses = hypotheses or {}
    hyp_by_stage = {}
    for stage, src in hypotheses.items():
        hyp_by_stage[stage] = src if isinstance(src, dict) else read_hypotheses(src)

    ref_cache: dict = {}

    def reference_for(word_id, gender):
        key = (word_id, gender)
        if key not in ref_cache:
            ref_cache[key] = build_reference(index, word_id, gender)
        return ref_cache[key]

    rows = []

    def score(utt_id, stage, target_speaker, word_id, mel):
        gender = index.speakers[target_speaker].gender
        ref = reference_for(word_id, gender)
        hyp = hyp_by_stage.get(stage, {}).get(utt_id)
        if stage in hyp_by_stage and hyp is None:
            logger.warning("no hypothesis transcript for %s (stage %s); PER omitted",
                           utt_id, stage)
        rows.append({
            "utt_id": utt_id, "stage": stage, "target_speaker": target_speaker,
            "word_id": word_id,
            "p_stoi": float(np.clip(p_stoi(mel, ref), 0.0, 1.0)),
            "p_estoi": float(np.clip(p_estoi(mel, ref), 0.0, 1.0)),
            "per": None if hyp is None else per(index.lexicon[word_id], hyp),
        })

    targets = sorted({c.target_speaker for c in converted})
    for c in sorted(converted, key=lambda c: (c.stage, c.utt_id)):
        score(c.utt_id, c.stage, c.target_speaker, c.word_id, c.mel)
    stages = tuple(sorted({c.stage for c in converted}))

    speakers = list(targets)
    if include_ground_truth:
        # score every dysarthric speaker with test data, so the ground-truth
        # severity correlation spans more speakers than one run's target
        gt_speakers = sorted(
            sid for sid, p in index.speakers.items()
            if p.group == "dysarthric" and index.utterances_for(sid, "test"))
        for spk in gt_speakers:
            for u in index.utterances_for(spk, "test"):
                score(u.utt_id, "GT", spk, u.word_id,
                      melspec(u.samples, u.sample_rate))
        speakers = sorted(set(speakers) | set(gt_speakers))

    report = EvalReport(utterance_scores=rows, stages=stages, speakers=tuple(speakers),
                        ster={s: ster[s] for s in speakers if s in ster})
    all_stages = stages + (("GT",) if include_ground_truth else ())
    for stage in all_stages:
        for metric in _METRICS:
            means = _speaker_mean(rows, stage, metric)
            report.speaker_means[(stage, metric)] = means
            spks = [s for s in report.speakers if s in means and s in report.ster]
            if len(spks) >= 3:
                try:
                    r = pearson_r([means[s] for s in spks],
                                  [report.ster[s] for s in spks])
                except EvalError as exc:
                    logger.warning("stage %s metric %s: correlation omitted (%s)",
                                   stage, metric, exc)
                    continue
                if stage == "GT":
                    report.gt_correlations[metric] = r
                else:
                    report.correlations[(stage, metric)] = r
            else:
                logger.warning("stage %s metric %s: %d speakers with scores and STER; "
                               "correlation omitted", stage, metric, len(spks))
    return report
