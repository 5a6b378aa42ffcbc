"""Deterministic signal kernels shared by the converters and the metrics.

Everything in this module is a pure function of its inputs: log-mel
analysis, per-speaker feature normalization, dynamic time warping,
and iterative phase-reconstruction synthesis.  The analysis parameters
are fixed package-wide so that models and metrics always operate in the
same feature space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 256
N_BANDS = 80
FMIN = 80.0
FMAX = 7600.0
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


class DspError(ValueError):
    """Raised for malformed signal/feature inputs."""


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel energies, shape (frames, bands), natural log, floored at 1e-10.

    Frame count follows ``T = 1 + (len(samples) - n_fft) // hop`` with no
    center padding, so frame t covers samples ``[t*hop, t*hop + n_fft)``.
    """

    frames: np.ndarray
    n_fft: int = N_FFT
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bands(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(frames=frames, n_fft=self.n_fft, hop=self.hop,
                              sample_rate=self.sample_rate)


@dataclass(frozen=True)
class FeatureStats:
    """Per-band mean/std of one speaker's training frames (std floored)."""

    speaker_id: str
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise DspError("mean/std shape mismatch for %s" % self.speaker_id)


@dataclass(frozen=True)
class WarpPath:
    """Monotone (i, j) index pairs from (0,0) to (Tx-1, Ty-1) plus total cost."""

    pairs: tuple
    cost: float


def hann_window(n: int) -> np.ndarray:
    # periodic Hann: satisfies constant-overlap-add at hop = n/4
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_band_centers(n_bands: int = N_BANDS, fmin: float = FMIN,
                     fmax: float = FMAX) -> np.ndarray:
    """Center frequency in Hz of each triangular mel band."""
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    return pts[1:-1]


def mel_filterbank(n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   n_bands: int = N_BANDS, fmin: float = FMIN,
                   fmax: float = FMAX) -> np.ndarray:
    """Triangular mel filterbank, shape (n_bands, n_fft // 2 + 1), peak 1."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * (sample_rate / n_fft)
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    fb = np.zeros((n_bands, n_bins))
    for b in range(n_bands):
        left, center, right = pts[b], pts[b + 1], pts[b + 2]
        rising = (freqs - left) / (center - left)
        falling = (right - freqs) / (right - center)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return fb


_FB_CACHE: dict = {}


def _filterbank_cached(n_fft: int, sample_rate: int, n_bands: int) -> np.ndarray:
    key = (n_fft, sample_rate, n_bands)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_fft, sample_rate, n_bands)
    return _FB_CACHE[key]


def _frame(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - n_fft) // hop
    idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
    return x[idx]


def melspec(samples: np.ndarray, sample_rate: int = SAMPLE_RATE,
            n_bands: int = N_BANDS) -> MelSpectrogram:
    """Log-mel analysis: Hann window, 1024-point FFT, hop 256, 80 bands.

    Magnitude spectra are mapped through the mel filterbank, floored at
    1e-10 and natural-log compressed.
    """
    if sample_rate != SAMPLE_RATE:
        raise DspError("expected %d Hz input, got %d Hz" % (SAMPLE_RATE, sample_rate))
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise DspError("expected mono signal, got shape %r" % (x.shape,))
    if len(x) < N_FFT:
        raise DspError("signal shorter than one analysis window "
                       "(%d < %d samples)" % (len(x), N_FFT))
    frames = _frame(x, N_FFT, HOP) * hann_window(N_FFT)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    mel = mag @ _filterbank_cached(N_FFT, sample_rate, n_bands).T
    return MelSpectrogram(frames=np.log(np.maximum(mel, LOG_FLOOR)))


def speaker_stats(index, speaker_id: str) -> FeatureStats:
    """Per-band mean/std over all of a speaker's train-split frames.

    Population statistics (ddof=0); std is floored at 1e-8.
    """
    utts = [u for u in index.utterances
            if u.speaker_id == speaker_id and u.split == "train"]
    if not utts:
        raise DspError("speaker %s has no train utterances" % speaker_id)
    frames = np.concatenate([melspec(u.samples, u.sample_rate).frames for u in utts])
    return FeatureStats(speaker_id=speaker_id,
                        mean=frames.mean(axis=0),
                        std=np.maximum(frames.std(axis=0), STD_FLOOR))


def normalize(m: MelSpectrogram, stats: FeatureStats) -> MelSpectrogram:
    """Per-band (x - mean) / std."""
    if m.n_bands != stats.mean.shape[0]:
        raise DspError("band count mismatch: %d vs %d" % (m.n_bands, stats.mean.shape[0]))
    return m.with_frames((m.frames - stats.mean) / stats.std)


def denormalize(m: MelSpectrogram, stats: FeatureStats) -> MelSpectrogram:
    """Inverse of :func:`normalize`."""
    if m.n_bands != stats.mean.shape[0]:
        raise DspError("band count mismatch: %d vs %d" % (m.n_bands, stats.mean.shape[0]))
    return m.with_frames(m.frames * stats.std + stats.mean)


def _as_frames(x) -> np.ndarray:
    if isinstance(x, MelSpectrogram):
        return x.frames
    return np.asarray(x, dtype=np.float64)


def dtw(x, y) -> WarpPath:
    """Globally optimal monotone alignment under Euclidean frame distance.

    Steps are (1,0), (0,1) and (1,1); the accumulated cost sums the frame
    distance of every visited cell.  Backtrace ties are broken preferring
    the diagonal step, then (1,0), then (0,1), which makes the returned
    path deterministic.
    """
    X, Y = _as_frames(x), _as_frames(y)
    if X.size == 0 or Y.size == 0:
        raise DspError("dtw inputs must be nonempty")
    if X.shape[1] != Y.shape[1]:
        raise DspError("band count mismatch: %d vs %d" % (X.shape[1], Y.shape[1]))
    tx, ty = X.shape[0], Y.shape[0]
    # exact difference form (chunked): identical frames get distance 0 exactly
    dist = np.empty((tx, ty))
    chunk = max(1, 2_000_000 // (ty * X.shape[1] + 1))
    for start in range(0, tx, chunk):
        stop = min(start + chunk, tx)
        diff = X[start:stop, None, :] - Y[None, :, :]
        dist[start:stop] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    acc = np.empty((tx, ty))
    # step codes: 1 = diagonal, 0 = (1,0) from (i-1,j), 2 = (0,1) from (i,j-1)
    step = np.empty((tx, ty), dtype=np.int8)
    acc[0, 0] = dist[0, 0]
    step[0, 0] = 1
    for i in range(1, tx):
        acc[i, 0] = acc[i - 1, 0] + dist[i, 0]
        step[i, 0] = 0
    for j in range(1, ty):
        acc[0, j] = acc[0, j - 1] + dist[0, j]
        step[0, j] = 2
    acc_l = acc.tolist()
    dist_l = dist.tolist()
    step_l = step.tolist()
    for i in range(1, tx):
        prev, cur = acc_l[i - 1], acc_l[i]
        di, si = dist_l[i], step_l[i]
        for j in range(1, ty):
            best = prev[j - 1]
            code = 1
            v = prev[j]
            if v < best:
                best, code = v, 0
            h = cur[j - 1]
            if h < best:
                best, code = h, 2
            cur[j] = best + di[j]
            si[j] = code
    i, j = tx - 1, ty - 1
    pairs = [(i, j)]
    while i > 0 or j > 0:
        code = step_l[i][j]
        if code == 1:
            i, j = i - 1, j - 1
        elif code == 0:
            i -= 1
        else:
            j -= 1
        pairs.append((i, j))
    pairs.reverse()
    return WarpPath(pairs=tuple(pairs), cost=float(acc_l[tx - 1][ty - 1]))


def align_to(x, ref) -> MelSpectrogram:
    """Resample ``x`` onto ``ref``'s time axis through the DTW warp path.

    Each output frame j is the mean of the x-frames the path pairs with
    ref frame j, so the result always has exactly ref's frame count.
    """
    X = _as_frames(x)
    R = _as_frames(ref)
    path = dtw(X, R)
    out = np.zeros_like(R)
    counts = np.zeros(R.shape[0])
    for i, j in path.pairs:
        out[j] += X[i]
        counts[j] += 1
    out /= counts[:, None]
    if isinstance(ref, MelSpectrogram):
        return ref.with_frames(out)
    return MelSpectrogram(frames=out)


def _stft(x: np.ndarray, n_fft: int, hop: int, window: np.ndarray) -> np.ndarray:
    return np.fft.rfft(_frame(x, n_fft, hop) * window, axis=1).T


def _istft(spec: np.ndarray, n_fft: int, hop: int, window: np.ndarray) -> np.ndarray:
    # least-squares inverse: windowed overlap-add normalized by the
    # accumulated squared window
    n_frames = spec.shape[1]
    out_len = (n_frames - 1) * hop + n_fft
    x = np.zeros(out_len)
    wsum = np.zeros(out_len)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1)
    w2 = window * window
    for t in range(n_frames):
        start = t * hop
        x[start:start + n_fft] += frames[t] * window
        wsum[start:start + n_fft] += w2
    return x / np.maximum(wsum, 1e-12)


def mel_to_linear(mel_mag: np.ndarray, n_fft: int = N_FFT,
                  sample_rate: int = SAMPLE_RATE, iterations: int = 50) -> np.ndarray:
    """Nonnegative pseudo-inverse of the mel filterbank.

    Solves ``min ||W s - m||^2, s >= 0`` per frame with multiplicative
    updates (fixed iteration count, deterministic).  ``mel_mag`` is
    (bands, frames); returns (bins, frames).
    """
    fb = _filterbank_cached(n_fft, sample_rate, mel_mag.shape[0])
    s = fb.T @ mel_mag
    wtw = fb.T @ fb
    wtm = fb.T @ mel_mag
    for _ in range(iterations):
        s = s * wtm / np.maximum(wtw @ s, 1e-12)
    return np.maximum(s, 0.0)


def griffin_lim(m: MelSpectrogram, iterations: int = 60,
                return_trace: bool = False):
    """Waveform from a log-mel via iterative phase reconstruction.

    The mel spectrogram is lifted back to a linear magnitude spectrogram
    (nonnegative pseudo-inverse) and the phase is estimated by alternating
    STFT/ISTFT projections starting from zero phase.  The output has
    length ``(T - 1) * hop + n_fft`` and is peak-normalized to 0.95.

    With ``return_trace=True`` also returns the per-iteration spectral
    convergence error, which is nonincreasing.
    """
    if iterations < 1:
        raise DspError("iterations must be >= 1")
    window = hann_window(m.n_fft)
    mag = mel_to_linear(np.exp(m.frames).T, m.n_fft, m.sample_rate)
    mag_norm = np.linalg.norm(mag)
    phase = np.zeros_like(mag)
    trace = []
    for _ in range(iterations):
        x = _istft(mag * np.exp(1j * phase), m.n_fft, m.hop, window)
        spec = _stft(x, m.n_fft, m.hop, window)
        phase = np.angle(spec)
        trace.append(float(np.linalg.norm(np.abs(spec) - mag) / max(mag_norm, 1e-12)))
    x = _istft(mag * np.exp(1j * phase), m.n_fft, m.hop, window)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (0.95 / peak)
    if return_trace:
        return x, trace
    return x


def spectral_tilt(m: MelSpectrogram, fmin: float = 200.0,
                  fmax: float = 6000.0) -> float:
    """Broadband spectral slope in dB/octave of the time-averaged spectrum.

    Least-squares slope of band level (dB) against log2 of the band center
    frequency, restricted to [fmin, fmax].  Used by the synthetic-corpus
    probes to check that conversion moves speaker tilt the right way.
    """
    centers = mel_band_centers(m.n_bands)
    sel = (centers >= fmin) & (centers <= fmax)
    level_db = (20.0 / np.log(10.0)) * m.frames.mean(axis=0)[sel]
    octaves = np.log2(centers[sel])
    slope = np.polyfit(octaves, level_db, 1)[0]
    return float(slope)
