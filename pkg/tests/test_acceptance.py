"""Acceptance gate: one test per criterion, at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v`` for one pass/fail line
per criterion.  Criteria 7 and 8 share one trained pipeline (a
session-scoped run on the synthetic corpus with the stretch-1.5 target);
criterion 9 runs two tiny end-to-end pipelines and compares the reports
byte for byte.
"""

import itertools
import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from dysvc import corpus, dsp, evalkit as ek, framewise as fw, pipeline
from dysvc import seq2seq as s2s
from dysvc.checkpoint import ModelCheckpoint, stats_from_arrays

# ---------------------------------------------------------------------------
# criterion 1: correlation reproduction from published speaker-level rows
# ---------------------------------------------------------------------------

STER_ROW = [7.0, 7.0, 42.0, 38.0, 98.0, 92.6]
PUBLISHED_ROWS = {
    # row values, expected |r| (recomputed by direct Pearson formula), tolerance
    "P-STOI VTN": ([0.73, 0.75, 0.62, 0.60, 0.58, 0.45], 0.88, 0.01),
    "P-ESTOI VTN": ([0.37, 0.37, 0.20, 0.16, 0.09, 0.08], 0.93, 0.01),
    "P-STOI VTN-VAE": ([0.73, 0.75, 0.62, 0.63, 0.61, 0.45], 0.84, 0.01),
    "P-ESTOI VTN-VAE": ([0.37, 0.35, 0.21, 0.19, 0.12, 0.06], 0.94, 0.01),
}


def test_criterion_1_table_correlations():
    start = time.monotonic()
    for name, (row, expected_abs, tol) in PUBLISHED_ROWS.items():
        r = ek.pearson_r(row, STER_ROW)
        assert abs(abs(r) - expected_abs) <= tol, (name, r)
        assert r < 0, "intelligibility scores must anticorrelate with STER (%s)" % name
    assert time.monotonic() - start < 1.0


# ---------------------------------------------------------------------------
# criterion 2: metric kernels against independent oracles
# ---------------------------------------------------------------------------

def _recursive_levenshtein(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(_recursive_levenshtein(a[1:], b) + 1,
               _recursive_levenshtein(a, b[1:]) + 1,
               _recursive_levenshtein(a[1:], b[1:]) + (a[0] != b[0]))


def _brute_force_dtw(dist):
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


def _enumerate_wilcoxon(d):
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    order = np.argsort(np.abs(d), kind="stable")
    ranks = np.empty(len(d))
    sorted_abs = np.abs(d)[order]
    i = 0
    while i < len(d):
        j = i
        while j + 1 < len(d) and sorted_abs[j + 1] == sorted_abs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    stat = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    total = ranks.sum()
    count = sum(1 for pattern in itertools.product((0, 1), repeat=len(d))
                if (w := sum(r for r, s in zip(ranks, pattern) if s)) <= stat + 1e-12
                or w >= total - stat - 1e-12)
    return stat, count / 2 ** len(d)


def test_criterion_2_metric_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(21)

    # edit distance: every length combination up to 6 over a 4-symbol alphabet
    alphabet = ["a", "b", "c", "d"]
    for la in range(7):
        for lb in range(7):
            for _ in range(4):
                a = [alphabet[i] for i in rng.integers(0, 4, size=la)]
                b = [alphabet[i] for i in rng.integers(0, 4, size=lb)]
                assert ek.levenshtein(a, b) == _recursive_levenshtein(a, b)

    # alignment: optimal cost equals exhaustive path enumeration
    for _ in range(100):
        tx, ty = rng.integers(1, 7, size=2)
        x = rng.standard_normal((int(tx), 3))
        y = rng.standard_normal((int(ty), 3))
        dist = np.sqrt(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))
        assert dsp.dtw(x, y).cost == pytest.approx(_brute_force_dtw(dist))

    # exact binomial tails against integer arithmetic, n <= 25
    for n in range(1, 26):
        for k in range(n + 1):
            expected = float(sum(Fraction(math.comb(n, i), 2 ** n)
                                 for i in range(k, n + 1)))
            assert ek.binomial_test(k, n) == pytest.approx(expected, rel=1e-10)
    assert ek.binomial_test(19, 20) == pytest.approx(21 / 2 ** 20, rel=1e-12)
    assert ek.binomial_test(19, 20) < 0.001

    # signed-rank exact p against sign-pattern enumeration, n <= 10
    for n in range(2, 11):
        for _ in range(4):
            a = rng.standard_normal(n)
            b = rng.standard_normal(n)
            stat, p = ek.wilcoxon_signed_rank(a, b)
            ostat, op = _enumerate_wilcoxon(a - b)
            assert stat == pytest.approx(ostat)
            assert p == pytest.approx(op)

    assert time.monotonic() - start < 30.0


# ---------------------------------------------------------------------------
# criterion 3: intelligibility-score sanity
# ---------------------------------------------------------------------------

def _word_signal(seed=3):
    template = corpus.word_templates(seed, 3)[2]
    voice = corpus.synthetic_voices(1, 0)[0]
    return corpus.render_word(template, voice, np.random.default_rng(seed))


def test_criterion_3_intelligibility_sanity(tiny_corpus):
    start = time.monotonic()
    clean = _word_signal()
    ref = dsp.melspec(clean)
    assert ek.p_stoi(ref, ref) == pytest.approx(1.0, abs=1e-6)
    assert ek.p_estoi(ref, ref) == pytest.approx(1.0, abs=1e-6)

    # additive white noise at decreasing SNR must decrease the mean score
    rng = np.random.default_rng(31)
    signal_power = float(np.mean(clean ** 2))
    stoi_means, estoi_means = [], []
    for snr_db in (20, 15, 10, 5, 0):
        noise_std = math.sqrt(signal_power / 10 ** (snr_db / 10))
        s_scores, e_scores = [], []
        for _ in range(20):
            noisy = clean + noise_std * rng.standard_normal(len(clean))
            m = dsp.melspec(noisy)
            s_scores.append(ek.p_stoi(m, ref))
            e_scores.append(ek.p_estoi(m, ref))
        stoi_means.append(float(np.mean(s_scores)))
        estoi_means.append(float(np.mean(e_scores)))
    assert all(a > b for a, b in zip(stoi_means, stoi_means[1:])), stoi_means
    assert all(a > b for a, b in zip(estoi_means, estoi_means[1:])), estoi_means

    # on the synthetic corpus, speaker-mean P-ESTOI decreases strictly with
    # stretch severity (ground-truth dysarthric utterances vs references)
    severities = ["D01", "D02", "D03"]   # stretch 1.25, 1.5, 1.75
    means = []
    for spk in severities:
        gender = tiny_corpus.speakers[spk].gender
        scores = []
        for u in tiny_corpus.utterances_for(spk):
            ref_model = ek.build_reference(tiny_corpus, u.word_id, gender)
            scores.append(ek.p_estoi(dsp.melspec(u.samples, u.sample_rate), ref_model))
        means.append(float(np.mean(scores)))
    assert means[0] > means[1] > means[2], means
    assert time.monotonic() - start < 120.0


# ---------------------------------------------------------------------------
# criterion 4: differentiation correctness by central finite differences
# ---------------------------------------------------------------------------

def _fd_check(loss_fn, params, picker, n_probes=20, eps=1e-4, tol=1e-3):
    loss = loss_fn()
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss.backward()
    names = sorted(params)
    for _ in range(n_probes):
        name = names[picker.integers(len(names))]
        p = params[name]
        idx = tuple(picker.integers(s) for s in p.shape)
        analytic = 0.0 if p.grad is None else p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            lp = loss_fn().item()
            p[idx] = orig - eps
            lm = loss_fn().item()
            p[idx] = orig
        fd = (lp - lm) / (2 * eps)
        rel = abs(analytic - fd) / max(1e-8, abs(analytic), abs(fd))
        assert rel < tol, (name, idx, analytic, fd)


def test_criterion_4_gradient_checks():
    cfg = s2s.S2SConfig(d_model=8, n_heads=2, enc_layers=1, dec_layers=1,
                        ff_dim=16, dropout=0.0, prenet_dims=(8,),
                        prenet_dropout=0.0, postnet_layers=2, postnet_channels=8,
                        n_bands=4, reduction_factor=1)
    torch.manual_seed(41)
    model = s2s.TransformerConverter(cfg).double()
    rng = np.random.default_rng(41)
    batch = s2s.make_batch([rng.standard_normal((3, 4))],
                           [rng.standard_normal((3, 4))], dtype=torch.float64)
    _fd_check(lambda: s2s.s2s_loss(model.teacher_forced(batch), batch)["total"],
              dict(model.named_parameters()), np.random.default_rng(42))

    vcfg = fw.VAEConfig(enc_channels=(6,), latent_dim=4, codebook_size=4,
                        speaker_dim=3, n_bands=4, kernel=3, commitment_beta=0.25)
    torch.manual_seed(43)
    vae = fw.VQVAEModel(vcfg, ["A", "B"]).double().eval()
    mel = rng.standard_normal((5, 4))
    state = fw.frozen_vq_state(vae, mel, "A")
    real = fw.vae_forward(vae, mel, "A")[2]["total"].item()
    assert fw.frozen_vq_loss(vae, mel, state).item() == pytest.approx(real, abs=1e-12)
    _fd_check(lambda: fw.frozen_vq_loss(vae, mel, state),
              dict(vae.named_parameters()), np.random.default_rng(44))


# ---------------------------------------------------------------------------
# criterion 5: causality and padding invariance
# ---------------------------------------------------------------------------

def test_criterion_5_causality_and_masking():
    rng = np.random.default_rng(51)
    for r in (1, 2, 4):
        cfg = s2s.S2SConfig(d_model=16, n_heads=2, enc_layers=1, dec_layers=1,
                            ff_dim=32, dropout=0.0, prenet_dims=(16,),
                            prenet_dropout=0.0, postnet_layers=2,
                            postnet_channels=16, n_bands=12, reduction_factor=r)
        torch.manual_seed(50 + r)
        model = s2s.TransformerConverter(cfg).eval()
        src = [rng.standard_normal((18, 12))]
        tgt = [rng.standard_normal((4 * r, 12))]
        for t_probe in (0, 1, 2):
            tgt2 = [tgt[0].copy()]
            tgt2[0][t_probe * r + 1:] += 4.0
            with torch.no_grad():
                o1 = model.teacher_forced(s2s.make_batch(src, tgt))
                o2 = model.teacher_forced(s2s.make_batch(src, tgt2))
            upto = min(len(tgt[0]), (t_probe + 1) * r)
            assert (o1.post[0, :upto] - o2.post[0, :upto]).abs().max() < 1e-6
            assert (o1.stop_logits[0, :t_probe + 1]
                    - o2.stop_logits[0, :t_probe + 1]).abs().max() < 1e-6

    cfg = s2s.S2SConfig(d_model=32, n_heads=2, enc_layers=1, dec_layers=1,
                        ff_dim=64, dropout=0.0, prenet_dims=(32,),
                        prenet_dropout=0.0, postnet_layers=2, postnet_channels=32,
                        n_bands=20)
    torch.manual_seed(55)
    model = s2s.TransformerConverter(cfg).eval()
    src = rng.standard_normal((25, 20))
    tgt = rng.standard_normal((18, 20))
    plain = s2s.make_batch([src], [tgt])
    padded = s2s.S2SBatch(
        source=torch.cat([plain.source, torch.zeros(1, 9, 20)], dim=1),
        source_lengths=plain.source_lengths,
        target=torch.cat([plain.target, torch.zeros(1, 7, 20)], dim=1),
        target_lengths=plain.target_lengths,
        stop_labels=torch.cat([plain.stop_labels, torch.ones(1, 7)], dim=1))
    with torch.no_grad():
        l1 = s2s.s2s_loss(model.teacher_forced(plain), plain)["total"].item()
        l2 = s2s.s2s_loss(model.teacher_forced(padded), padded)["total"].item()
    assert abs(l1 - l2) < 1e-6


# ---------------------------------------------------------------------------
# criterion 6: trainability smoke tests
# ---------------------------------------------------------------------------

SMOKE = s2s.S2SConfig(d_model=64, n_heads=2, enc_layers=2, dec_layers=2, ff_dim=256,
                      dropout=0.1, prenet_dims=(64, 64), prenet_dropout=0.0,
                      pretrain_warp=0.0, finetune_warp=0.0, finetune_lr=1e-3,
                      postnet_layers=3, postnet_channels=64, n_bands=80,
                      lr=1e-3, warmup_steps=50, batch_size=4)


def test_criterion_6_trainability(tiny_corpus, tmp_path):
    start = time.monotonic()
    pre = s2s.s2s_pretrain(tiny_corpus, SMOKE, tmp_path / "pre.ckpt",
                           speaker="N03", steps=30, seed=61)
    pairs = corpus.parallel_pairs(tiny_corpus, ["N01"], "D02", "train")[:1]
    run1 = s2s.s2s_finetune(pre, pairs, SMOKE, tmp_path / "ft1.ckpt",
                            steps=500, seed=62)
    curve1 = run1.meta["loss_curve"]
    assert curve1[-1] < 0.10 * curve1[0], (curve1[0], curve1[-1])
    run2 = s2s.s2s_finetune(pre, pairs, SMOKE, tmp_path / "ft2.ckpt",
                            steps=500, seed=62)
    assert curve1 == run2.meta["loss_curve"]

    vcfg = fw.VAEConfig(enc_channels=(48, 48), latent_dim=24, codebook_size=48,
                        speaker_dim=16, n_bands=80, lr=2e-3, batch_size=8,
                        crop_frames=40, adversarial_start=10 ** 9)

    class TwoUtts:
        speakers = tiny_corpus.speakers
        lexicon = tiny_corpus.lexicon
        utterances = (tiny_corpus.utterances_for("N01", "train")[:1]
                      + tiny_corpus.utterances_for("N02", "train")[:1])

        @staticmethod
        def utterances_for(sid, split=None):
            return [u for u in TwoUtts.utterances
                    if u.speaker_id == sid and (split is None or u.split == split)]

        @staticmethod
        def speakers_in_group(group):
            return ["N01", "N02"]

    v1 = fw.vae_train(TwoUtts, vcfg, tmp_path / "v1.ckpt", steps=1000, seed=63)
    model = fw.model_from_checkpoint(v1)
    stats = stats_from_arrays(v1, v1.meta["stats_speakers"])
    u = TwoUtts.utterances[0]
    m = dsp.normalize(dsp.melspec(u.samples, u.sample_rate), stats["N01"])
    with torch.no_grad():
        _, _, losses = fw.vae_forward(model, m.frames, "N01")
    assert losses["recon_l1"].item() < 0.1
    v2 = fw.vae_train(TwoUtts, vcfg, tmp_path / "v2.ckpt", steps=1000, seed=63)
    assert v1.meta["loss_curve"] == v2.meta["loss_curve"]
    assert time.monotonic() - start < 600.0


# ---------------------------------------------------------------------------
# criteria 7 and 8: one trained pipeline on the stretch-1.5 target
# ---------------------------------------------------------------------------

def experiment_config_text(base):
    return """\
[corpus]
root = %s/corpus
generate = true
seed = 7
normal_speakers = 4
dysarthric_speakers = 3
words = 30
train_words = 24
test_words = 6

[pretrain_corpus]
root = %s/pretrain_corpus
generate = true
seed = 11
words = 50
speaker = N01

[speakers]
target = D02
sources = all-normal

[stage1]
d_model = 64
n_heads = 2
enc_layers = 2
dec_layers = 2
ff_dim = 256
dropout = 0.1
prenet_dims = 64,64
prenet_dropout = 0.5
pretrain_warp = 0.15
finetune_warp = 0.1
finetune_lr = 0.0003
postnet_layers = 3
postnet_channels = 64
batch_size = 16
lr = 0.001
warmup_steps = 100
pretrain_steps = 2500
finetune_steps = 3500

[stage2]
enc_channels = 48,48
latent_dim = 24
codebook_size = 48
speaker_dim = 16
batch_size = 8
crop_frames = 40
lr = 0.002
cyclic_weight = 1.0
adversarial_weight = 0.1
adversarial_start = 800
steps = 1200

[vocoder]
iterations = 20

[run]
seed = 17
out = %s/run
""" % (base, base, base)


@pytest.fixture(scope="session")
def severity_experiment(tmp_path_factory):
    base = tmp_path_factory.mktemp("experiment")
    cfg = pipeline.parse_config(experiment_config_text(base))
    outcome = pipeline.run_all(cfg)
    return {"cfg": cfg, "outcome": outcome}


def test_criterion_7_severity_transfer(severity_experiment):
    outcome = severity_experiment["outcome"]
    vtn = outcome["results"][pipeline.STAGE_VTN]
    index = outcome["index"]
    ratios = []
    for r in vtn:
        u = index.utterance(r.utt_id)
        frames_in = dsp.melspec(u.samples, u.sample_rate).n_frames
        ratios.append(r.mel.n_frames / frames_in)
    med = statistics.median(ratios)
    assert 1.275 <= med <= 1.725, (med, sorted(ratios))

    vtn_by_id = {r.utt_id: r for r in vtn}
    vae = outcome["results"][pipeline.STAGE_VTN_VAE]
    assert vae
    for r in vae:
        assert r.mel.n_frames == vtn_by_id[r.utt_id].mel.n_frames, r.utt_id


def test_criterion_8_identity_direction(severity_experiment):
    cfg = severity_experiment["cfg"]
    outcome = severity_experiment["outcome"]
    vae_ckpt = ModelCheckpoint.load(cfg.out_dir / "checkpoints" / "vae.ckpt")
    model = fw.model_from_checkpoint(vae_ckpt)
    stats = stats_from_arrays(vae_ckpt, vae_ckpt.meta["stats_speakers"])
    # stage-1 outputs (dysarthric-normalized space) pushed toward speakers
    # of opposite spectral tilt: +6 dB/oct (N01) vs -6 dB/oct (N02)
    s2s_ckpt = ModelCheckpoint.load(cfg.out_dir / "checkpoints" / "s2s.ckpt")
    s2s_stats = stats_from_arrays(s2s_ckpt, s2s_ckpt.meta["stats_speakers"])
    target = s2s_ckpt.meta["target_speaker"]
    vtn = outcome["results"][pipeline.STAGE_VTN][:10]
    assert len(vtn) == 10
    correct = 0
    for r in vtn:
        normalized = dsp.normalize(r.mel, s2s_stats[target])
        up = dsp.denormalize(
            r.mel.with_frames(fw.vae_convert(model, normalized.frames, "N01")),
            stats["N01"])
        down = dsp.denormalize(
            r.mel.with_frames(fw.vae_convert(model, normalized.frames, "N02")),
            stats["N02"])
        if dsp.spectral_tilt(up) > dsp.spectral_tilt(down):
            correct += 1
    assert correct >= 8, correct


# ---------------------------------------------------------------------------
# criterion 9: end-to-end reproducibility
# ---------------------------------------------------------------------------

def reproducibility_config_text(base, run_name):
    return """\
[corpus]
root = %s/corpus
generate = true
seed = 7
normal_speakers = 4
dysarthric_speakers = 3
words = 8
train_words = 6
test_words = 2

[pretrain_corpus]
root = %s/pretrain_corpus
generate = true
seed = 11
words = 8
speaker = N01

[speakers]
target = D02
sources = all-normal

[stage1]
d_model = 32
n_heads = 2
enc_layers = 1
dec_layers = 1
ff_dim = 64
dropout = 0.1
prenet_dims = 32
prenet_dropout = 0.5
postnet_layers = 2
postnet_channels = 32
batch_size = 4
lr = 0.001
warmup_steps = 10
max_decode_frames = 200
pretrain_steps = 25
finetune_steps = 50

[stage2]
enc_channels = 24,24
latent_dim = 12
codebook_size = 16
speaker_dim = 8
batch_size = 4
crop_frames = 24
lr = 0.002
cyclic_weight = 1.0
adversarial_weight = 0.1
adversarial_start = 30
steps = 60

[vocoder]
iterations = 4

[run]
seed = 23
out = %s/%s
""" % (base, base, base, run_name)


def test_criterion_9_run_all_reproducibility(tmp_path):
    cfg_a = pipeline.parse_config(reproducibility_config_text(tmp_path, "run_a"))
    cfg_b = pipeline.parse_config(reproducibility_config_text(tmp_path, "run_b"))
    pipeline.run_all(cfg_a)
    pipeline.run_all(cfg_b)
    report_a = (cfg_a.out_dir / "report" / "report.tsv").read_bytes()
    report_b = (cfg_b.out_dir / "report" / "report.tsv").read_bytes()
    assert report_a == report_b
    text_a = (cfg_a.out_dir / "report" / "report.txt").read_bytes()
    text_b = (cfg_b.out_dir / "report" / "report.txt").read_bytes()
    assert text_a == text_b
