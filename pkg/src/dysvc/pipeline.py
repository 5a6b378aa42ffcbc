"""End-to-end orchestration of the two-stage conversion pipeline.

One config file drives every stage: corpus preparation, seq2seq
pretraining and many-to-one fine-tuning toward the dysarthric target,
VQVAE training on the normal speakers, two-stage conversion of the test
utterances, and objective evaluation with report files and figures.

A run directory is laid out as::

    out/
      checkpoints/{pretrain,s2s,vae}.ckpt
      converted/{vtn,vtn_vae}/<utt>.wav + .npy
      conversions_{vtn,vtn_vae}.tsv
      hypotheses/{vtn,vtn_vae,gt}.tsv
      report/report.tsv, report.txt, figures/*.png
      manifest.json
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import reporting
from .checkpoint import ModelCheckpoint, stats_from_arrays
from .corpus import CorpusIndex, generate_synthetic_corpus, load_corpus, \
    parallel_pairs, split_train_test, write_splits_tsv, write_wav
from .dsp import MelSpectrogram, denormalize, griffin_lim, melspec, normalize
from .evalkit import ConvertedUtterance, EvalReport, TemplateRecognizer, \
    evaluate_system, write_hypotheses
from .framewise import VAEConfig, model_from_checkpoint as vae_model_from_checkpoint, \
    vae_convert, vae_train
from .seq2seq import S2SConfig, model_from_checkpoint as s2s_model_from_checkpoint, \
    s2s_convert, s2s_finetune, s2s_pretrain

logger = logging.getLogger(__name__)

STAGE_VTN = "vtn"
STAGE_VTN_VAE = "vtn_vae"
STAGE_TAGS = {STAGE_VTN: "VTN", STAGE_VTN_VAE: "VTN-VAE"}


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSection:
    root: str = "corpus"
    generate: bool = True
    seed: int = 7
    normal_speakers: int = 4
    dysarthric_speakers: int = 3
    words: int = 30
    train_words: int = 24
    test_words: int = 6


@dataclass(frozen=True)
class PretrainCorpusSection:
    root: str = "pretrain_corpus"
    generate: bool = True
    seed: int = 11
    words: int = 50
    speaker: str = "N01"


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusSection
    pretrain_corpus: PretrainCorpusSection
    target: str
    sources: tuple          # speaker ids, or ("all-normal",)
    s2s: S2SConfig
    pretrain_steps: int
    finetune_steps: int
    vae: VAEConfig
    vae_steps: int
    vocoder_iterations: int
    seed: int
    out: str
    text: str               # canonical config text this was parsed from

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def resolve_sources(self, index: CorpusIndex) -> list:
        if self.sources == ("all-normal",):
            out = index.speakers_in_group("normal")
        else:
            out = list(self.sources)
        for sid in out + [self.target]:
            if sid not in index.speakers:
                raise PipelineError("config references unknown speaker %s" % sid)
        return out


def default_config_text() -> str:
    """A complete desk-scale config; every recognized key appears once."""
    return """\
[corpus]
root = corpus
generate = true
seed = 7
normal_speakers = 4
dysarthric_speakers = 3
words = 30
train_words = 24
test_words = 6

[pretrain_corpus]
root = pretrain_corpus
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
reduction_factor = 2
prenet_dims = 64,64
postnet_layers = 3
postnet_channels = 64
batch_size = 16
lr = 0.001
warmup_steps = 100
pretrain_steps = 1200
finetune_steps = 6000

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
adversarial_start = 1000
steps = 1500

[vocoder]
iterations = 30

[run]
seed = 7
out = runs/demo
"""


def _parse_value(name: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise PipelineError("key %s: expected true/false, got %r" % (name, raw))
        return raw.lower() == "true"
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _section_kwargs(parser, section: str, cls, extra_keys=()):
    """Typed kwargs for a dataclass from one config section; unknown keys fail."""
    known = {f.name: getattr(cls, f.name) for f in fields(cls)}
    out = {}
    extras = {}
    if not parser.has_section(section):
        return out, extras
    for key, raw in parser.items(section):
        if key in extra_keys:
            extras[key] = int(raw)
        elif key in known:
            try:
                out[key] = _parse_value(key, raw, known[key])
            except ValueError:
                raise PipelineError("[%s] %s: cannot parse %r" % (section, key, raw)) from None
        else:
            raise PipelineError("unknown key %r in section [%s]" % (key, section))
    return out, extras


def parse_config(path_or_text, *, seed_override=None, out_override=None) -> PipelineConfig:
    """Parse and validate a pipeline config; unknown sections or keys fail."""
    if isinstance(path_or_text, (str, Path)) and "\n" not in str(path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = str(path_or_text)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise PipelineError("config parse error: %s" % exc) from exc
    allowed = {"corpus", "pretrain_corpus", "speakers", "stage1", "stage2",
               "vocoder", "run"}
    unknown = set(parser.sections()) - allowed
    if unknown:
        raise PipelineError("unknown config section(s): %s" % ", ".join(sorted(unknown)))

    corpus_kw, _ = _section_kwargs(parser, "corpus", CorpusSection)
    pre_kw, _ = _section_kwargs(parser, "pretrain_corpus", PretrainCorpusSection)
    s2s_kw, s2s_extra = _section_kwargs(parser, "stage1", S2SConfig,
                                        extra_keys=("pretrain_steps", "finetune_steps"))
    vae_kw, vae_extra = _section_kwargs(parser, "stage2", VAEConfig,
                                        extra_keys=("steps",))

    target = "D02"
    sources: tuple = ("all-normal",)
    if parser.has_section("speakers"):
        for key, raw in parser.items("speakers"):
            if key == "target":
                target = raw.strip()
            elif key == "sources":
                raw = raw.strip()
                sources = (("all-normal",) if raw == "all-normal"
                           else tuple(s.strip() for s in raw.split(",") if s.strip()))
            else:
                raise PipelineError("unknown key %r in section [speakers]" % key)

    vocoder_iterations = 30
    if parser.has_section("vocoder"):
        for key, raw in parser.items("vocoder"):
            if key != "iterations":
                raise PipelineError("unknown key %r in section [vocoder]" % key)
            vocoder_iterations = int(raw)

    seed, out = 7, "runs/demo"
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key == "seed":
                seed = int(raw)
            elif key == "out":
                out = raw.strip()
            else:
                raise PipelineError("unknown key %r in section [run]" % key)
    if seed_override is not None:
        seed = int(seed_override)
    if out_override is not None:
        out = str(out_override)

    return PipelineConfig(
        corpus=CorpusSection(**corpus_kw),
        pretrain_corpus=PretrainCorpusSection(**pre_kw),
        target=target, sources=sources,
        s2s=S2SConfig(**s2s_kw),
        pretrain_steps=s2s_extra.get("pretrain_steps", 1200),
        finetune_steps=s2s_extra.get("finetune_steps", 6000),
        vae=VAEConfig(**vae_kw),
        vae_steps=vae_extra.get("steps", 1500),
        vocoder_iterations=vocoder_iterations,
        seed=seed, out=out, text=text)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def prepare(cfg: PipelineConfig) -> CorpusIndex:
    """Generate (if configured) and split the conversion corpus."""
    root = Path(cfg.corpus.root)
    if not (root / "speakers.tsv").exists():
        if not cfg.corpus.generate:
            raise PipelineError("corpus root %s is missing and generation is disabled"
                                % root)
        generate_synthetic_corpus(
            seed=cfg.corpus.seed, n_normal=cfg.corpus.normal_speakers,
            n_dysarthric=cfg.corpus.dysarthric_speakers,
            words_per_speaker=cfg.corpus.words, out=root)
    index = load_corpus(root)
    index = split_train_test(index, cfg.corpus.train_words, cfg.corpus.test_words)
    write_splits_tsv(index, root / "splits.tsv")
    index = load_corpus(root)
    cfg.resolve_sources(index)
    return index


def prepare_pretrain_corpus(cfg: PipelineConfig) -> CorpusIndex:
    root = Path(cfg.pretrain_corpus.root)
    if not (root / "speakers.tsv").exists():
        if not cfg.pretrain_corpus.generate:
            raise PipelineError("pretraining corpus %s is missing and generation "
                                "is disabled" % root)
        generate_synthetic_corpus(
            seed=cfg.pretrain_corpus.seed, n_normal=1, n_dysarthric=0,
            words_per_speaker=cfg.pretrain_corpus.words, out=root,
            train_fraction=1.0)
    return load_corpus(root)


def _ckpt_path(cfg: PipelineConfig, name: str) -> Path:
    return cfg.out_dir / "checkpoints" / ("%s.ckpt" % name)


def pretrain(cfg: PipelineConfig) -> ModelCheckpoint:
    index = prepare_pretrain_corpus(cfg)
    return s2s_pretrain(index, cfg.s2s, _ckpt_path(cfg, "pretrain"),
                        speaker=cfg.pretrain_corpus.speaker,
                        steps=cfg.pretrain_steps, seed=cfg.seed)


def train_s2s(cfg: PipelineConfig, index: CorpusIndex | None = None) -> ModelCheckpoint:
    index = index if index is not None else load_corpus(cfg.corpus.root)
    pre_path = _ckpt_path(cfg, "pretrain")
    if not pre_path.exists():
        raise PipelineError("pretrain checkpoint %s not found; run pretrain first"
                            % pre_path)
    pre = ModelCheckpoint.load(pre_path)
    sources = cfg.resolve_sources(index)
    pairs = parallel_pairs(index, sources, cfg.target, "train")
    return s2s_finetune(pre, pairs, cfg.s2s, _ckpt_path(cfg, "s2s"),
                        steps=cfg.finetune_steps, seed=cfg.seed + 1)


def train_vae(cfg: PipelineConfig, index: CorpusIndex | None = None) -> ModelCheckpoint:
    index = index if index is not None else load_corpus(cfg.corpus.root)
    return vae_train(index, cfg.vae, _ckpt_path(cfg, "vae"),
                     steps=cfg.vae_steps, seed=cfg.seed + 2)


@dataclass
class ConversionResult:
    utt_id: str
    stage: str               # "VTN" | "VTN-VAE"
    source_speaker: str
    target_speaker: str
    word_id: str
    mel: MelSpectrogram      # denormalized log-mel
    waveform: np.ndarray
    length_ratio: float      # output frames / input frames
    truncated: bool
    vtn_frames: int          # stage-1 frame count (equals stage-2's by contract)


def run_convert(cfg: PipelineConfig, utterances=None,
                stage: str = STAGE_VTN, index: CorpusIndex | None = None,
                write_files: bool = True) -> list:
    """Convert utterances through stage 1 (and stage 2 for ``vtn_vae``).

    Defaults to the test-split utterances of every configured source
    speaker.  Results are persisted as wav plus mel unless disabled.
    """
    if stage not in STAGE_TAGS:
        raise PipelineError("stage must be one of %s" % ", ".join(STAGE_TAGS))
    index = index if index is not None else load_corpus(cfg.corpus.root)
    s2s_path = _ckpt_path(cfg, "s2s")
    if not s2s_path.exists():
        raise PipelineError("stage-1 checkpoint %s not found; run train-s2s first"
                            % s2s_path)
    s2s_ckpt = ModelCheckpoint.load(s2s_path)
    s2s_model = s2s_model_from_checkpoint(s2s_ckpt)
    stats = stats_from_arrays(s2s_ckpt, s2s_ckpt.meta["stats_speakers"])
    target = s2s_ckpt.meta["target_speaker"]

    vae_model = None
    vae_stats = None
    if stage == STAGE_VTN_VAE:
        vae_path = _ckpt_path(cfg, "vae")
        if not vae_path.exists():
            raise PipelineError("stage-2 checkpoint %s not found; run train-vae first"
                                % vae_path)
        vae_ckpt = ModelCheckpoint.load(vae_path)
        vae_model = vae_model_from_checkpoint(vae_ckpt)
        vae_stats = stats_from_arrays(vae_ckpt, vae_ckpt.meta["stats_speakers"])

    if utterances is None:
        sources = cfg.resolve_sources(index)
        utterances = [u for sid in sources for u in index.utterances_for(sid, "test")]

    results = []
    for u in utterances:
        if u.speaker_id not in stats:
            raise PipelineError("no feature stats for source speaker %s in stage-1 "
                                "checkpoint" % u.speaker_id)
        m_in = melspec(u.samples, u.sample_rate)
        x = normalize(m_in, stats[u.speaker_id])
        conv = s2s_convert(s2s_model, x.frames)
        vtn_frames = conv.mel.shape[0]
        if stage == STAGE_VTN:
            out_frames = conv.mel
            out_mel = denormalize(MelSpectrogram(frames=out_frames), stats[target])
        else:
            if u.speaker_id not in vae_model.speakers:
                raise PipelineError(
                    "source speaker %s is not in the frame-wise model's training set; "
                    "identity restoration is impossible" % u.speaker_id)
            # stage-1 output is already in the dysarthric target's normalized
            # space, which is exactly the stage-2 input convention
            restored = vae_convert(vae_model, conv.mel, u.speaker_id)
            if restored.shape[0] != vtn_frames:
                raise PipelineError("stage 2 changed the frame count for %s" % u.utt_id)
            out_mel = denormalize(MelSpectrogram(frames=restored),
                                  vae_stats[u.speaker_id])
        wave = griffin_lim(out_mel, iterations=cfg.vocoder_iterations)
        results.append(ConversionResult(
            utt_id=u.utt_id, stage=STAGE_TAGS[stage], source_speaker=u.speaker_id,
            target_speaker=target, word_id=u.word_id, mel=out_mel, waveform=wave,
            length_ratio=out_mel.n_frames / m_in.n_frames,
            truncated=conv.truncated, vtn_frames=vtn_frames))

    if write_files:
        out_dir = cfg.out_dir / "converted" / stage
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = ["utt_id\tframes_in\tframes_out\tlength_ratio\ttruncated"]
        for r, u in zip(results, utterances):
            write_wav(out_dir / ("%s.wav" % r.utt_id), r.waveform)
            np.save(out_dir / ("%s.npy" % r.utt_id), r.mel.frames)
            rows.append("%s\t%d\t%d\t%.6f\t%s"
                        % (r.utt_id, melspec(u.samples, u.sample_rate).n_frames,
                           r.mel.n_frames, r.length_ratio, r.truncated))
        (cfg.out_dir / ("conversions_%s.tsv" % stage)).write_text(
            "\n".join(rows) + "\n", encoding="utf-8")
    return results


def evaluate(cfg: PipelineConfig, index: CorpusIndex | None = None,
             results_by_stage: dict | None = None) -> EvalReport:
    """Score both conversion stages and write report files and figures."""
    index = index if index is not None else load_corpus(cfg.corpus.root)
    if results_by_stage is None:
        results_by_stage = {
            STAGE_VTN: run_convert(cfg, stage=STAGE_VTN, index=index),
            STAGE_VTN_VAE: run_convert(cfg, stage=STAGE_VTN_VAE, index=index),
        }

    recognizer = TemplateRecognizer.from_index(
        index, speakers=set(index.speakers_in_group("normal")), split="train")
    hyp_dir = cfg.out_dir / "hypotheses"
    hyp_dir.mkdir(parents=True, exist_ok=True)
    hypotheses = {}
    for stage, results in results_by_stage.items():
        hyps = {r.utt_id: recognizer.transcribe(r.mel) for r in results}
        path = hyp_dir / ("%s.tsv" % stage)
        write_hypotheses(hyps, path)
        hypotheses[STAGE_TAGS[stage]] = path
    gt_speakers = sorted(sid for sid, p in index.speakers.items()
                         if p.group == "dysarthric" and index.utterances_for(sid, "test"))
    gt_hyps = {}
    for spk in gt_speakers:
        for u in index.utterances_for(spk, "test"):
            gt_hyps[u.utt_id] = recognizer.transcribe(melspec(u.samples, u.sample_rate))
    gt_path = hyp_dir / "gt.tsv"
    write_hypotheses(gt_hyps, gt_path)
    hypotheses["GT"] = gt_path

    converted = [ConvertedUtterance(utt_id=r.utt_id, stage=r.stage,
                                    target_speaker=r.target_speaker,
                                    word_id=r.word_id, mel=r.mel)
                 for results in results_by_stage.values() for r in results]
    report = evaluate_system(converted, index, hypotheses=hypotheses,
                             include_ground_truth=True)
    write_report(cfg, report)
    return report


def write_report(cfg: PipelineConfig, report: EvalReport) -> dict:
    report_dir = cfg.out_dir / "report"
    paths = {
        "tsv": reporting.write_report_tsv(report, report_dir / "report.tsv"),
        "txt": reporting.write_report_text(report, report_dir / "report.txt"),
        "figures": reporting.render_figures(report, report_dir / "figures"),
    }
    return paths


def run_all(cfg: PipelineConfig) -> dict:
    """Execute every stage and write a manifest that pins the run."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stage = "prepare"
    try:
        index = prepare(cfg)
        stage = "pretrain"
        pretrain(cfg)
        stage = "train-s2s"
        train_s2s(cfg, index)
        stage = "train-vae"
        train_vae(cfg, index)
        stage = "convert"
        results = {
            STAGE_VTN: run_convert(cfg, stage=STAGE_VTN, index=index),
            STAGE_VTN_VAE: run_convert(cfg, stage=STAGE_VTN_VAE, index=index),
        }
        stage = "evaluate"
        report = evaluate(cfg, index, results)
    except Exception as exc:
        raise PipelineError("stage %s failed: %s" % (stage, exc)) from exc

    manifest = {
        "config_sha256": cfg.config_hash,
        "seed": cfg.seed,
        "corpus_root": str(cfg.corpus.root),
        "pretrain_corpus_root": str(cfg.pretrain_corpus.root),
        "checkpoints": {name: str(_ckpt_path(cfg, name))
                        for name in ("pretrain", "s2s", "vae")},
        "report_tsv": str(out / "report" / "report.tsv"),
        "target_speaker": cfg.target,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"manifest": manifest, "report": report, "results": results, "index": index}
