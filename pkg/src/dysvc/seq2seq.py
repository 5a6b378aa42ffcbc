"""Stage 1: Transformer encoder-decoder mel-to-mel converter.

Maps a source speaker's mel sequence to the target speaker's mel
sequence, changing both timbre and duration.  The decoder is
autoregressive with a reduction factor r (r mel frames per decoder
step) and a stop head.  Supports autoencoder-style pretraining on a
designated speaker followed by many-to-one fine-tuning on parallel
pairs from several source speakers to one target speaker.

Training is deterministic for a fixed seed: batch composition and
dropout masks are reseeded per step from (seed, step), so resuming from
a checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import ModelCheckpoint, stats_to_arrays
from .dsp import FeatureStats, MelSpectrogram, melspec, normalize

NEG_INF = -1e9


class Seq2SeqError(ValueError):
    pass


@dataclass(frozen=True)
class S2SConfig:
    d_model: int = 256
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 4
    ff_dim: int = 1024
    dropout: float = 0.1
    reduction_factor: int = 2
    prenet_dims: tuple = (256, 256)
    # heavy prenet dropout weakens the autoregressive feedback path during
    # training so the decoder must rely on encoder attention for content;
    # inference runs in eval mode and stays deterministic
    prenet_dropout: float = 0.5
    # pretraining reconstructs the clean mel from a locally time-warped copy
    # (random frame drops/repeats at this rate); without the warp the task
    # is solvable by position copying and cross-attention never learns to
    # track content at a variable rate
    pretrain_warp: float = 0.15
    # the same jitter on fine-tuning sources keeps the attention tracking
    # content instead of memorizing per-word positions
    finetune_warp: float = 0.1
    finetune_lr: float = 3e-4
    postnet_layers: int = 5
    postnet_channels: int = 256
    postnet_kernel: int = 5
    max_decode_frames: int = 1200
    stop_threshold: float = 0.5
    stop_weight: float = 5.0
    n_bands: int = 80
    lr: float = 1e-4
    warmup_steps: int = 400
    grad_clip: float = 1.0
    batch_size: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise Seq2SeqError("d_model must be divisible by n_heads")
        if self.reduction_factor < 1:
            raise Seq2SeqError("reduction factor must be >= 1")

    def canonical_text(self) -> str:
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parts.append("%s=%s" % (f.name, v))
        return "\n".join(parts)


@dataclass
class S2SBatch:
    """Padded source/target mel tensors with lengths and stop flags.

    ``stop_labels`` is per target frame: 0 before the last valid frame,
    1 from it onward (a single 0-to-1 transition per item).
    """

    source: torch.Tensor          # (N, Ts, B)
    source_lengths: torch.Tensor  # (N,)
    target: torch.Tensor          # (N, Tt, B)
    target_lengths: torch.Tensor  # (N,)
    stop_labels: torch.Tensor     # (N, Tt)


@dataclass
class S2SOutput:
    pre: torch.Tensor           # (N, Tt, B) before the postnet
    post: torch.Tensor          # (N, Tt, B) after the postnet
    stop_logits: torch.Tensor   # (N, ceil(Tt / r))
    reduction_factor: int = 2


def make_batch(sources, targets, dtype=torch.float32) -> S2SBatch:
    """Pad lists of (T, B) arrays into an S2SBatch."""
    if len(sources) != len(targets) or not sources:
        raise Seq2SeqError("need equally many nonempty source and target items")

    def pad(items):
        lengths = torch.tensor([len(x) for x in items], dtype=torch.long)
        t_max = int(lengths.max())
        out = torch.zeros(len(items), t_max, items[0].shape[1], dtype=dtype)
        for i, x in enumerate(items):
            out[i, :len(x)] = torch.as_tensor(np.asarray(x), dtype=dtype)
        return out, lengths

    src, src_len = pad(sources)
    tgt, tgt_len = pad(targets)
    stop = torch.zeros(tgt.shape[0], tgt.shape[1], dtype=dtype)
    for i, n in enumerate(tgt_len.tolist()):
        stop[i, n - 1:] = 1.0
    return S2SBatch(source=src, source_lengths=src_len, target=tgt,
                    target_lengths=tgt_len, stop_labels=stop)


class SinusoidalPositions(nn.Module):
    def __init__(self, d_model: int, max_len: int = 4096):
        super().__init__()
        pos = torch.arange(max_len).unsqueeze(1).float()
        div = torch.exp(torch.arange(0, d_model, 2).float() * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(pos * div)
        pe[:, 1::2] = torch.cos(pos * div)
        self.register_buffer("pe", pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pe[:x.shape[1]].to(x.dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, mask=None):
        """mask is additive, broadcastable to (N, heads, Tq, Tk)."""
        n, tq, _ = query.shape
        tk = key.shape[1]

        def split(x, t):
            return x.view(n, t, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.q(query), tq)
        k = split(self.k(key), tk)
        v = split(self.v(value), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores + mask
        attn = torch.softmax(scores, dim=-1)
        x = self.dropout(attn) @ v
        x = x.transpose(1, 2).reshape(n, tq, -1)
        return self.out(x), attn


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, ff_dim), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(ff_dim, d_model))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: S2SConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, mask)
        x = x + self.dropout(a)
        x = x + self.dropout(self.ff(self.ln2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: S2SConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, causal_mask, memory_mask):
        h = self.ln1(x)
        a, _ = self.self_attn(h, h, h, causal_mask)
        x = x + self.dropout(a)
        a, cross = self.cross_attn(self.ln2(x), memory, memory, memory_mask)
        x = x + self.dropout(a)
        x = x + self.dropout(self.ff(self.ln3(x)))
        return x, cross


class Prenet(nn.Module):
    def __init__(self, n_bands: int, dims, d_model: int, dropout: float):
        super().__init__()
        layers = []
        prev = n_bands
        for d in dims:
            layers += [nn.Linear(prev, d), nn.ReLU(), nn.Dropout(dropout)]
            prev = d
        layers.append(nn.Linear(prev, d_model))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class CausalPostnet(nn.Module):
    """Residual refinement over time using causal 1-D convolutions.

    Left-only padding keeps step-level causality, so the whole model's
    output at decoder step t never depends on later target frames.
    """

    def __init__(self, cfg: S2SConfig):
        super().__init__()
        k = cfg.postnet_kernel
        chans = cfg.postnet_channels
        convs = []
        for i in range(cfg.postnet_layers):
            in_c = cfg.n_bands if i == 0 else chans
            out_c = cfg.n_bands if i == cfg.postnet_layers - 1 else chans
            convs.append(nn.Conv1d(in_c, out_c, k))
        self.convs = nn.ModuleList(convs)
        self.kernel = k
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        # x: (N, T, B) -> residual (N, T, B)
        h = x.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            h = conv(F.pad(h, (self.kernel - 1, 0)))
            if i < len(self.convs) - 1:
                h = self.dropout(torch.tanh(h))
        return h.transpose(1, 2)


class TransformerConverter(nn.Module):
    def __init__(self, cfg: S2SConfig):
        super().__init__()
        self.cfg = cfg
        self.src_proj = nn.Linear(cfg.n_bands, cfg.d_model)
        self.positions = SinusoidalPositions(cfg.d_model)
        self.in_dropout = nn.Dropout(cfg.dropout)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.prenet = Prenet(cfg.n_bands, cfg.prenet_dims, cfg.d_model,
                             cfg.prenet_dropout)
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.feat_out = nn.Linear(cfg.d_model, cfg.n_bands * cfg.reduction_factor)
        self.stop_out = nn.Linear(cfg.d_model, 1)
        self.postnet = CausalPostnet(cfg)

    # -- masks ------------------------------------------------------------
    @staticmethod
    def _pad_mask(lengths: torch.Tensor, t_max: int, dtype) -> torch.Tensor:
        idx = torch.arange(t_max, device=lengths.device)
        masked = idx[None, :] >= lengths[:, None]          # (N, Tk) True = pad
        out = torch.zeros(lengths.shape[0], 1, 1, t_max, dtype=dtype)
        out.masked_fill_(masked[:, None, None, :], NEG_INF)
        return out

    @staticmethod
    def _causal_mask(t: int, dtype) -> torch.Tensor:
        upper = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        out = torch.zeros(t, t, dtype=dtype)
        out.masked_fill_(upper, NEG_INF)
        return out[None, None]

    # -- forward paths ----------------------------------------------------
    def encode(self, source: torch.Tensor, source_lengths: torch.Tensor):
        mask = self._pad_mask(source_lengths, source.shape[1], source.dtype)
        x = self.src_proj(source) * math.sqrt(self.cfg.d_model)
        x = self.in_dropout(self.positions(x))
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x), mask

    def decode(self, dec_in: torch.Tensor, memory: torch.Tensor, memory_mask):
        causal = self._causal_mask(dec_in.shape[1], dec_in.dtype)
        x = self.prenet(dec_in) * math.sqrt(self.cfg.d_model)
        x = self.in_dropout(self.positions(x))
        attns = []
        for layer in self.decoder:
            x, cross = layer(x, memory, causal, memory_mask)
            attns.append(cross)
        return self.dec_norm(x), attns

    def teacher_forced(self, batch: S2SBatch) -> S2SOutput:
        cfg = self.cfg
        if batch.source.shape[2] != cfg.n_bands or batch.target.shape[2] != cfg.n_bands:
            raise Seq2SeqError("batch band count does not match config n_bands=%d"
                               % cfg.n_bands)
        r = cfg.reduction_factor
        tgt, t_max = batch.target, batch.target.shape[1]
        n_steps = (t_max + r - 1) // r
        pad = n_steps * r - t_max
        if pad:
            tgt = F.pad(tgt, (0, 0, 0, pad))
        thinned = tgt[:, r - 1::r]                                   # (N, S, B)
        dec_in = torch.cat([torch.zeros_like(thinned[:, :1]), thinned[:, :-1]], dim=1)

        memory, mem_mask = self.encode(batch.source, batch.source_lengths)
        states, _ = self.decode(dec_in, memory, mem_mask)
        pre = self.feat_out(states).view(tgt.shape[0], n_steps * r, cfg.n_bands)
        pre = pre[:, :t_max]
        stop_logits = self.stop_out(states).squeeze(-1)              # (N, S)
        post = pre + self.postnet(pre)
        return S2SOutput(pre=pre, post=post, stop_logits=stop_logits,
                         reduction_factor=r)


def s2s_forward_teacher_forced(model: TransformerConverter, batch: S2SBatch) -> S2SOutput:
    """Teacher-forced forward pass; causal at decoder-step granularity."""
    return model.teacher_forced(batch)


def s2s_loss(output: S2SOutput, batch: S2SBatch, stop_weight: float = 5.0) -> dict:
    """Masked L1 on pre- and post-postnet mels plus weighted stop BCE.

    Every term is normalized by its own valid-element count, so padding
    length never changes the loss.
    """
    r = output.reduction_factor
    n, t_max, n_bands = batch.target.shape
    dtype = output.pre.dtype
    idx = torch.arange(t_max)
    frame_mask = (idx[None, :] < batch.target_lengths[:, None]).to(dtype)   # (N, Tt)
    n_frames = frame_mask.sum()
    mel_pre = (torch.abs(output.pre - batch.target) * frame_mask[..., None]).sum() \
        / (n_frames * n_bands)
    mel_post = (torch.abs(output.post - batch.target) * frame_mask[..., None]).sum() \
        / (n_frames * n_bands)

    n_steps = output.stop_logits.shape[1]
    step_counts = torch.div(batch.target_lengths + r - 1, r, rounding_mode="floor")
    sidx = torch.arange(n_steps)
    step_mask = (sidx[None, :] < step_counts[:, None]).to(dtype)            # (N, S)
    step_labels = (sidx[None, :] >= (step_counts - 1)[:, None]).to(dtype)
    bce = F.binary_cross_entropy_with_logits(output.stop_logits, step_labels,
                                             reduction="none")
    weights = 1.0 + (stop_weight - 1.0) * step_labels
    stop = (bce * weights * step_mask).sum() / step_mask.sum()
    total = mel_pre + mel_post + stop
    return {"total": total, "mel_pre": mel_pre, "mel_post": mel_post, "stop": stop}


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------

def _mix_seed(seed: int, step: int, salt: int = 0) -> int:
    return (seed * 1_000_003 + step * 7919 + salt) % (2 ** 62)


def _pack_model(model: nn.Module, opt: torch.optim.Adam | None) -> tuple:
    arrays = {}
    scalars = {}
    for name, tensor in model.state_dict().items():
        arrays["param." + name] = tensor.detach().cpu().numpy()
    if opt is not None:
        params = [p for group in opt.param_groups for p in group["params"]]
        names = [n for n, _ in model.named_parameters()]
        for name, p in zip(names, params):
            state = opt.state.get(p)
            if not state:
                continue
            arrays["adam.exp_avg." + name] = state["exp_avg"].detach().cpu().numpy()
            arrays["adam.exp_avg_sq." + name] = state["exp_avg_sq"].detach().cpu().numpy()
            scalars["adam.step." + name] = float(state["step"])
    return arrays, scalars


def _unpack_model(model: nn.Module, opt: torch.optim.Adam | None,
                  ckpt: ModelCheckpoint, prefix: str = "") -> None:
    state = {}
    for name, tensor in model.state_dict().items():
        key = "param." + prefix + name
        if key not in ckpt.arrays:
            raise Seq2SeqError("checkpoint is missing parameter %s" % key)
        state[name] = torch.as_tensor(ckpt.arrays[key]).to(tensor.dtype)
    model.load_state_dict(state)
    if opt is None:
        return
    for name, p in model.named_parameters():
        avg_key = "adam.exp_avg." + prefix + name
        if avg_key not in ckpt.arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(ckpt.scalars["adam.step." + prefix + name]),
            "exp_avg": torch.as_tensor(ckpt.arrays[avg_key]).to(p.dtype),
            "exp_avg_sq": torch.as_tensor(ckpt.arrays["adam.exp_avg_sq." + prefix + name]).to(p.dtype),
        }


def model_from_checkpoint(ckpt: ModelCheckpoint) -> TransformerConverter:
    ckpt.require_stage("s2s")
    cfg = config_from_text(ckpt.config_text)
    model = TransformerConverter(cfg)
    _unpack_model(model, None, ckpt)
    model.eval()
    return model


def config_from_text(text: str) -> S2SConfig:
    kwargs = {}
    type_by_name = {f.name: f for f in fields(S2SConfig)}
    for line in text.splitlines():
        name, _, value = line.partition("=")
        if name not in type_by_name:
            raise Seq2SeqError("unknown config key %r in checkpoint" % name)
        default = getattr(S2SConfig, name)
        if isinstance(default, tuple):
            kwargs[name] = tuple(int(x) for x in value.split(",") if x)
        elif isinstance(default, bool):
            kwargs[name] = value == "True"
        elif isinstance(default, int):
            kwargs[name] = int(value)
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return S2SConfig(**kwargs)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _warmup_lr(cfg: S2SConfig, step: int) -> float:
    return cfg.lr * min(1.0, (step + 1) / max(1, cfg.warmup_steps))


def _time_warp(frames: np.ndarray, rng, rate: float) -> np.ndarray:
    """Monotone time warp: frames are dropped or duplicated independently.

    The drop and duplicate probabilities are themselves drawn per call
    from [0, 2*rate], so the warp carries both local jitter and a global
    rate offset; the model must track content at a variable rate instead
    of copying positions one to one.
    """
    p_drop = rng.uniform(0.0, 2.0 * rate)
    p_dup = rng.uniform(0.0, 2.0 * rate)
    draws = rng.random(len(frames))
    keep = []
    for i, d in enumerate(draws):
        if d < p_drop:
            continue
        keep.append(i)
        if d > 1.0 - p_dup:
            keep.append(i)
    if not keep:
        return frames
    return frames[np.asarray(keep)]


def _train(model, items, cfg: S2SConfig, out_path: Path, *, stage_meta: dict,
           stats: dict, steps: int, seed: int, start_step: int = 0,
           opt: torch.optim.Adam | None = None, save_interval: int | None = None,
           augment=None) -> ModelCheckpoint:
    """Shared mini-batch loop for pretraining and fine-tuning.

    ``items`` is a list of (source_mel, target_mel) numpy pairs, already
    normalized.  One step samples ``cfg.batch_size`` items with
    replacement, deterministically from (seed, step).  ``augment``, when
    given, maps (rng, source, target) to the pair actually trained on.
    """
    if not items:
        raise Seq2SeqError("no training items")
    if opt is None:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_curve = list(stage_meta.get("loss_curve", []))
    log_rows = []

    def save(step_now: int) -> ModelCheckpoint:
        arrays, scalars = _pack_model(model, opt)
        meta = dict(stage_meta)
        meta["loss_curve"] = loss_curve
        meta["stats_speakers"] = stats_to_arrays(stats, arrays)
        ckpt = ModelCheckpoint(stage="s2s", step=step_now,
                               config_text=cfg.canonical_text(),
                               arrays=arrays, scalars=scalars, meta=meta)
        ckpt.save(out_path)
        return ckpt

    model.train()
    for step in range(start_step, steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, step]))
        torch.manual_seed(_mix_seed(seed, step))
        picks = rng.integers(0, len(items), size=cfg.batch_size)
        pairs = [items[i] for i in picks]
        if augment is not None:
            pairs = [augment(rng, s, t) for s, t in pairs]
        batch = make_batch([s for s, _ in pairs], [t for _, t in pairs])
        for group in opt.param_groups:
            group["lr"] = _warmup_lr(cfg, step)
        opt.zero_grad()
        losses = s2s_loss(model.teacher_forced(batch), batch, cfg.stop_weight)
        losses["total"].backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        loss_curve.append(float(losses["total"].item()))
        log_rows.append("%d\t%.8e\t%.8e\t%.8e\t%.8e" % (
            step, losses["total"].item(), losses["mel_pre"].item(),
            losses["mel_post"].item(), losses["stop"].item()))
        if save_interval and (step + 1) % save_interval == 0 and step + 1 < steps:
            save(step + 1)
    model.eval()
    ckpt = save(steps)
    log_path = out_path.with_suffix(".loss.tsv")
    mode = "a" if start_step > 0 and log_path.exists() else "w"
    with open(log_path, mode, encoding="utf-8") as f:
        for row in log_rows:
            f.write(row + "\n")
    return ckpt


def s2s_pretrain(index, cfg: S2SConfig, out, *, speaker: str, steps: int,
                 seed: int = 0, save_interval: int | None = None,
                 resume_from: ModelCheckpoint | None = None) -> ModelCheckpoint:
    """Autoencoder-style warm start: mel-to-mel reconstruction of one speaker."""
    utts = index.utterances_for(speaker, "train")
    if not utts:
        raise Seq2SeqError("pretraining speaker %s has no train utterances" % speaker)
    from .dsp import speaker_stats
    stats = {speaker: speaker_stats(index, speaker)}
    items = []
    for u in utts:
        m = normalize(melspec(u.samples, u.sample_rate), stats[speaker]).frames
        items.append((m, m))

    torch.manual_seed(_mix_seed(seed, 0, salt=17))
    model = TransformerConverter(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start_step = 0
    meta = {"kind": "pretrain", "speaker": speaker, "seed": seed}
    if resume_from is not None:
        resume_from.require_stage("s2s")
        resume_from.require_config(cfg.canonical_text())
        _unpack_model(model, opt, resume_from)
        start_step = resume_from.step
        meta = dict(resume_from.meta)
    augment = None
    if cfg.pretrain_warp > 0:
        def augment(rng, src, tgt):
            return _time_warp(src, rng, cfg.pretrain_warp), tgt
    return _train(model, items, cfg, Path(out), stage_meta=meta, stats=stats,
                  steps=steps, seed=seed, start_step=start_step, opt=opt,
                  save_interval=save_interval, augment=augment)


def s2s_finetune(pretrained: ModelCheckpoint, pairs, cfg: S2SConfig, out, *,
                 steps: int, seed: int = 0, save_interval: int | None = None,
                 resume_from: ModelCheckpoint | None = None) -> ModelCheckpoint:
    """Many-to-one fine-tuning on (source, target) utterance pairs.

    All pair targets must belong to one dysarthric target speaker; the
    model is initialized from the pretraining checkpoint.
    """
    if not pairs:
        raise Seq2SeqError("no training pairs")
    targets = {t.speaker_id for _, t in pairs}
    if len(targets) != 1:
        raise Seq2SeqError("pairs span multiple target speakers: %s"
                           % ", ".join(sorted(targets)))
    target = targets.pop()
    pretrained.require_stage("s2s")
    pretrained.require_config(cfg.canonical_text())

    from .dsp import STD_FLOOR
    by_speaker: dict = {}
    for s, t in pairs:
        by_speaker.setdefault(s.speaker_id, {})[s.utt_id] = s
        by_speaker.setdefault(t.speaker_id, {})[t.utt_id] = t
    stats = {}
    for sid, utts in sorted(by_speaker.items()):
        frames = np.concatenate([melspec(u.samples, u.sample_rate).frames
                                 for u in utts.values()])
        stats[sid] = FeatureStats(speaker_id=sid, mean=frames.mean(axis=0),
                                  std=np.maximum(frames.std(axis=0), STD_FLOOR))
    mel_cache: dict = {}

    def norm_mel(u):
        if u.utt_id not in mel_cache:
            mel_cache[u.utt_id] = normalize(
                melspec(u.samples, u.sample_rate), stats[u.speaker_id]).frames
        return mel_cache[u.utt_id]

    items = [(norm_mel(s), norm_mel(t)) for s, t in pairs]
    model = TransformerConverter(cfg)
    ft_cfg = replace(cfg, lr=cfg.finetune_lr)
    opt = torch.optim.Adam(model.parameters(), lr=ft_cfg.lr)
    meta = {
        "kind": "finetune",
        "target_speaker": target,
        "source_speakers": sorted({s.speaker_id for s, _ in pairs}),
        "seed": seed,
    }
    start_step = 0
    if resume_from is not None:
        resume_from.require_stage("s2s")
        resume_from.require_config(ft_cfg.canonical_text())
        _unpack_model(model, opt, resume_from)
        start_step = resume_from.step
        meta = dict(resume_from.meta)
    else:
        _unpack_model(model, None, pretrained)
    augment = None
    if cfg.finetune_warp > 0:
        def augment(rng, src, tgt):
            return _time_warp(src, rng, cfg.finetune_warp), tgt
    return _train(model, items, ft_cfg, Path(out), stage_meta=meta, stats=stats,
                  steps=steps, seed=seed, start_step=start_step, opt=opt,
                  save_interval=save_interval, augment=augment)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class S2SConversion:
    mel: np.ndarray            # (T, B) in the target speaker's normalized space
    truncated: bool
    n_steps: int
    stop_probs: np.ndarray     # (n_steps,)
    attention: list            # per decoder layer: (heads, n_steps, Ts)


def s2s_convert(ckpt_or_model, source_mel) -> S2SConversion:
    """Greedy autoregressive conversion of one normalized source mel.

    Decoding stops when the stop probability exceeds the configured
    threshold or when max_decode_frames is reached, in which case the
    result is flagged truncated.
    """
    if isinstance(ckpt_or_model, ModelCheckpoint):
        model = model_from_checkpoint(ckpt_or_model)
    else:
        model = ckpt_or_model
    cfg = model.cfg
    if isinstance(source_mel, MelSpectrogram):
        frames = source_mel.frames.astype(np.float32)
    else:
        frames = np.asarray(source_mel, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise Seq2SeqError("source mel must be a nonempty (T, B) matrix")
    r = cfg.reduction_factor
    max_steps = max(1, cfg.max_decode_frames // r)

    model.eval()
    with torch.no_grad():
        src = torch.as_tensor(frames)[None]
        src_len = torch.tensor([frames.shape[0]])
        memory, mem_mask = model.encode(src, src_len)
        dec_in = torch.zeros(1, 1, cfg.n_bands)
        chunks = []
        stop_probs = []
        truncated = True
        attns = None
        for _ in range(max_steps):
            states, attns = model.decode(dec_in, memory, mem_mask)
            last = states[:, -1]
            chunk = model.feat_out(last).view(r, cfg.n_bands)
            chunks.append(chunk)
            prob = torch.sigmoid(model.stop_out(last)).item()
            stop_probs.append(prob)
            if prob > cfg.stop_threshold:
                truncated = False
                break
            dec_in = torch.cat([dec_in, chunk[-1].view(1, 1, -1)], dim=1)
        pre = torch.cat(chunks, dim=0)[None]
        post = pre + model.postnet(pre)
        attention = [a[0].numpy() for a in attns] if attns is not None else []
    return S2SConversion(mel=post[0].numpy().astype(np.float64),
                         truncated=truncated, n_steps=len(chunks),
                         stop_probs=np.array(stop_probs), attention=attention)
