"""Stage 2: nonparallel, length-preserving VQVAE speaker converter.

A convolutional encoder produces two latent streams (a stride-2 coarse
stream and a stride-1 fine stream), each snapped to its own learned
codebook with a straight-through estimator.  The decoder reconstructs
mel frames conditioned on a trained speaker embedding, so converting a
mel simply means decoding its quantized latents with another speaker's
embedding.  The output frame count always equals the input frame count.

Training runs on normal speakers only and combines L1 reconstruction,
codebook/commitment terms, a cyclic reconstruction loss through a
second speaker, and (after a burn-in) an adversarial frame-wise speaker
classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import ModelCheckpoint, stats_to_arrays
from .dsp import MelSpectrogram, melspec, normalize, speaker_stats


class FramewiseError(ValueError):
    pass


@dataclass(frozen=True)
class VAEConfig:
    enc_channels: tuple = (128, 128)
    latent_dim: int = 64
    codebook_size: int = 128
    commitment_beta: float = 0.25
    cyclic_weight: float = 1.0
    adversarial_weight: float = 0.1
    adversarial_start: int = 5000
    speaker_dim: int = 32
    kernel: int = 5
    n_bands: int = 80
    lr: float = 1e-3
    batch_size: int = 8
    crop_frames: int = 64
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.codebook_size < 2:
            raise FramewiseError("codebook_size must be >= 2")
        for name in ("commitment_beta", "cyclic_weight", "adversarial_weight"):
            if getattr(self, name) < 0:
                raise FramewiseError("%s must be >= 0" % name)

    def canonical_text(self) -> str:
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parts.append("%s=%s" % (f.name, v))
        return "\n".join(parts)


class VectorQuantizer(nn.Module):
    """One codebook level with straight-through gradients.

    Nearest codeword by squared Euclidean distance; exact ties pick the
    lowest index.  Usage counts accumulate per selected codeword while
    in training mode.
    """

    def __init__(self, level: int, codebook_size: int, latent_dim: int):
        super().__init__()
        self.level = level
        self.embeddings = nn.Parameter(torch.randn(codebook_size, latent_dim) * 0.5)
        self.register_buffer("usage", torch.zeros(codebook_size))

    def forward(self, z: torch.Tensor):
        """z: (..., latent_dim) -> (indices, quantized, codebook_loss, commit_loss)."""
        if z.shape[-1] != self.embeddings.shape[1]:
            raise FramewiseError("latent dim mismatch: %d vs codebook %d"
                                 % (z.shape[-1], self.embeddings.shape[1]))
        flat = z.reshape(-1, z.shape[-1])
        diff = flat[:, None, :] - self.embeddings[None, :, :]
        dist = (diff * diff).sum(-1)                       # (M, K)
        k = self.embeddings.shape[0]
        min_d = dist.min(dim=1, keepdim=True).values
        candidates = torch.where(dist <= min_d, torch.arange(k, device=z.device),
                                 torch.full((k,), k, dtype=torch.long, device=z.device))
        indices = candidates.min(dim=1).values
        chosen = self.embeddings[indices]
        codebook_loss = ((chosen - flat.detach()) ** 2).mean()
        commit_loss = ((flat - chosen.detach()) ** 2).mean()
        quantized = flat + (chosen - flat).detach()        # straight-through
        if self.training:
            with torch.no_grad():
                self.usage += torch.bincount(indices, minlength=k).to(self.usage.dtype)
        return (indices.view(z.shape[:-1]), quantized.view(z.shape),
                codebook_loss, commit_loss)


def vq_quantize(z, quantizer: VectorQuantizer):
    """Quantize latent rows against one codebook level.

    Returns (indices, quantized, losses) where losses carries the
    codebook term ||sg(z) - e||^2 and the beta-free commitment term
    ||z - sg(e)||^2; gradients flow to z as if quantization were the
    identity.
    """
    z_t = torch.as_tensor(z)
    indices, quantized, codebook_loss, commit_loss = quantizer(z_t)
    return indices, quantized, {"codebook": codebook_loss, "commitment": commit_loss}


class SpeakerDiscriminator(nn.Module):
    """Frame-wise speaker classifier with a 9-frame receptive field."""

    def __init__(self, n_bands: int, n_speakers: int, channels: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(n_bands, channels, 5, padding=2), nn.LeakyReLU(0.2),
            nn.Conv1d(channels, channels, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv1d(channels, n_speakers, 3, padding=1))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # (N, T, B) -> per-frame logits (N, T, n_speakers)
        return self.net(mel.transpose(1, 2)).transpose(1, 2)


class VQVAEModel(nn.Module):
    def __init__(self, cfg: VAEConfig, speakers):
        super().__init__()
        self.cfg = cfg
        self.speakers = tuple(speakers)
        if not self.speakers:
            raise FramewiseError("need at least one training speaker")
        self.speaker_index = {s: i for i, s in enumerate(self.speakers)}
        self.embed_speaker = nn.Embedding(len(self.speakers), cfg.speaker_dim)
        k, pad = cfg.kernel, cfg.kernel // 2
        enc = []
        prev = cfg.n_bands
        for ch in cfg.enc_channels:
            enc += [nn.Conv1d(prev, ch, k, padding=pad), nn.ReLU()]
            prev = ch
        self.encoder = nn.Sequential(*enc)
        self.to_fine = nn.Conv1d(prev, cfg.latent_dim, 1)
        self.to_coarse = nn.Conv1d(prev, cfg.latent_dim, 3, stride=2, padding=1)
        self.vq_coarse = VectorQuantizer(0, cfg.codebook_size, cfg.latent_dim)
        self.vq_fine = VectorQuantizer(1, cfg.codebook_size, cfg.latent_dim)
        dec = []
        prev = 2 * cfg.latent_dim + cfg.speaker_dim
        for ch in reversed(cfg.enc_channels):
            dec += [nn.Conv1d(prev, ch, k, padding=pad), nn.ReLU()]
            prev = ch
        dec.append(nn.Conv1d(prev, cfg.n_bands, k, padding=pad))
        self.decoder = nn.Sequential(*dec)

    def speaker_id_to_index(self, speaker_id: str) -> int:
        try:
            return self.speaker_index[speaker_id]
        except KeyError:
            raise FramewiseError("unknown speaker %r; trained speakers: %s"
                                 % (speaker_id, ", ".join(self.speakers))) from None

    # soft bounds keep every loss term finite through the cyclic
    # decode-encode composition, which otherwise can run away early in
    # training when the codebook lags behind fast-moving latents
    LATENT_BOUND = 4.0
    OUTPUT_BOUND = 8.0

    def encode(self, mel: torch.Tensor):
        """mel: (N, T, B) -> fine latents (N, T, D), coarse latents (N, ceil(T/2), D)."""
        h = self.encoder(mel.transpose(1, 2))
        z_fine = self.to_fine(h).transpose(1, 2)
        z_coarse = self.to_coarse(h).transpose(1, 2)
        b = self.LATENT_BOUND
        return b * torch.tanh(z_fine / b), b * torch.tanh(z_coarse / b)

    def quantize(self, z_fine, z_coarse):
        idx_c, q_coarse, cb_c, cm_c = self.vq_coarse(z_coarse)
        idx_f, q_fine, cb_f, cm_f = self.vq_fine(z_fine)
        losses = {"codebook": cb_c + cb_f,
                  "commitment": self.cfg.commitment_beta * (cm_c + cm_f)}
        return {"coarse": idx_c, "fine": idx_f}, q_fine, q_coarse, losses

    def decode(self, q_fine, q_coarse, speaker_idx) -> torch.Tensor:
        n, t, _ = q_fine.shape
        up = torch.repeat_interleave(q_coarse, 2, dim=1)[:, :t]
        spk = self.embed_speaker(speaker_idx)[:, None, :].expand(n, t, -1)
        h = torch.cat([q_fine, up, spk], dim=-1)
        out = self.decoder(h.transpose(1, 2)).transpose(1, 2)
        b = self.OUTPUT_BOUND
        return b * torch.tanh(out / b)

    def forward(self, mel: torch.Tensor, speaker_idx: torch.Tensor):
        z_fine, z_coarse = self.encode(mel)
        indices, q_fine, q_coarse, vq_losses = self.quantize(z_fine, z_coarse)
        recon = self.decode(q_fine, q_coarse, speaker_idx)
        return recon, indices, vq_losses


def _as_mel_tensor(mel, dtype=torch.float32) -> torch.Tensor:
    if isinstance(mel, MelSpectrogram):
        mel = mel.frames
    t = torch.as_tensor(np.asarray(mel), dtype=dtype)
    if t.ndim == 2:
        t = t[None]
    return t


def vae_forward(model: VQVAEModel, mel, speaker_id: str):
    """Reconstruct one (T, B) mel; returns (recon, per-level indices, losses)."""
    x = _as_mel_tensor(mel, dtype=next(model.parameters()).dtype)
    idx = torch.tensor([model.speaker_id_to_index(speaker_id)])
    recon, indices, vq_losses = model(x, idx)
    losses = dict(vq_losses)
    losses["recon_l1"] = torch.abs(recon - x).mean()
    losses["total"] = losses["recon_l1"] + losses["codebook"] + losses["commitment"]
    return recon[0], {k: v[0] for k, v in indices.items()}, losses


def vae_cyclic_loss(model: VQVAEModel, mel, speaker_a: str, speaker_b: str) -> torch.Tensor:
    """L1 after the cycle decode(b) -> re-encode -> decode(a), against the input."""
    x = _as_mel_tensor(mel, dtype=next(model.parameters()).dtype)
    idx_a = torch.tensor([model.speaker_id_to_index(speaker_a)])
    idx_b = torch.tensor([model.speaker_id_to_index(speaker_b)])
    z_f, z_c = model.encode(x)
    _, qf, qc, _ = model.quantize(z_f, z_c)
    through_b = model.decode(qf, qc, idx_b)
    z_f2, z_c2 = model.encode(through_b)
    _, qf2, qc2, _ = model.quantize(z_f2, z_c2)
    back = model.decode(qf2, qc2, idx_a)
    return torch.abs(back - x).mean()


def _generator_losses(model: VQVAEModel, mels: torch.Tensor, spk_idx: torch.Tensor,
                      other_idx: torch.Tensor, cfg: VAEConfig,
                      disc: SpeakerDiscriminator | None = None,
                      adv_active: bool = False) -> dict:
    """Full generator objective for one batch; the adversarial term is
    included only when a discriminator is supplied, adv_active is set and
    the weight is nonzero, so a zero weight reproduces the plain step
    exactly."""
    recon, _, vq_losses = model(mels, spk_idx)
    losses = dict(vq_losses)
    losses["recon_l1"] = torch.abs(recon - mels).mean()
    total = losses["recon_l1"] + losses["codebook"] + losses["commitment"]
    converted = None
    if cfg.cyclic_weight > 0:
        z_f, z_c = model.encode(mels)
        _, qf, qc, _ = model.quantize(z_f, z_c)
        converted = model.decode(qf, qc, other_idx)
        z_f2, z_c2 = model.encode(converted)
        _, qf2, qc2, _ = model.quantize(z_f2, z_c2)
        back = model.decode(qf2, qc2, spk_idx)
        losses["cyclic"] = torch.abs(back - mels).mean()
        total = total + cfg.cyclic_weight * losses["cyclic"]
    if disc is not None and adv_active and cfg.adversarial_weight > 0:
        if converted is None:
            z_f, z_c = model.encode(mels)
            _, qf, qc, _ = model.quantize(z_f, z_c)
            converted = model.decode(qf, qc, other_idx)
        logits = disc(converted)
        target = other_idx[:, None].expand(logits.shape[:2])
        losses["adversarial"] = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), target.reshape(-1))
        total = total + cfg.adversarial_weight * losses["adversarial"]
    losses["total"] = total
    return losses


def vae_adversarial_step(model: VQVAEModel, disc: SpeakerDiscriminator,
                         mels: torch.Tensor, spk_idx: torch.Tensor,
                         other_idx: torch.Tensor, cfg: VAEConfig, *,
                         gen_opt=None, disc_opt=None, adv_active: bool = True):
    """One alternating adversarial step: discriminator first, generator second.

    The discriminator trains on detached decoder outputs (real frames
    labeled by their true speaker, converted frames labeled by their
    source speaker); the generator is pushed to make converted frames
    classify as the conditioning speaker.  Each optimizer only ever
    touches its own parameter set.  Pass ``gen_opt`` / ``disc_opt`` as
    None to skip that update.
    """
    z_f, z_c = model.encode(mels)
    _, qf, qc, _ = model.quantize(z_f, z_c)
    converted = model.decode(qf, qc, other_idx).detach()
    real_logits = disc(mels)
    fake_logits = disc(converted)
    n_cls = real_logits.shape[-1]
    disc_loss = (F.cross_entropy(real_logits.reshape(-1, n_cls),
                                 spk_idx[:, None].expand(real_logits.shape[:2]).reshape(-1))
                 + F.cross_entropy(fake_logits.reshape(-1, n_cls),
                                   spk_idx[:, None].expand(fake_logits.shape[:2]).reshape(-1)))
    disc_losses = {"total": disc_loss}
    if disc_opt is not None:
        disc_opt.zero_grad()
        disc_loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(disc.parameters(), cfg.grad_clip)
        disc_opt.step()

    gen_losses = _generator_losses(model, mels, spk_idx, other_idx, cfg,
                                   disc=disc, adv_active=adv_active)
    if gen_opt is not None:
        gen_opt.zero_grad()
        gen_losses["total"].backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        gen_opt.step()
    return gen_losses, disc_losses


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _mix_seed(seed: int, step: int, salt: int = 0) -> int:
    return (seed * 1_000_003 + step * 7919 + salt) % (2 ** 62)


def _pack(model, disc, gen_opt, disc_opt):
    arrays, scalars = {}, {}

    def pack_module(module, opt, prefix):
        for name, tensor in module.state_dict().items():
            arrays["param." + prefix + name] = tensor.detach().cpu().numpy()
        if opt is None:
            return
        names = [n for n, _ in module.named_parameters()]
        params = [p for group in opt.param_groups for p in group["params"]]
        for name, p in zip(names, params):
            state = opt.state.get(p)
            if not state:
                continue
            arrays["adam.exp_avg." + prefix + name] = state["exp_avg"].detach().cpu().numpy()
            arrays["adam.exp_avg_sq." + prefix + name] = state["exp_avg_sq"].detach().cpu().numpy()
            scalars["adam.step." + prefix + name] = float(state["step"])

    pack_module(model, gen_opt, "gen.")
    pack_module(disc, disc_opt, "disc.")
    return arrays, scalars


def _unpack(module, opt, ckpt: ModelCheckpoint, prefix: str):
    state = {}
    for name, tensor in module.state_dict().items():
        key = "param." + prefix + name
        if key not in ckpt.arrays:
            raise FramewiseError("checkpoint is missing parameter %s" % key)
        state[name] = torch.as_tensor(ckpt.arrays[key]).to(tensor.dtype)
    module.load_state_dict(state)
    if opt is None:
        return
    for name, p in module.named_parameters():
        avg_key = "adam.exp_avg." + prefix + name
        if avg_key not in ckpt.arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(ckpt.scalars["adam.step." + prefix + name]),
            "exp_avg": torch.as_tensor(ckpt.arrays[avg_key]).to(p.dtype),
            "exp_avg_sq": torch.as_tensor(
                ckpt.arrays["adam.exp_avg_sq." + prefix + name]).to(p.dtype),
        }


def model_from_checkpoint(ckpt: ModelCheckpoint) -> VQVAEModel:
    ckpt.require_stage("vae")
    cfg = config_from_text(ckpt.config_text)
    model = VQVAEModel(cfg, ckpt.meta["speakers"])
    _unpack(model, None, ckpt, "gen.")
    model.eval()
    return model


def config_from_text(text: str) -> VAEConfig:
    kwargs = {}
    names = {f.name for f in fields(VAEConfig)}
    for line in text.splitlines():
        name, _, value = line.partition("=")
        if name not in names:
            raise FramewiseError("unknown config key %r in checkpoint" % name)
        default = getattr(VAEConfig, name)
        if isinstance(default, tuple):
            kwargs[name] = tuple(int(x) for x in value.split(",") if x)
        elif isinstance(default, int):
            kwargs[name] = int(value)
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return VAEConfig(**kwargs)


def vae_train(index, cfg: VAEConfig, out, *, speakers=None, steps: int,
              seed: int = 0, resume_from: ModelCheckpoint | None = None) -> ModelCheckpoint:
    """Train the VQVAE on normal speakers only.

    Any dysarthric speaker in the training set is rejected by name; the
    model must never see pathological data so that conversion restores a
    healthy identity.
    """
    if speakers is None:
        speakers = index.speakers_in_group("normal")
    speakers = sorted(speakers)
    for sid in speakers:
        if sid not in index.speakers:
            raise FramewiseError("unknown speaker %s" % sid)
        if index.speakers[sid].group != "normal":
            raise FramewiseError("speaker %s is dysarthric; the frame-wise model "
                                 "trains on normal speakers only" % sid)
    if len(speakers) < 2:
        raise FramewiseError("need at least 2 training speakers for conversion")

    stats = {sid: speaker_stats(index, sid) for sid in speakers}
    items = []   # (speaker_position, normalized mel frames)
    for pos, sid in enumerate(speakers):
        for u in index.utterances_for(sid, "train"):
            m = normalize(melspec(u.samples, u.sample_rate), stats[sid]).frames
            items.append((pos, m.astype(np.float32)))
    if not items:
        raise FramewiseError("no training utterances for speakers %s" % speakers)

    torch.manual_seed(_mix_seed(seed, 0, salt=23))
    model = VQVAEModel(cfg, speakers)
    disc = SpeakerDiscriminator(cfg.n_bands, len(speakers))
    gen_opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr)
    start_step = 0
    loss_curve = []
    if resume_from is not None:
        resume_from.require_stage("vae")
        resume_from.require_config(cfg.canonical_text())
        if list(resume_from.meta["speakers"]) != speakers:
            raise FramewiseError("speaker set changed between checkpoint and resume")
        _unpack(model, gen_opt, resume_from, "gen.")
        _unpack(disc, disc_opt, resume_from, "disc.")
        start_step = resume_from.step
        loss_curve = list(resume_from.meta.get("loss_curve", []))

    out_path = Path(out)
    log_rows = []
    model.train()
    disc.train()
    for step in range(start_step, steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, step]))
        torch.manual_seed(_mix_seed(seed, step))
        picks = rng.integers(0, len(items), size=cfg.batch_size)
        crops = []
        spk = []
        other = []
        for i in picks:
            pos, m = items[i]
            if len(m) > cfg.crop_frames:
                start = int(rng.integers(0, len(m) - cfg.crop_frames + 1))
                crop = m[start:start + cfg.crop_frames]
            else:
                crop = np.pad(m, ((0, cfg.crop_frames - len(m)), (0, 0)), mode="wrap")
            crops.append(crop)
            spk.append(pos)
            other.append(int((pos + 1 + rng.integers(0, len(speakers) - 1)) % len(speakers)))
        mels = torch.as_tensor(np.stack(crops))
        spk_idx = torch.tensor(spk)
        other_idx = torch.tensor(other)
        adv_active = (step >= cfg.adversarial_start)
        if adv_active:
            gen_losses, _ = vae_adversarial_step(model, disc, mels, spk_idx, other_idx,
                                                 cfg, gen_opt=gen_opt, disc_opt=disc_opt)
        else:
            gen_losses = _generator_losses(model, mels, spk_idx, other_idx, cfg)
            gen_opt.zero_grad()
            gen_losses["total"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            gen_opt.step()
        loss_curve.append(float(gen_losses["total"].item()))
        log_rows.append("%d\t%.8e\t%.8e" % (step, gen_losses["total"].item(),
                                            gen_losses["recon_l1"].item()))
    model.eval()
    disc.eval()

    arrays, scalars = _pack(model, disc, gen_opt, disc_opt)
    meta = {
        "kind": "vae",
        "speakers": speakers,
        "seed": seed,
        "loss_curve": loss_curve,
        "stats_speakers": stats_to_arrays(stats, arrays),
    }
    ckpt = ModelCheckpoint(stage="vae", step=steps, config_text=cfg.canonical_text(),
                           arrays=arrays, scalars=scalars, meta=meta)
    ckpt.save(out_path)
    log_path = out_path.with_suffix(".loss.tsv")
    mode = "a" if start_step > 0 and log_path.exists() else "w"
    with open(log_path, mode, encoding="utf-8") as f:
        for row in log_rows:
            f.write(row + "\n")
    return ckpt


def vae_convert(ckpt_or_model, mel, target_speaker_id: str) -> np.ndarray:
    """Encode, quantize and decode with the target speaker's embedding.

    The input must be normalized with the input speaker's stats; the
    output lives in the target speaker's normalized space and has
    exactly the input's frame count.
    """
    if isinstance(ckpt_or_model, ModelCheckpoint):
        model = model_from_checkpoint(ckpt_or_model)
    else:
        model = ckpt_or_model
    x = _as_mel_tensor(mel, dtype=next(model.parameters()).dtype)
    idx = torch.tensor([model.speaker_id_to_index(target_speaker_id)])
    model.eval()
    with torch.no_grad():
        z_f, z_c = model.encode(x)
        _, qf, qc, _ = model.quantize(z_f, z_c)
        out = model.decode(qf, qc, idx)
    result = out[0].numpy().astype(np.float64)
    assert result.shape[0] == x.shape[1]
    return result


def frozen_vq_state(model: VQVAEModel, mel, speaker_id: str) -> dict:
    """Capture codeword assignments and straight-through offsets.

    The straight-through backward pass computes the exact gradient of a
    surrogate objective in which the quantization offset (e - z) and the
    cross-detached copies in the codebook/commitment terms are held
    constant.  Freezing those constants at the current parameters gives
    a smooth function whose value and gradient match the real forward
    pass at this point, which makes central finite differences valid.
    """
    x = _as_mel_tensor(mel, dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        z_f, z_c = model.encode(x)
        idx_f, q_f, _, _ = model.vq_fine(z_f)
        idx_c, q_c, _, _ = model.vq_coarse(z_c)
    return {
        "speaker_idx": torch.tensor([model.speaker_id_to_index(speaker_id)]),
        "idx_f": idx_f, "idx_c": idx_c,
        "z_f0": z_f.clone(), "z_c0": z_c.clone(),
        "off_f": (q_f - z_f).clone(), "off_c": (q_c - z_c).clone(),
    }


def frozen_vq_loss(model: VQVAEModel, mel, state: dict) -> torch.Tensor:
    """Surrogate total loss with quantization constants from ``state``.

    At the parameters where ``state`` was captured this equals the
    :func:`vae_forward` total and has the same gradient; away from them
    it stays smooth, so it is the right target for finite differences.
    """
    x = _as_mel_tensor(mel, dtype=next(model.parameters()).dtype)
    z_f, z_c = model.encode(x)
    q_f = z_f + state["off_f"]
    q_c = z_c + state["off_c"]
    recon = model.decode(q_f, q_c, state["speaker_idx"])
    e_f = model.vq_fine.embeddings[state["idx_f"].reshape(-1)].view(z_f.shape)
    e_c = model.vq_coarse.embeddings[state["idx_c"].reshape(-1)].view(z_c.shape)
    codebook = ((state["z_f0"] - e_f) ** 2).mean() + ((state["z_c0"] - e_c) ** 2).mean()
    commit = ((z_f - (state["z_f0"] + state["off_f"])) ** 2).mean() \
        + ((z_c - (state["z_c0"] + state["off_c"])) ** 2).mean()
    recon_l1 = torch.abs(recon - x).mean()
    return recon_l1 + codebook + model.cfg.commitment_beta * commit


def codebook_usage_fraction(model: VQVAEModel) -> dict:
    """Fraction of codewords with nonzero training usage, per level."""
    return {
        "coarse": float((model.vq_coarse.usage > 0).to(torch.float64).mean().item()),
        "fine": float((model.vq_fine.usage > 0).to(torch.float64).mean().item()),
    }
