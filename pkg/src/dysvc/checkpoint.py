"""Versioned checkpoint container shared by both conversion stages.

File layout::

    bytes 0..7    magic b"VCCKPT01"
    bytes 8..15   little-endian uint64: manifest length in bytes
    manifest      canonical JSON (sorted keys)
    data          raw little-endian float32 arrays at the offsets the
                  manifest declares, each guarded by a CRC32

The manifest records the stage tag ("s2s" or "vae"), the training step,
a canonical key=value snapshot of the model config, named array entries
(name, shape, offset, nbytes, crc32), JSON-able scalars (optimizer step
counts and the like) and free-form metadata such as speaker lists and
per-speaker feature statistics.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VCCKPT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclass
class ModelCheckpoint:
    stage: str                       # "s2s" | "vae"
    step: int
    config_text: str                 # canonical key=value lines
    arrays: dict = field(default_factory=dict)   # name -> float32 ndarray
    scalars: dict = field(default_factory=dict)  # name -> int | float | str
    meta: dict = field(default_factory=dict)     # JSON-able extras
    format_version: int = FORMAT_VERSION
    path: Path | None = None

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = []
        blobs = []
        offset = 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            blob = arr.tobytes()
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
            })
            blobs.append(blob)
            offset += len(blob)
        manifest = {
            "format_version": self.format_version,
            "stage": self.stage,
            "step": self.step,
            "config": self.config_text,
            "arrays": entries,
            "scalars": self.scalars,
            "meta": self.meta,
        }
        manifest_bytes = json.dumps(manifest, sort_keys=True,
                                    separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(len(manifest_bytes).to_bytes(8, "little"))
            f.write(manifest_bytes)
            for blob in blobs:
                f.write(blob)
        self.path = path
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != MAGIC:
            raise CheckpointError("%s: not a checkpoint file (bad magic)" % path)
        manifest_len = int.from_bytes(raw[8:16], "little")
        try:
            manifest = json.loads(raw[16:16 + manifest_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError("%s: corrupt manifest: %s" % (path, exc)) from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError("%s: unsupported format version %r"
                                  % (path, manifest.get("format_version")))
        data = raw[16 + manifest_len:]
        arrays = {}
        for entry in manifest["arrays"]:
            blob = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
            if len(blob) != entry["nbytes"]:
                raise CheckpointError("%s: truncated array %s" % (path, entry["name"]))
            if (zlib.crc32(blob) & 0xFFFFFFFF) != entry["crc32"]:
                raise CheckpointError("%s: checksum mismatch for array %s"
                                      % (path, entry["name"]))
            arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4").reshape(
                entry["shape"]).copy()
        return cls(stage=manifest["stage"], step=manifest["step"],
                   config_text=manifest["config"], arrays=arrays,
                   scalars=manifest.get("scalars", {}), meta=manifest.get("meta", {}),
                   format_version=manifest["format_version"], path=path)

    def require_stage(self, stage: str) -> None:
        if self.stage != stage:
            raise CheckpointError("expected a %r checkpoint, got %r (%s)"
                                  % (stage, self.stage, self.path))

    def require_config(self, config_text: str) -> None:
        if self.config_text != config_text:
            raise CheckpointError(
                "config snapshot mismatch at resume; checkpoint was trained with a "
                "different configuration (%s)" % self.path)


def stats_to_arrays(stats_by_speaker: dict, arrays: dict) -> list:
    """Embed per-speaker FeatureStats into a checkpoint array dict.

    Cast to float32 here so the in-memory checkpoint matches its stored
    form exactly.
    """
    for sid, st in sorted(stats_by_speaker.items()):
        arrays["stats.%s.mean" % sid] = st.mean.astype("<f4")
        arrays["stats.%s.std" % sid] = st.std.astype("<f4")
    return sorted(stats_by_speaker)


def stats_from_arrays(ckpt: ModelCheckpoint, speaker_ids) -> dict:
    """Recover per-speaker FeatureStats embedded by :func:`stats_to_arrays`."""
    from .dsp import FeatureStats   # local import to avoid a cycle

    out = {}
    for sid in speaker_ids:
        try:
            mean = ckpt.arrays["stats.%s.mean" % sid]
            std = ckpt.arrays["stats.%s.std" % sid]
        except KeyError:
            raise CheckpointError("checkpoint %s has no feature stats for speaker %s"
                                  % (ckpt.path, sid)) from None
        out[sid] = FeatureStats(speaker_id=sid, mean=mean.astype(np.float64),
                                std=std.astype(np.float64))
    return out
