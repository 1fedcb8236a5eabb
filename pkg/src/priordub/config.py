"""Project configuration: one INI file, every key documented with its default.

Each pipeline stage hashes only the sections it reads, so editing the
``[dub]`` section does not invalidate tracking.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .face_model import ConfigurationError

# section -> key -> (default, help)
SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "project": {
        "seed": ("0", "seed for every stochastic step"),
    },
    "model": {
        "assets": ("synthetic", "face model: 'synthetic' (procedural) or a path to a saved assets .npz"),
        "asset_seed": ("0", "seed of the procedural face model"),
        "vertices": ("512", "vertex count of the procedural face model"),
    },
    "track": {
        "landmarks": ("sidecar", "'sidecar' reads <video>.landmarks.npz written next to the input video, "
                                 "'none' tracks photometrically only, anything else is a path to an .npz"),
        "shape_backend": ("landmarks", "stage-1 shape estimate: 'landmarks' (ridge regression) or 'zero'"),
        "working_resolution": ("0", "fit at this width (0 keeps the source size); the camera is rescaled back"),
        "lambda_photo": ("1.0", "photometric weight"),
        "lambda_land": ("2e-3", "landmark weight at the reference width"),
        "land_ref_width": ("64", "width at which lambda_land applies as given; it scales by (ref / width)^2, 0 disables"),
        "lambda_reg": ("1e-4", "regulariser weight"),
        "iters_stage2": ("500", "joint texture/camera/lighting iterations"),
        "iters_stage3": ("300", "per-frame iteration cap"),
        "stage2_frames": ("8", "frames sampled for stage 2"),
    },
    "preprocess": {
        "resolution": ("32", "crop resolution fed to the renderer"),
        "margin": ("0.1", "crop margin as a fraction of the jaw-sweep box"),
        "n_mels": ("16", "audio feature channels per frame"),
    },
    "renderer": {
        "preset": ("tiny", "renderer size: tiny, reduced or default"),
        "window": ("", "frames per window T (blank: preset value)"),
        "channels": ("", "neural texture channels C (blank: preset value)"),
        "n_refs": ("", "reference frames R (blank: preset value)"),
        "mode": ("stacked", "'stacked' concatenates window frames, 'shared' runs frames through shared weights"),
    },
    "train": {
        "iterations": ("2000", "optimisation steps"),
        "batch_size": ("4", "windows per step (even, for the 1:1 mixed sampler)"),
        "lr_renderer": ("1e-3", "renderer learning rate"),
        "lr_texture": ("1e-2", "neural texture learning rate"),
        "lr_disc": ("1e-3", "discriminator learning rate"),
        "lambda_l1": ("1.0", "weighted L1 weight"),
        "lambda_vgg": ("0.1", "perceptual weight"),
        "lambda_reg": ("0.1", "texture regulariser weight"),
        "lambda_adv": ("0.01", "adversarial weight"),
        "feature_backend": ("random_conv", "perceptual features: random_conv, vgg19 or identity"),
        "use_gan": ("true", "train with the discriminator"),
        "use_audio": ("true", "condition the renderer on audio features"),
        "val_every": ("10", "validation cadence in iterations"),
        "checkpoint_every": ("0", "checkpoint cadence (0: final only)"),
    },
    "adapt": {
        "mode": ("full", "'full' fine-tunes the renderer, 'texture_only' freezes it"),
        "prior": ("", "prior checkpoint directory (blank: this project's prior/)"),
        "from_scratch": ("false", "train a fresh renderer instead of adapting a prior"),
        "mixed": ("false", "mix 1:1 with the prior's training identities"),
        "holdout": ("0.2", "fraction of frames held out at the end for validation"),
        "frames": ("0", "cap on training frames (0: all)"),
    },
    "dub": {
        "window_stride": ("window", "'window' for non-overlapping windows, 'center' to keep each window's middle frame"),
        "container": (".mp4", "output container (.mp4 or lossless .avi)"),
    },
    "postprocess": {
        "erode": ("false", "shrink the agreed background by one pixel"),
    },
}

STAGE_SECTIONS = {
    "ingest": ("project",),
    "track": ("project", "model", "track"),
    "preprocess": ("model", "preprocess"),
    "train-prior": ("project", "renderer", "train", "preprocess"),
    "adapt": ("project", "renderer", "train", "adapt"),
    "dub": ("dub", "preprocess"),
    "postprocess": ("postprocess",),
    "evaluate": ("adapt",),
}


class ProjectConfig:
    def __init__(self, parser: configparser.ConfigParser | None = None):
        self.parser = configparser.ConfigParser()
        for sec, keys in SCHEMA.items():
            self.parser[sec] = {k: v[0] for k, v in keys.items()}
        if parser is not None:
            self.update(parser)

    def update(self, other: configparser.ConfigParser):
        for sec in other.sections():
            if sec not in SCHEMA:
                raise ConfigurationError(f"unknown config section [{sec}]")
            for k, v in other[sec].items():
                if k not in SCHEMA[sec]:
                    raise ConfigurationError(f"unknown key {k!r} in [{sec}]")
                self.parser[sec][k] = v

    @classmethod
    def load(cls, path) -> "ProjectConfig":
        p = configparser.ConfigParser()
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            p.read(path)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        return cls(p)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(documented_template(self))

    def set(self, section: str, key: str, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigurationError(f"unknown config key [{section}] {key}")
        self.parser[section][key] = str(value).lower() if isinstance(value, bool) else str(value)

    def get(self, section, key) -> str:
        return self.parser[section][key]

    def getint(self, section, key) -> int:
        return self._typed(section, key, self.parser.getint)

    def getfloat(self, section, key) -> float:
        return self._typed(section, key, self.parser.getfloat)

    def getbool(self, section, key) -> bool:
        return self._typed(section, key, self.parser.getboolean)

    def _typed(self, section, key, fn):
        try:
            return fn(section, key)
        except ValueError as exc:
            raise ConfigurationError(f"[{section}] {key} = {self.get(section, key)!r}: {exc}") from exc

    def section_hash(self, sections) -> str:
        blob = {s: dict(self.parser[s]) for s in sections}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def stage_hash(self, stage: str) -> str:
        return self.section_hash(STAGE_SECTIONS[stage])


def documented_template(cfg: ProjectConfig | None = None) -> str:
    cfg = cfg or ProjectConfig()
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        for k, (default, help_) in keys.items():
            out.append(f"# {help_} (default: {default!r})")
            out.append(f"{k} = {cfg.get(sec, k)}")
        out.append("")
    return "\n".join(out)
