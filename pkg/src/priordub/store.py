"""On-disk project layout, stage stamps and the per-project lock."""
from __future__ import annotations

import json
import shutil
import time
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from .config import ProjectConfig
from .face_model import ConfigurationError


class StoreBusy(RuntimeError):
    pass


class ProjectStore:
    """Directory layout of one actor's project::

        project.ini
        ingest/frames/000000.png ...   ingest/audio.wav   ingest/meta.json   ingest/landmarks.npz
        track/tracked.jsonl
        preprocess/crop.json   preprocess/data.npz
        prior/renderer.pt   prior/textures/   prior/log.jsonl
        identities/<id>/          everything person-specific (texture, weights, logs, dubs, metrics)
        stamps/<stage>.json       config hash, seed and time of the last successful run
        logs/<stage>.log
    """

    def __init__(self, root):
        self.root = Path(root)

    # layout ---------------------------------------------------------------
    config_path = property(lambda self: self.root / "project.ini")
    ingest_dir = property(lambda self: self.root / "ingest")
    frames_dir = property(lambda self: self.ingest_dir / "frames")
    audio_path = property(lambda self: self.ingest_dir / "audio.wav")
    ingest_meta = property(lambda self: self.ingest_dir / "meta.json")
    landmarks_path = property(lambda self: self.ingest_dir / "landmarks.npz")
    track_path = property(lambda self: self.root / "track" / "tracked.jsonl")
    crop_path = property(lambda self: self.root / "preprocess" / "crop.json")
    data_path = property(lambda self: self.root / "preprocess" / "data.npz")
    prior_dir = property(lambda self: self.root / "prior")
    logs_dir = property(lambda self: self.root / "logs")
    stamps_dir = property(lambda self: self.root / "stamps")

    def identity_dir(self, identity: str) -> Path:
        if not identity or "/" in identity or identity.startswith("."):
            raise ConfigurationError(f"invalid identity name {identity!r}")
        return self.root / "identities" / identity

    def dub_dir(self, identity: str, name: str) -> Path:
        return self.identity_dir(identity) / "dubs" / name

    def identities(self) -> list[str]:
        d = self.root / "identities"
        return sorted(p.name for p in d.iterdir() if (p / "record.json").exists()) if d.exists() else []

    @property
    def default_identity(self) -> str:
        return self.root.resolve().name

    # lifecycle --------------------------------------------------------------
    def init(self, cfg: ProjectConfig | None = None) -> ProjectConfig:
        self.root.mkdir(parents=True, exist_ok=True)
        if self.config_path.exists():
            return ProjectConfig.load(self.config_path)
        cfg = cfg or ProjectConfig()
        cfg.save(self.config_path)
        return cfg

    def config(self) -> ProjectConfig:
        return ProjectConfig.load(self.config_path) if self.config_path.exists() else ProjectConfig()

    def lock(self) -> FileLock:
        """Exclusive lock held for the duration of a command."""
        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.root / ".lock"), timeout=0)

    def acquire(self) -> FileLock:
        lock = self.lock()
        try:
            lock.acquire()
        except Timeout:
            raise StoreBusy(f"another command is running in {self.root}") from None
        return lock

    def delete_identity(self, identity: str):
        shutil.rmtree(self.identity_dir(identity), ignore_errors=True)

    # stamps -----------------------------------------------------------------
    def _stamp_path(self, stage: str, key: str | None) -> Path:
        if key and key.startswith("identity:"):
            return self.identity_dir(key.split(":", 1)[1]) / "stamps" / f"{stage}.json"
        return self.stamps_dir / (f"{stage}.json" if not key else f"{stage}-{key}.json")

    def read_stamp(self, stage: str, key: str | None = None) -> dict | None:
        p = self._stamp_path(stage, key)
        return json.loads(p.read_text()) if p.exists() else None

    def write_stamp(self, stage: str, digest: str, seed: int, key: str | None = None, **extra):
        p = self._stamp_path(stage, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        rec = {"stage": stage, "hash": digest, "seed": seed, "version": __version__,
               "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(rec, indent=1))
        tmp.replace(p)

    def clear_stamp(self, stage: str, key: str | None = None):
        self._stamp_path(stage, key).unlink(missing_ok=True)

    def is_current(self, stage: str, digest: str, key: str | None = None) -> bool:
        s = self.read_stamp(stage, key)
        return s is not None and s.get("hash") == digest
