"""``priordub`` command line.

Exit codes: 0 success (including "up to date"), 1 internal error, 2 usage
or input error (bad paths, missing prerequisite stages, invalid config).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .config import ProjectConfig, documented_template
from .face_model import ConfigurationError
from .store import ProjectStore, StoreBusy
from .video import VideoError

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priordub", description="Visual dubbing from a person-generic rendering prior.")
    p.add_argument("--project", "-p", default=".", help="project directory (default: current directory)")
    p.add_argument("--config", help="INI file whose values override project.ini for this command")
    p.add_argument("--seed", type=int, help="override [project] seed")
    p.add_argument("--force", action="store_true", help="re-run even if the stage is up to date")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="create project.ini with documented defaults")
    s.add_argument("--print", action="store_true", help="print the template instead of writing it")

    s = sub.add_parser("synth", help="write a procedural talking-head clip with audio and landmark sidecars")
    s.add_argument("output", help="video path (.avi for lossless)")
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--fps", type=float, default=25.0)

    s = sub.add_parser("ingest", help="decode a video to 25 fps frames and 16 kHz audio")
    s.add_argument("video")
    s.add_argument("--audio", help="WAV file (default: <video>.wav, else extracted with ffmpeg)")
    s.add_argument("--landmarks", help="landmark .npz (default: <video>.landmarks.npz if present)")

    sub.add_parser("track", help="fit the face model to every frame")
    sub.add_parser("preprocess", help="crop frames and rasterise UV and region masks")

    s = sub.add_parser("train-prior", help="train the shared renderer across identities")
    s.add_argument("--data", nargs="+", required=True, help="project directories or dataset .npz files")
    s.add_argument("--frames", type=int, default=0, help="cap on training frames per identity")

    s = sub.add_parser("adapt", help="fit this project's actor starting from the prior")
    s.add_argument("--identity")
    s.add_argument("--mode", choices=("full", "texture_only"))
    s.add_argument("--frames", type=int, help="cap on training frames")
    s.add_argument("--from-scratch", action="store_true", help="ignore the prior (baseline)")

    s = sub.add_parser("dub", help="re-render the actor speaking new audio")
    s.add_argument("--identity")
    s.add_argument("--audio", help="driving WAV (default: the ingested audio)")
    s.add_argument("--name", help="output name (default: audio file stem, or 'self')")

    s = sub.add_parser("postprocess", help="redo background clean-up and paste-back of a dub")
    s.add_argument("--identity")
    s.add_argument("--name", default="self")

    s = sub.add_parser("evaluate", help="held-out metrics for an adapted identity")
    s.add_argument("--identity")

    s = sub.add_parser("delete-identity", help="remove every person-specific artifact of an identity")
    s.add_argument("identity")
    return p


def _config(store: ProjectStore, args) -> ProjectConfig:
    cfg = store.config()
    if args.config:
        cfg.update(ProjectConfig.load(args.config).parser)
    if args.seed is not None:
        cfg.set("project", "seed", args.seed)
    return cfg


def _setup_logging(store: ProjectStore, command: str, verbose: bool):
    root = logging.getLogger("priordub")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.handlers.clear()
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(h)
    if command not in ("synth", "init"):
        store.logs_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(store.logs_dir / f"{command}.log")
        fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root.addHandler(fh)


def _dispatch(args, store: ProjectStore, cfg: ProjectConfig):
    from . import pipeline as pl

    c = args.command
    if c == "init":
        if args.print:
            print(documented_template(cfg))
            return None
        store.init(cfg)
        print(f"wrote {store.config_path}")
        return None
    if c == "synth":
        out = pl.synthesize(args.output, seed=cfg.getint("project", "seed"), n_frames=args.frames,
                            resolution=args.resolution, cfg=cfg, fps=args.fps)
        print(f"wrote {out['video']} ({out['frames']} frames), {out['audio']}, {out['landmarks']}")
        return None
    if c == "delete-identity":
        store.delete_identity(args.identity)
        print(f"deleted identity {args.identity}")
        return None
    if c == "ingest":
        store.init()
        return pl.run_ingest(store, cfg, args.video, args.audio, args.landmarks, force=args.force)
    if c == "train-prior":
        store.init()
        return pl.run_train_prior(store, cfg, args.data, frames=args.frames, force=args.force)
    if not store.config_path.exists():
        raise pl.MissingStage("ingest", f"{store.root} is not a project")
    if c == "track":
        return pl.run_track(store, cfg, force=args.force)
    if c == "preprocess":
        return pl.run_preprocess(store, cfg, force=args.force)
    if c == "adapt":
        if args.mode:
            cfg.set("adapt", "mode", args.mode)
        if args.frames is not None:
            cfg.set("adapt", "frames", args.frames)
        if args.from_scratch:
            cfg.set("adapt", "from_scratch", True)
        return pl.run_adapt(store, cfg, args.identity, force=args.force)
    if c == "dub":
        return pl.run_dub(store, cfg, args.identity, args.audio, args.name, force=args.force)
    if c == "postprocess":
        return pl.run_postprocess(store, cfg, args.identity, args.name, force=args.force)
    if c == "evaluate":
        return pl.run_evaluate(store, cfg, args.identity, force=args.force)
    raise AssertionError(c)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    from . import pipeline as pl

    store = ProjectStore(args.project)
    usage_errors = (ConfigurationError, pl.MissingStage, pl.InputError, VideoError, StoreBusy, FileNotFoundError)
    lock = None
    try:
        cfg = _config(store, args)
        if args.command not in ("synth", "init"):
            lock = store.acquire()
        _setup_logging(store, args.command, args.verbose)
        res = _dispatch(args, store, cfg)
        if res is not None:
            if res.up_to_date:
                print(f"{res.stage}: up to date")
            else:
                print(f"{res.stage}: done")
                shown = {k: (str(v) if isinstance(v, Path) else v) for k, v in res.outputs.items()}
                if shown:
                    print(json.dumps(shown, indent=1, default=str))
        return EXIT_OK
    except usage_errors as exc:
        print(f"priordub {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is our bug
        print(f"priordub {args.command}: internal error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_INTERNAL
    finally:
        if lock is not None:
            lock.release()


if __name__ == "__main__":
    sys.exit(main())
