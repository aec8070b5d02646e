"""Movie directories on disk: one 8-bit TIFF per frame plus a JSON manifest."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import tifffile

from .errors import DataError
from .synthmovie import EventMask, EventRecord, Movie


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_stack(directory: Path, prefix: str, stack: np.ndarray) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(stack) - 1)))
    paths = []
    for i, img in enumerate(stack):
        p = directory / f"{prefix}_{i:0{width}d}.tif"
        tifffile.imwrite(p, np.ascontiguousarray(img, dtype=np.uint8))
        paths.append(p)
    return paths


def write_movie_dir(out_dir: str | Path, movie: Movie, mask: EventMask | None = None,
                    config: dict | None = None) -> Path:
    """Write ``frames/frame_NNNN.tif`` (and ``masks/mask_NNNN.tif``) plus ``manifest.json``.

    The manifest records the generating config, the event list and a
    SHA-256 checksum of every written file. Returns the manifest path.
    """
    out = Path(out_dir)
    files = _write_stack(out / "frames", "frame", movie.frames)
    if mask is not None:
        files += _write_stack(out / "masks", "mask", mask.masks)
    manifest = {
        "config": config or {},
        "n_frames": movie.n_frames,
        "shape": list(movie.shape),
        "frame_interval_minutes": movie.frame_interval_minutes,
        "events": [asdict(e) for e in movie.events],
        "at_risk": movie.at_risk.tolist() if movie.at_risk is not None else None,
        "files": {p.relative_to(out).as_posix(): sha256_file(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_stack(directory: str | Path) -> np.ndarray:
    """All ``*.tif`` files of a directory, in name order, as a (T, H, W) uint8 array.

    A movie directory (one holding ``frames/``) is accepted too.
    """
    d = Path(directory)
    if (d / "frames").is_dir():
        d = d / "frames"
    paths = sorted(d.glob("*.tif")) + sorted(d.glob("*.tiff"))
    if not paths:
        raise DataError(f"no TIFF files in {d}")
    imgs = [tifffile.imread(p) for p in paths]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1 or imgs[0].ndim != 2:
        raise DataError(f"frames in {d} must be equal-sized 2-D images, got shapes {sorted(shapes)}")
    stack = np.stack(imgs)
    if stack.dtype != np.uint8:
        if stack.min() < 0 or stack.max() > 255:
            raise DataError(f"frames in {d} are not 8-bit")
        stack = stack.astype(np.uint8)
    return stack


def read_movie(directory: str | Path, masks: str | Path | None = None,
               verify: bool = True) -> tuple[Movie, EventMask | None]:
    """Load a movie directory written by ``write_movie_dir`` (or a bare frame directory).

    With ``verify`` set, files listed in a manifest are checked against their checksums.
    """
    d = Path(directory)
    root = d if (d / "frames").is_dir() else None
    manifest = {}
    if root is not None and (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
        if verify:
            for rel, digest in manifest.get("files", {}).items():
                if sha256_file(root / rel) != digest:
                    raise DataError(f"checksum mismatch for {root / rel}")
    frames = read_stack(d)
    if masks is None and root is not None and (root / "masks").is_dir():
        masks = root / "masks"
    mask = EventMask(read_stack(masks)) if masks is not None else None
    if mask is not None and mask.masks.shape != frames.shape:
        raise DataError(f"mask stack {mask.masks.shape} does not match frames {frames.shape}")
    at_risk = manifest.get("at_risk")
    movie = Movie(
        frames=frames,
        frame_interval_minutes=manifest.get("frame_interval_minutes", 15.0),
        events=[EventRecord(**e) for e in manifest.get("events", [])],
        at_risk=np.asarray(at_risk, dtype=np.int64) if at_risk is not None else None,
    )
    return movie, mask
