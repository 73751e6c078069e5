"""On-disk formats: binary PGM images, ``key = value`` configs, dataset manifests.

Images and masks are 8-bit binary PGM (``P5``, maxval 255). Masks store
0 for background and 255 for foreground; any nonzero byte reads as
foreground.

A dataset directory holds ``manifest.csv`` with the header
``image,mask,pixel_spacing,split``; paths are relative to the directory,
``pixel_spacing`` is mm/pixel and ``split`` is a free-form tag (the
phantom generator writes ``train`` or ``test``).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("image", "mask", "pixel_spacing", "split")


# -- PGM ------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.dtype == bool:
            arr = arr.astype(np.uint8) * 255
        else:
            arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"malformed PGM header in {path}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"malformed PGM header in {path}") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise DataError(f"{path}: only 8-bit PGM with maxval 255 is supported")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path: str | Path) -> np.ndarray:
    return read_pgm(path) > 0


# -- key = value configs ----------------------------------------------------------

def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


# -- manifests --------------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    image: Path
    mask: Path
    pixel_spacing: float
    split: str

    @property
    def image_id(self) -> str:
        return self.image.stem


def write_manifest(root: str | Path, entries: list[Entry]) -> None:
    root = Path(root)
    with open(root / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            writer.writerow([e.image.relative_to(root).as_posix(), e.mask.relative_to(root).as_posix(),
                             repr(float(e.pixel_spacing)), e.split])


def read_manifest(root: str | Path, check_masks: bool = True) -> list[Entry]:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"missing manifest {path}")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, 2):
            try:
                spacing = float(row["pixel_spacing"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: bad pixel_spacing {row['pixel_spacing']!r}") from None
            if not (math.isfinite(spacing) and spacing > 0):
                raise DataError(f"{path}:{lineno}: pixel_spacing must be > 0")
            image, mask = root / row["image"], root / row["mask"]
            if not image.is_file():
                raise DataError(f"{path}:{lineno}: missing image {image}")
            if check_masks and not mask.is_file():
                raise DataError(f"{path}:{lineno}: missing mask {mask}")
            entries.append(Entry(image, mask, spacing, row["split"]))
    if not entries:
        raise DataError(f"{path}: manifest lists no images")
    return entries
