"""Minimal binary PNM readers/writers and block-average resizing.

Frames travel as binary PPM (P6) and masks as binary PGM (P5), both 8-bit.
Mask pixels with value >= 128 read as 1.
"""

from __future__ import annotations

import numpy as np

from .errors import ArtifactIOError, ShapeError

MASK_THRESHOLD = 128


def _read_pnm_header(blob: bytes, magic: bytes, path: str) -> tuple[int, int, int, int]:
    """Parse width/height/maxval after the magic; returns payload offset too."""
    if not blob.startswith(magic):
        raise ArtifactIOError(f"expected {magic.decode()} file", path=path)
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(blob):
            raise ArtifactIOError("truncated PNM header", path=path)
        ch = blob[pos : pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(blob) and blob[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(blob[start:pos]))
        else:
            raise ArtifactIOError(f"bad PNM header byte {ch!r}", path=path)
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise ArtifactIOError("only 8-bit PNM supported", path=path)
    return width, height, maxval, pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 RGB image as uint8 [H, W, 3]."""
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read frame: {exc}", path=str(path)) from exc
    width, height, _, offset = _read_pnm_header(blob, b"P6", str(path))
    expected = width * height * 3
    if len(blob) - offset < expected:
        raise ArtifactIOError("truncated PPM payload", path=str(path))
    data = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=offset)
    return data.reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be [H,W,3], got shape {image.shape}")
    h, w, _ = image.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(image.tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write frame: {exc}", path=str(path)) from exc


def read_pgm_mask(path) -> np.ndarray:
    """Read a binary P5 mask as uint8 {0,1} [H, W] plus a bilevel flag.

    Returns (mask, was_bilevel); pixels >= 128 map to 1. ``was_bilevel`` is
    False when the file contained grays other than 0/255.
    """
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read mask: {exc}", path=str(path)) from exc
    width, height, _, offset = _read_pnm_header(blob, b"P5", str(path))
    expected = width * height
    if len(blob) - offset < expected:
        raise ArtifactIOError("truncated PGM payload", path=str(path))
    raw = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=offset)
    raw = raw.reshape(height, width)
    bilevel = bool(np.isin(raw, (0, 255)).all())
    return (raw >= MASK_THRESHOLD).astype(np.uint8), bilevel


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as 0/255 binary P5."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    payload = np.where(mask > 0, 255, 0).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(payload.tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write mask: {exc}", path=str(path)) from exc


def block_downscale(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Mean-pool an image [H, W, C] to [target_h, target_w, C]."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % target_h or w % target_w:
        raise ShapeError(f"cannot downscale {h}x{w} to {target_h}x{target_w}")
    fh, fw = h // target_h, w // target_w
    pooled = image.reshape(target_h, fh, target_w, fw, -1).mean(axis=(1, 3))
    return pooled.reshape(target_h, target_w, *image.shape[2:])
