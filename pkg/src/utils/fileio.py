"""Atomic artifact writers and image renderers."""

import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write ``data`` to ``path`` via a temp file in the same directory and a rename.

    Args:
        path: Destination file
        data: Bytes to write

    Returns:
        The destination path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug("Wrote artifact", extra={"path": str(target), "file_size": len(data)})
    return target


def dumps_json(payload: Any) -> bytes:
    return (json.dumps(payload, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def atomic_write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_bytes(path, dumps_json(payload))


def spectrogram_image(data: np.ndarray) -> np.ndarray:
    """Map a frames x bins magnitude matrix to an 8-bit image.

    Log-compressed magnitude, time on the x-axis, low mel bins at the bottom.
    An all-zero input gives an all-black image.
    """
    log_mag = np.log1p(np.maximum(np.asarray(data, dtype=np.float64), 0.0))
    peak = float(log_mag.max()) if log_mag.size else 0.0
    if peak <= 0.0:
        scaled = np.zeros_like(log_mag)
    else:
        scaled = np.round(255.0 * log_mag / peak)
    return np.flipud(scaled.T).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    height, width = image.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def encode_png(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="L").save(buffer, format="PNG")
    return buffer.getvalue()


def write_spectrogram_image(data: np.ndarray, path: PathLike, png: bool = False) -> Path:
    """Render ``data`` as PGM (or PNG when ``png`` is set) at ``path``."""
    image = spectrogram_image(data)
    return atomic_write_bytes(path, encode_png(image) if png else encode_pgm(image))


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary P5 PGM written by :func:`encode_pgm`."""
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    return pixels[: width * height].reshape(height, width)
