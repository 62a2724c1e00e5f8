"""Orthogonal patch codec between mel spectrograms and diffusion latents."""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from src.services.errors import MusicEditorError
from src.services.spectra import MelSpectrogram, SpectrogramMeta
from src.utils.fileio import atomic_write_bytes
from src.utils.hashing import fnv1a_hex

logger = logging.getLogger(__name__)

MCDC_MAGIC = b"MCDC"


class CodecError(MusicEditorError):
    default_stage = "codec"


@dataclass(frozen=True)
class Latent:
    """N x d token matrix bound to the codec that produced it."""

    tokens: np.ndarray
    codec_id: str
    grid: Tuple[int, int]
    meta: SpectrogramMeta

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise CodecError(f"latent tokens must be 2-D, got shape {tokens.shape}")
        if not np.all(np.isfinite(tokens)):
            raise CodecError("latent contains non-finite values")
        if self.grid[0] * self.grid[1] != tokens.shape[0]:
            raise CodecError(f"grid {self.grid} does not match {tokens.shape[0]} tokens",
                             context={'grid': list(self.grid), 'tokens': tokens.shape[0]})
        tokens.setflags(write=False)
        object.__setattr__(self, 'tokens', tokens)

    def with_tokens(self, tokens: np.ndarray) -> "Latent":
        return Latent(tokens, self.codec_id, self.grid, self.meta)


@dataclass(frozen=True)
class DecodedSpectrogram:
    """Decoder output: a clamped spectrogram view plus the raw, unclamped inverse."""

    spectrogram: MelSpectrogram
    raw: np.ndarray = field(repr=False)


def _as_f32_f64(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=np.float32).astype(np.float64)


class LatentCodec:
    """Patchify, normalize with dataset scalars, then rotate by a seeded orthogonal matrix.

    The projection and normalization are held at float32 precision so a
    persisted codec behaves bit-identically after reload.
    """

    def __init__(self, patch_rows: int, patch_cols: int, projection: np.ndarray,
                 mean: float = 0.0, scale: float = 1.0, seed: Optional[int] = None):
        d = patch_rows * patch_cols
        projection = _as_f32_f64(projection)
        if projection.shape != (d, d):
            raise CodecError(f"projection must be {d}x{d}, got {projection.shape}",
                             context={'expected': [d, d], 'actual': list(projection.shape)})
        if scale <= 0 or not np.isfinite(scale) or not np.isfinite(mean):
            raise CodecError(f"invalid normalization mean={mean} scale={scale}")
        self.patch_rows = patch_rows
        self.patch_cols = patch_cols
        self.projection = projection
        self.projection.setflags(write=False)
        self.mean = float(np.float32(mean))
        self.scale = float(np.float32(scale))
        self.seed = seed
        self.codec_id = fnv1a_hex(self.blob())

    @classmethod
    def create(cls, patch_rows: int = 8, patch_cols: int = 8, seed: int = 0,
               mean: float = 0.0, scale: float = 1.0) -> "LatentCodec":
        """Build a codec whose projection is the sign-fixed Q factor of a seeded Gaussian."""
        d = patch_rows * patch_cols
        gaussian = np.random.default_rng(seed).standard_normal((d, d))
        q, r = np.linalg.qr(gaussian)
        q = q * np.sign(np.diag(r))
        return cls(patch_rows, patch_cols, q, mean=mean, scale=scale, seed=seed)

    @property
    def dim(self) -> int:
        return self.patch_rows * self.patch_cols

    def grid_for(self, frames: int, bins: int) -> Tuple[int, int]:
        if frames % self.patch_rows or bins % self.patch_cols:
            raise CodecError(f"spectrogram {frames}x{bins} is not divisible by patch "
                             f"{self.patch_rows}x{self.patch_cols}",
                             context={'frames': frames, 'bins': bins,
                                      'patch': [self.patch_rows, self.patch_cols]})
        return frames // self.patch_rows, bins // self.patch_cols

    def fit_normalization(self, spectrograms: Iterable[MelSpectrogram]) -> "LatentCodec":
        """Return a codec with mean/scale fitted to ``spectrograms``."""
        total, total_sq, count = 0.0, 0.0, 0
        for spec in spectrograms:
            total += float(spec.data.sum())
            total_sq += float(np.square(spec.data).sum())
            count += spec.data.size
        if count == 0:
            raise CodecError("cannot fit normalization on an empty dataset")
        mean = total / count
        std = float(np.sqrt(max(total_sq / count - mean * mean, 0.0)))
        return LatentCodec(self.patch_rows, self.patch_cols, self.projection,
                           mean=mean, scale=std if std > 0 else 1.0, seed=self.seed)

    def _patchify(self, data: np.ndarray) -> np.ndarray:
        rows, cols = self.grid_for(*data.shape)
        patches = data.reshape(rows, self.patch_rows, cols, self.patch_cols).transpose(0, 2, 1, 3)
        return patches.reshape(rows * cols, self.dim)

    def _unpatchify(self, patches: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
        rows, cols = grid
        blocks = patches.reshape(rows, cols, self.patch_rows, self.patch_cols).transpose(0, 2, 1, 3)
        return blocks.reshape(rows * self.patch_rows, cols * self.patch_cols)

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.scale

    def encode_array(self, data: np.ndarray, meta: SpectrogramMeta) -> Latent:
        """Encode a raw frames x bins array (negative values allowed)."""
        data = np.asarray(data, dtype=np.float64)
        grid = self.grid_for(*data.shape)
        tokens = self._patchify(self.normalize(data)) @ self.projection.T
        return Latent(tokens, self.codec_id, grid, meta)

    def encode(self, spec: MelSpectrogram) -> Latent:
        """Encode a spectrogram into a latent.

        Raises:
            CodecError: If the spectrogram is not divisible into patches
        """
        return self.encode_array(spec.data, spec.meta)

    def decode(self, latent: Latent) -> DecodedSpectrogram:
        """Invert :meth:`encode`; negative magnitudes are clamped only in the spectrogram view.

        Raises:
            CodecError: If the latent was produced by another codec
        """
        if latent.codec_id != self.codec_id:
            raise CodecError(f"latent codec {latent.codec_id} does not match codec {self.codec_id}",
                             context={'expected': self.codec_id, 'actual': latent.codec_id})
        if latent.tokens.shape[1] != self.dim:
            raise CodecError(f"latent token width {latent.tokens.shape[1]} != codec dim {self.dim}")
        raw = self._unpatchify(latent.tokens @ self.projection, latent.grid) * self.scale + self.mean
        return DecodedSpectrogram(MelSpectrogram(np.maximum(raw, 0.0), latent.meta), raw)

    def blob(self) -> bytes:
        """Projection and normalization as little-endian float32, the hashed identity of the codec."""
        return (np.ascontiguousarray(self.projection, dtype='<f4').tobytes()
                + np.array([self.mean, self.scale], dtype='<f4').tobytes())

    def header(self) -> Dict[str, Any]:
        return {'patch_rows': self.patch_rows, 'patch_cols': self.patch_cols, 'mean': self.mean,
                'scale': self.scale, 'seed': self.seed, 'codec_id': self.codec_id}

    @classmethod
    def from_blob(cls, header: Dict[str, Any], blob: bytes) -> "LatentCodec":
        """Rebuild a codec from :meth:`header` and :meth:`blob` output.

        Raises:
            CodecError: Size or identity mismatch
        """
        rows, cols = int(header['patch_rows']), int(header['patch_cols'])
        d = rows * cols
        expected = (d * d + 2) * 4
        if len(blob) != expected:
            raise CodecError(f"codec blob holds {len(blob)} bytes, expected {expected}",
                             context={'expected': expected, 'actual': len(blob)})
        values = np.frombuffer(blob, dtype='<f4')
        codec = cls(rows, cols, values[: d * d].reshape(d, d), mean=float(values[d * d]),
                    scale=float(values[d * d + 1]), seed=header.get('seed'))
        if header.get('codec_id') not in (None, codec.codec_id):
            raise CodecError("codec blob does not hash to the recorded codec_id",
                             context={'expected': header['codec_id'], 'actual': codec.codec_id})
        return codec

    def save(self, path: Union[str, Path]) -> Path:
        """Write the codec as MCDC: magic, u32 header length, JSON header, float32 blob."""
        header = json.dumps(self.header(), sort_keys=True).encode('utf-8')
        return atomic_write_bytes(path, MCDC_MAGIC + struct.pack('<I', len(header)) + header + self.blob())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LatentCodec":
        raw = Path(path).read_bytes()
        if raw[:4] != MCDC_MAGIC or len(raw) < 8:
            raise CodecError(f"{path} is not an MCDC file", context={'path': str(path)})
        (header_len,) = struct.unpack('<I', raw[4:8])
        try:
            header = json.loads(raw[8:8 + header_len].decode('utf-8'))
        except (ValueError, UnicodeDecodeError) as e:
            raise CodecError(f"Invalid MCDC header in {path}: {e}", context={'path': str(path)})
        return cls.from_blob(header, raw[8 + header_len:])
