"""Toy conditional noise predictor, its training loop and the MLDM checkpoint format."""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from src.models.config import DenoiserConfig, TrainingConfig
from src.services.attention import AttentionKind, AttentionParams, HookSet, cross_attention, self_attention
from src.services.codec import CodecError, Latent, LatentCodec
from src.services.condition import PromptEmbedding, PromptVocabulary, embed_prompt
from src.services.errors import MusicEditorError
from src.services.sampler import build_noise_schedule
from src.services.spectra import SpectrogramMeta, load_clip, load_manifest
from src.utils.fileio import atomic_write_bytes
from src.utils.hashing import digest_chunks
from src.utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

MLDM_MAGIC = b"MLDM"
FORMAT_VERSION = 1


class DenoiserError(MusicEditorError):
    default_stage = "denoiser"


class CheckpointError(DenoiserError):
    default_stage = "checkpoint"


class TrainingDivergedError(DenoiserError):
    default_stage = "training"


def timestep_embedding(timesteps: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = timesteps.to(torch.float64)[:, None] * freqs[None, :]
    embedding = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
    return embedding


class DenoiserBlock(nn.Module):
    """Pre-norm residual block: self-attention, cross-attention, feed-forward."""

    def __init__(self, config: DenoiserConfig, layer: int):
        super().__init__()
        self.layer = layer
        self.norm_sa = nn.LayerNorm(config.d_eps)
        self.sa = AttentionParams(config.d_eps, config.d_eps, config.d_s, config.heads)
        self.sa_out = nn.Linear(config.d_s, config.d_eps)
        self.norm_ca = nn.LayerNorm(config.d_eps)
        self.ca = AttentionParams(config.d_eps, config.d_tau, config.d_c, config.heads)
        self.ca_out = nn.Linear(config.d_c, config.d_eps)
        self.norm_ff = nn.LayerNorm(config.d_eps)
        self.ff = nn.Sequential(nn.Linear(config.d_eps, config.hidden), nn.GELU(),
                                nn.Linear(config.hidden, config.d_eps))

    def forward(self, x: torch.Tensor, tau: torch.Tensor, hooks: Optional[HookSet] = None) -> torch.Tensor:
        sa_override = hooks.sa_override(self.layer) if hooks else None
        sa_sink = hooks.sink_for(self.layer, AttentionKind.SA) if hooks else None
        out, _ = self_attention(self.norm_sa(x), self.sa, override=sa_override, sink=sa_sink)
        x = x + self.sa_out(out)

        ca_override = hooks.ca_override(self.layer) if hooks else None
        ca_sink = hooks.sink_for(self.layer, AttentionKind.CA) if hooks else None
        out, _ = cross_attention(self.norm_ca(x), tau, self.ca, sink=ca_sink, override=ca_override)
        x = x + self.ca_out(out)

        return x + self.ff(self.norm_ff(x))


class Denoiser(nn.Module):
    """eps_theta(z_t, t, y): L blocks over latent tokens with a learned prompt vocabulary."""

    def __init__(self, config: DenoiserConfig, vocabulary: Sequence[str]):
        super().__init__()
        self.config = config
        self.vocab = PromptVocabulary(vocabulary, config.d_tau)
        self.input_proj = nn.Linear(config.latent_dim, config.d_eps)
        self.pos_embedding = nn.Parameter(torch.randn(config.tokens, config.d_eps) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(config.d_eps, config.d_eps), nn.GELU(),
                                      nn.Linear(config.d_eps, config.d_eps))
        self.blocks = nn.ModuleList(DenoiserBlock(config, layer) for layer in range(1, config.layers + 1))
        self.norm_out = nn.LayerNorm(config.d_eps)
        self.output_proj = nn.Linear(config.d_eps, config.latent_dim)

    def forward(self, z: torch.Tensor, timesteps: torch.Tensor, tau: torch.Tensor,
                hooks: Optional[HookSet] = None) -> torch.Tensor:
        """Predict the noise in ``z``.

        Args:
            z: (B, N, latent_dim) noisy latents
            timesteps: (B,) integer timesteps in [0, T)
            tau: (B, M, d_tau) or (M, d_tau) prompt rows
            hooks: Capture sinks and overrides

        Returns:
            (B, N, latent_dim) noise estimate
        """
        if z.dim() != 3 or z.shape[1] != self.config.tokens or z.shape[2] != self.config.latent_dim:
            raise DenoiserError(f"latent shape {tuple(z.shape)} does not match "
                                f"(B, {self.config.tokens}, {self.config.latent_dim})",
                                context={'shape': list(z.shape)})
        if timesteps.numel() and (int(timesteps.min()) < 0 or int(timesteps.max()) >= self.config.timesteps):
            raise DenoiserError(f"timesteps must lie in [0, {self.config.timesteps})",
                                context={'min': int(timesteps.min()), 'max': int(timesteps.max())})
        embedding = timestep_embedding(timesteps, self.config.d_eps).to(z.dtype)
        x = self.input_proj(z) + self.pos_embedding + self.time_mlp(embedding)[:, None, :]
        for block in self.blocks:
            x = block(x, tau, hooks)
        return self.output_proj(self.norm_out(x))


def diffusion_loss(model: Denoiser, z0: torch.Tensor, timesteps: torch.Tensor, noise: torch.Tensor,
                   texts: Sequence[str], alpha_bar: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise.

    Samples are grouped by prompt length so each group shares one tau shape;
    an empty text means the null embedding.
    """
    ab = alpha_bar[timesteps].to(z0.dtype)[:, None, None]
    z_t = ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise
    embeddings: Dict[str, PromptEmbedding] = {}
    groups: Dict[int, List[int]] = {}
    for index, text in enumerate(texts):
        if text not in embeddings:
            embeddings[text] = embed_prompt(text, model.vocab)
        groups.setdefault(embeddings[text].length, []).append(index)
    total = z0.new_zeros(())
    for members in groups.values():
        member_index = torch.tensor(members, dtype=torch.long)
        tau = torch.stack([embeddings[texts[i]].rows for i in members]).to(z0.dtype)
        prediction = model(z_t[member_index], timesteps[member_index], tau)
        total = total + ((prediction - noise[member_index]) ** 2).sum()
    return total / noise.numel()


@dataclass
class Checkpoint:
    """A trained denoiser with everything needed to use it standalone."""

    model: Denoiser
    codec: LatentCodec
    training: TrainingConfig
    spectrogram_meta: SpectrogramMeta
    loss_curve: List[float] = field(default_factory=list)
    trained_steps: int = 0
    dataset: Dict[str, Any] = field(default_factory=dict)
    _model_hash: Optional[str] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.model.eval()

    @property
    def config(self) -> DenoiserConfig:
        return self.model.config

    @property
    def vocabulary(self) -> List[str]:
        return list(self.model.vocab.words)

    def tensors(self) -> List[tuple]:
        """(name, float32 array) pairs in sorted name order."""
        state = self.model.state_dict()
        return [(name, state[name].detach().cpu().numpy().astype('<f4')) for name in sorted(state)]

    @property
    def model_hash(self) -> str:
        if self._model_hash is None:
            chunks = [self.config.config_hash().encode('ascii'), self.codec.blob()]
            chunks.extend(np.ascontiguousarray(array).tobytes() for _, array in self.tensors())
            self._model_hash = digest_chunks(chunks)
        return self._model_hash

    def embed(self, text: str) -> PromptEmbedding:
        """Embed ``text`` with gradients detached."""
        with torch.no_grad():
            embedding = embed_prompt(text, self.model.vocab)
        return PromptEmbedding(embedding.text, embedding.rows.detach(), embedding.token_spans)

    def null_prompt(self) -> PromptEmbedding:
        return self.embed("")

    def latent(self, tokens: np.ndarray) -> Latent:
        """Wrap raw tokens as a latent of this checkpoint's codec."""
        return Latent(tokens, self.codec.codec_id, self._grid(), self.spectrogram_meta)

    def _grid(self) -> tuple:
        frames = self.dataset.get('frames')
        bins = self.dataset.get('bins')
        if frames and bins:
            return self.codec.grid_for(frames, bins)
        side = int(round(math.sqrt(self.config.tokens)))
        return (side, self.config.tokens // side)

    def predict_noise(self, z: Union[Latent, torch.Tensor, np.ndarray], t: int, cond: PromptEmbedding,
                      hooks: Optional[HookSet] = None) -> torch.Tensor:
        """Noise estimate for one latent, shape (N, latent_dim), float32.

        Raises:
            DenoiserError: Non-finite input, t out of range or a latent from another codec
        """
        if isinstance(z, Latent):
            if z.codec_id != self.codec.codec_id:
                raise CodecError(f"latent codec {z.codec_id} does not match checkpoint codec "
                                 f"{self.codec.codec_id}",
                                 context={'expected': self.codec.codec_id, 'actual': z.codec_id})
            z = z.tokens
        tokens = (torch.from_numpy(np.array(z, dtype=np.float32)) if isinstance(z, np.ndarray)
                  else torch.as_tensor(z).to(torch.float32))
        if not torch.isfinite(tokens).all():
            raise DenoiserError("latent contains non-finite values", context={'timestep': t})
        if not 0 <= t < self.config.timesteps:
            raise DenoiserError(f"timestep {t} outside [0, {self.config.timesteps})", context={'timestep': t})
        with torch.no_grad():
            eps = self.model(tokens.unsqueeze(0), torch.tensor([t], dtype=torch.long),
                             cond.rows.to(torch.float32), hooks)
        return eps[0]

    def save(self, path: Union[str, Path]) -> Path:
        """Write the MLDM file: magic, u32 version, u32 header length, JSON header, float32 blobs."""
        tensors = self.tensors()
        index, offset = [], 0
        for name, array in tensors:
            index.append({'name': name, 'shape': list(array.shape), 'offset': offset, 'nbytes': array.nbytes})
            offset += array.nbytes
        codec_blob = self.codec.blob()
        header = {
            'format_version': FORMAT_VERSION,
            'config': self.config.model_dump(),
            'config_hash': self.config.config_hash(),
            'vocabulary': self.vocabulary,
            'codec': {**self.codec.header(), 'offset': offset, 'nbytes': len(codec_blob)},
            'training': self.training.model_dump(),
            'trained_steps': self.trained_steps,
            'loss_curve': self.loss_curve,
            'spectrogram_meta': self.spectrogram_meta.to_dict(),
            'dataset': self.dataset,
            'tensors': index,
        }
        header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
        body = b"".join(np.ascontiguousarray(array).tobytes() for _, array in tensors) + codec_blob
        target = atomic_write_bytes(path, MLDM_MAGIC + struct.pack('<II', FORMAT_VERSION, len(header_bytes))
                                    + header_bytes + body)
        logger.info("Checkpoint saved", extra={'path': str(target), 'model_hash': self.model_hash,
                                               'file_size': target.stat().st_size})
        return target

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """Read an MLDM file.

        Raises:
            CheckpointError: Bad magic, version mismatch, config-hash mismatch or truncation
        """
        header, body = read_checkpoint(path)
        config = DenoiserConfig(**header['config'])
        if config.config_hash() != header.get('config_hash'):
            raise CheckpointError(f"config hash mismatch in {path}",
                                  context={'expected': header.get('config_hash'), 'actual': config.config_hash()})
        needed = max([t['offset'] + t['nbytes'] for t in header['tensors']]
                     + [header['codec']['offset'] + header['codec']['nbytes']])
        if len(body) < needed:
            raise CheckpointError(f"checkpoint {path} is truncated",
                                  context={'expected_bytes': needed, 'actual_bytes': len(body)})
        model = Denoiser(config, header['vocabulary'])
        state = {}
        for entry in header['tensors']:
            raw = body[entry['offset']:entry['offset'] + entry['nbytes']]
            state[entry['name']] = torch.from_numpy(np.frombuffer(raw, dtype='<f4').copy()).reshape(entry['shape'])
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint {path} does not match its config: {e}", original_exception=e)
        codec_entry = header['codec']
        try:
            codec = LatentCodec.from_blob(codec_entry, body[codec_entry['offset']:codec_entry['offset']
                                                            + codec_entry['nbytes']])
        except CodecError as e:
            raise CheckpointError(f"embedded codec in {path} is invalid: {e}", original_exception=e)
        meta = header['spectrogram_meta']
        return cls(model=model, codec=codec, training=TrainingConfig(**header['training']),
                   spectrogram_meta=SpectrogramMeta(int(meta['sample_rate_hz']), int(meta['hop_samples']),
                                                    float(meta['mel_lo_hz']), float(meta['mel_hi_hz'])),
                   loss_curve=list(header['loss_curve']), trained_steps=int(header['trained_steps']),
                   dataset=dict(header.get('dataset', {})))


def read_checkpoint(path: Union[str, Path]) -> tuple:
    """Split an MLDM file into (header dict, blob bytes) after magic/version checks."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}", context={'path': str(path)})
    if len(raw) < 12 or raw[:4] != MLDM_MAGIC:
        raise CheckpointError(f"{path} is not an MLDM checkpoint", context={'path': str(path)})
    version, header_len = struct.unpack('<II', raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported",
                              context={'expected': FORMAT_VERSION, 'actual': version})
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"checkpoint {path} is truncated inside its header", context={'path': str(path)})
    try:
        header = json.loads(raw[12:12 + header_len].decode('utf-8'))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Invalid checkpoint header in {path}: {e}", context={'path': str(path)})
    return header, raw[12 + header_len:]


def train(manifest_path: Union[str, Path], training: TrainingConfig, config: DenoiserConfig,
          vocabulary: Optional[Sequence[str]] = None, patch: Sequence[int] = (8, 8),
          show_progress: bool = False, monitor: Optional[PerformanceMonitor] = None) -> Checkpoint:
    """Fit a denoiser on a manifest's clips.

    Args:
        manifest_path: Dataset manifest
        training: Optimizer, schedule and seed settings
        config: Denoiser geometry
        vocabulary: Prompt words (defaults to the words of the manifest prompts)
        patch: Codec patch rows/cols
        show_progress: Show a tqdm bar
        monitor: Optional stage timer

    Returns:
        The trained checkpoint with its loss curve

    Raises:
        DenoiserError: Empty dataset or geometry mismatch
        TrainingDivergedError: Loss became non-finite
    """
    monitor = monitor or PerformanceMonitor("training")
    entries = load_manifest(manifest_path)
    if not entries:
        raise DenoiserError(f"dataset {manifest_path} is empty", context={'manifest': str(manifest_path)})
    with monitor.stage("load_dataset", clips=len(entries)):
        specs = [load_clip(manifest_path, entry) for entry in entries]

    codec = LatentCodec.create(patch[0], patch[1], seed=training.codec_seed).fit_normalization(specs)
    frames, bins = specs[0].frames, specs[0].bins
    grid = codec.grid_for(frames, bins)
    if codec.dim != config.latent_dim or grid[0] * grid[1] != config.tokens:
        raise DenoiserError("codec geometry does not match the denoiser config",
                            context={'codec_dim': codec.dim, 'latent_dim': config.latent_dim,
                                     'tokens': grid[0] * grid[1], 'config_tokens': config.tokens})
    z0_all = torch.tensor(np.stack([codec.encode(spec).tokens for spec in specs]), dtype=torch.float32)
    prompts = [entry.prompt for entry in entries]
    prompt_words = {w for p in prompts for w in p.lower().split()}
    words = sorted({w.lower() for w in vocabulary} if vocabulary is not None else prompt_words)
    uncovered = sorted(prompt_words - set(words))
    if uncovered:
        raise DenoiserError(f"dataset prompts use words outside the vocabulary: {', '.join(uncovered)}",
                            context={'unknown_tokens': uncovered})

    noise_schedule = build_noise_schedule(config.timesteps, training.beta_start, training.beta_end)
    alpha_bar_t = torch.from_numpy(np.array(noise_schedule.alpha_bar, dtype=np.float32))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(training.seed)
        model = Denoiser(config, words)
    optimizer = torch.optim.Adam(model.parameters(), lr=training.learning_rate)
    generator = torch.Generator().manual_seed(training.seed + 1)
    model.train()

    loss_curve: List[float] = []
    batch = training.batch_size
    with monitor.stage("train", steps=training.steps):
        for step in tqdm(range(training.steps), disable=not show_progress, desc="train"):
            index = torch.randint(len(entries), (batch,), generator=generator)
            timesteps = torch.randint(config.timesteps, (batch,), generator=generator)
            noise = torch.randn((batch, config.tokens, config.latent_dim), generator=generator)
            dropped = torch.rand(batch, generator=generator) < training.cond_dropout
            texts = ["" if dropped[i] else prompts[int(index[i])] for i in range(batch)]

            loss = diffusion_loss(model, z0_all[index], timesteps, noise, texts, alpha_bar_t)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at step {step}",
                                            context={'step': step,
                                                     'last_finite_loss': loss_curve[-1] if loss_curve else None,
                                                     'timesteps': timesteps.tolist(),
                                                     'learning_rate': training.learning_rate})
            optimizer.zero_grad()
            loss.backward()
            if training.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), training.grad_clip)
            optimizer.step()
            loss_curve.append(float(loss.detach()))
            if step % training.log_every == 0 or step == training.steps - 1:
                logger.info(f"train step {step}: loss {loss_curve[-1]:.5f}",
                            extra={'step': step, 'loss': loss_curve[-1]})

    checkpoint = Checkpoint(model=model, codec=codec, training=training,
                            spectrogram_meta=specs[0].meta, loss_curve=loss_curve,
                            trained_steps=training.steps,
                            dataset={'manifest': str(manifest_path), 'clips': len(entries),
                                     'frames': frames, 'bins': bins})
    logger.info("Training finished", extra={'steps': training.steps, 'final_loss': loss_curve[-1],
                                            'model_hash': checkpoint.model_hash,
                                            'resources': monitor.snapshot().to_dict()})
    return checkpoint
