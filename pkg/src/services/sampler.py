"""Noise schedule, deterministic DDIM sampling and partial DDIM inversion.

Level 0 is the clean latent (alpha_bar_0 = 1); the scheduled grid is
``k * stride`` for k = 0..S-1 with ``stride = T // S``.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.services.attention import HookSet
from src.services.codec import Latent
from src.services.condition import PromptEmbedding, cfg_combine
from src.services.errors import MusicEditorError
from src.utils.hashing import canonical_json, fnv1a_hex

if TYPE_CHECKING:
    from src.services.denoiser import Checkpoint

logger = logging.getLogger(__name__)

INVERSION_BRANCH = "inversion"


class SamplerError(MusicEditorError):
    default_stage = "sampler"


class ScheduleError(SamplerError):
    default_stage = "schedule"


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear betas and the cumulative alpha_bar levels, indexed by timestep."""

    betas: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    beta_start: float
    beta_end: float

    @property
    def timesteps(self) -> int:
        return len(self.betas)

    def level(self, t: int) -> float:
        if not 0 <= t < self.timesteps:
            raise ScheduleError(f"timestep {t} outside [0, {self.timesteps})", context={'timestep': t})
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class TimestepSchedule:
    """S scheduled timesteps, strictly decreasing, bound to one noise schedule."""

    noise: NoiseSchedule
    stride: int
    steps: Tuple[int, ...]
    schedule_hash: str

    @property
    def timesteps(self) -> int:
        return self.noise.timesteps

    @property
    def inference_steps(self) -> int:
        return len(self.steps)

    @property
    def ascending(self) -> Tuple[int, ...]:
        return tuple(reversed(self.steps))

    def round_down(self, t: int) -> int:
        """Largest scheduled step not above ``t``."""
        if not 0 <= t <= self.timesteps:
            raise ScheduleError(f"T_start {t} outside [0, {self.timesteps}]", context={'t_start': t})
        return min((t // self.stride) * self.stride, self.steps[0])

    def previous(self, t: int) -> int:
        return max(t - self.stride, 0)

    def visited_steps(self, t_start_used: int) -> Tuple[int, ...]:
        """Steps inverted to on the way up to ``t_start_used``; the reverse pass from there evaluates the same set."""
        return tuple(t for t in self.ascending if 0 < t <= t_start_used)


def build_noise_schedule(timesteps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 2e-2) -> NoiseSchedule:
    """alpha_bar_0 = 1 and alpha_bar_t = prod_{s<t}(1 - beta_s)."""
    if timesteps < 1:
        raise ScheduleError(f"T must be >= 1, got {timesteps}")
    if not 0 < beta_start < beta_end < 1:
        raise ScheduleError(f"invalid beta range {beta_start}..{beta_end}",
                            context={'beta_start': beta_start, 'beta_end': beta_end})
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)[:-1]])
    betas.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(betas, alpha_bar, beta_start, beta_end)


def build_schedule(timesteps: int = 1000, inference_steps: int = 50, beta_start: float = 1e-4,
                   beta_end: float = 2e-2) -> Tuple[NoiseSchedule, TimestepSchedule]:
    """Build the noise schedule and its uniform-stride step grid.

    Raises:
        ScheduleError: If S is outside [1, T]
    """
    if not 1 <= inference_steps <= timesteps:
        raise ScheduleError(f"inference steps S={inference_steps} must lie in [1, T={timesteps}]",
                            context={'steps': inference_steps, 'timesteps': timesteps})
    noise = build_noise_schedule(timesteps, beta_start, beta_end)
    stride = timesteps // inference_steps
    steps = tuple(k * stride for k in reversed(range(inference_steps)))
    schedule_hash = fnv1a_hex(canonical_json({'T': timesteps, 'S': inference_steps, 'beta_start': beta_start,
                                              'beta_end': beta_end, 'steps': list(steps)}))
    return noise, TimestepSchedule(noise, stride, steps, schedule_hash)


def schedule_for(checkpoint: "Checkpoint", inference_steps: int) -> TimestepSchedule:
    """Step grid matching the noise schedule a checkpoint was trained with."""
    _, schedule = build_schedule(checkpoint.config.timesteps, inference_steps,
                                 checkpoint.training.beta_start, checkpoint.training.beta_end)
    return schedule


def _as_array(x: Union[np.ndarray, torch.Tensor], name: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    array = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise SamplerError(f"{name} contains non-finite values")
    return array


def ddim_transfer(z: np.ndarray, eps_hat: np.ndarray, alpha_from: float, alpha_to: float) -> np.ndarray:
    """Move ``z`` from noise level ``alpha_from`` to ``alpha_to`` along a fixed noise estimate."""
    if alpha_from == alpha_to:
        return z.copy()
    z0_hat = (z - np.sqrt(1.0 - alpha_from) * eps_hat) / np.sqrt(alpha_from)
    return np.sqrt(alpha_to) * z0_hat + np.sqrt(1.0 - alpha_to) * eps_hat


def ddim_reverse_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    if t_prev > t:
        raise ScheduleError(f"reverse step needs t >= t_prev, got {t} -> {t_prev}",
                            context={'t': t, 't_prev': t_prev})
    return ddim_transfer(_as_array(z_t, "z_t"), _as_array(eps_hat, "eps_hat"),
                         schedule.level(t), schedule.level(t_prev))


def ddim_inversion_step(z_t, eps_hat, t: int, t_next: int, schedule: NoiseSchedule) -> np.ndarray:
    """Mirror of :func:`ddim_reverse_step` toward higher noise, ``eps_hat`` taken at (z_t, t_next)."""
    if t_next < t:
        raise ScheduleError(f"inversion step needs t_next >= t, got {t} -> {t_next}",
                            context={'t': t, 't_next': t_next})
    return ddim_transfer(_as_array(z_t, "z_t"), _as_array(eps_hat, "eps_hat"),
                         schedule.level(t), schedule.level(t_next))


def guided_noise(checkpoint: "Checkpoint", z: np.ndarray, t: int, cond: PromptEmbedding,
                 null: PromptEmbedding, cfg_w: float, hooks: HookSet) -> np.ndarray:
    """Classifier-free guided estimate; overrides installed on ``hooks`` reach both branches."""
    if cfg_w == 1.0:
        with hooks.at(t, "cond"):
            return checkpoint.predict_noise(z, t, cond, hooks).double().numpy()
    with hooks.at(t, "uncond"):
        eps_uncond = checkpoint.predict_noise(z, t, null, hooks).double()
    if cfg_w == 0.0:
        return eps_uncond.numpy()
    with hooks.at(t, "cond"):
        eps_cond = checkpoint.predict_noise(z, t, cond, hooks).double()
    return cfg_combine(eps_cond, eps_uncond, cfg_w).numpy()


def _check_checkpoint(checkpoint: "Checkpoint", schedule: TimestepSchedule) -> None:
    if checkpoint.trained_steps < 1:
        raise SamplerError("checkpoint has not been trained", context={'trained_steps': checkpoint.trained_steps})
    if schedule.timesteps != checkpoint.config.timesteps:
        raise SamplerError(f"schedule T={schedule.timesteps} does not match checkpoint "
                           f"T={checkpoint.config.timesteps}",
                           context={'schedule_T': schedule.timesteps, 'checkpoint_T': checkpoint.config.timesteps})


def _embedding(checkpoint: "Checkpoint", prompt: Union[str, PromptEmbedding]) -> PromptEmbedding:
    return prompt if isinstance(prompt, PromptEmbedding) else checkpoint.embed(prompt)


def reverse_from(checkpoint: "Checkpoint", z: np.ndarray, t_start: int, prompt: Union[str, PromptEmbedding],
                 cfg_w: float, schedule: TimestepSchedule, hooks: Optional[HookSet] = None) -> np.ndarray:
    """Run reverse steps from scheduled level ``t_start`` down to the clean level 0."""
    _check_checkpoint(checkpoint, schedule)
    if cfg_w < 0:
        raise SamplerError(f"cfg_w must be >= 0, got {cfg_w}")
    hooks = hooks or HookSet()
    cond = _embedding(checkpoint, prompt)
    null = checkpoint.null_prompt()
    z = _as_array(z, "z")
    t = t_start
    while t > 0:
        eps_hat = guided_noise(checkpoint, z, t, cond, null, cfg_w, hooks)
        t_prev = schedule.previous(t)
        z = ddim_reverse_step(z, eps_hat, t, t_prev, schedule.noise)
        t = t_prev
    return z


def sample(checkpoint: "Checkpoint", prompt: Union[str, PromptEmbedding], cfg_w: float,
           schedule: TimestepSchedule, seed: int, hooks: Optional[HookSet] = None) -> Latent:
    """Generate a latent from seeded Gaussian noise at the top scheduled level.

    Raises:
        SamplerError: Untrained checkpoint, T mismatch or negative guidance
    """
    _check_checkpoint(checkpoint, schedule)
    z_top = np.random.default_rng(seed).standard_normal((checkpoint.config.tokens, checkpoint.config.latent_dim))
    tokens = reverse_from(checkpoint, z_top, schedule.steps[0], prompt, cfg_w, schedule, hooks)
    return checkpoint.latent(tokens)


@dataclass(frozen=True)
class InversionResult:
    latent: Latent
    t_start_used: int
    visited_steps: Tuple[int, ...]


def invert_partial(checkpoint: "Checkpoint", z0: Latent, t_start: int, schedule: TimestepSchedule,
                   hooks: Optional[HookSet] = None) -> InversionResult:
    """Invert ``z0`` up to ``t_start`` (rounded down to the grid) under the null prompt without guidance.

    Each step up to a grid level t is evaluated at t inside
    ``hooks.at(t, "inversion")``, so a capture sink sees SA queries/keys at
    the same steps the reverse pass from ``t_start_used`` later visits.

    Raises:
        ScheduleError: If ``t_start`` is outside [0, T]
    """
    _check_checkpoint(checkpoint, schedule)
    used = schedule.round_down(t_start)
    if used != t_start:
        logger.info(f"T_start {t_start} rounded down to scheduled step {used}",
                    extra={'t_start': t_start, 't_start_used': used, 'stride': schedule.stride})
    hooks = hooks or HookSet()
    null = checkpoint.null_prompt()
    visited = schedule.visited_steps(used)
    z = _as_array(z0.tokens, "z0")
    for t in visited:
        with hooks.at(t, INVERSION_BRANCH):
            eps_hat = checkpoint.predict_noise(z0.with_tokens(z), t, null, hooks).double().numpy()
        z = ddim_inversion_step(z, eps_hat, schedule.previous(t), t, schedule.noise)
    return InversionResult(z0.with_tokens(z), used, visited)


def reconstruction_error(checkpoint: "Checkpoint", latents: Sequence[Latent],
                         steps_list: Sequence[int] = (10, 25, 50),
                         t_start: Optional[int] = None) -> Dict[int, float]:
    """Mean relative L2 error of invert-then-reverse under the null prompt, per inference-step count."""
    errors: Dict[int, float] = {}
    for steps in steps_list:
        schedule = schedule_for(checkpoint, steps)
        target = checkpoint.config.timesteps if t_start is None else t_start
        relative: List[float] = []
        for latent in latents:
            inverted = invert_partial(checkpoint, latent, target, schedule)
            restored = reverse_from(checkpoint, inverted.latent.tokens, inverted.t_start_used, "", 1.0, schedule)
            relative.append(float(np.linalg.norm(restored - latent.tokens) / max(np.linalg.norm(latent.tokens), 1e-12)))
        errors[steps] = float(np.mean(relative)) if relative else 0.0
        logger.info(f"reconstruction error at S={steps}: {errors[steps]:.5f}",
                    extra={'steps': steps, 'clips': len(relative)})
    return errors
