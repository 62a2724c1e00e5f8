"""Configuration data models for the music editing pipeline."""

import os
import re
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from src.models.music import StyleSpec
from src.utils.hashing import canonical_json, fnv1a_hex

ATTRIBUTE_AXES = ("instrument", "style", "mood")

# Edit-type tag used by benchmark manifests for each attribute axis.
EDIT_TYPES = {"instrument": "timbre", "style": "style", "mood": "mood"}

_WORD = re.compile(r"^[a-z][a-z0-9_]*$")


class AppConfig(BaseModel):
    """Application configuration model."""

    config_dir: str = Field(default="./config", description="Configuration directory path")
    work_dir: str = Field(default="./work", description="Working directory for run outputs")
    log_dir: str = Field(default="./work/logs", description="Directory for rotating log files")
    log_level: str = Field(default="INFO", description="Root log level")
    default_model_path: Optional[str] = Field(default=None, description="Checkpoint used when --model is omitted")

    @field_validator('config_dir', 'work_dir', 'log_dir')
    @classmethod
    def validate_directories(cls, v):
        """Validate directory paths."""
        if not v:
            raise ValueError("Directory path cannot be empty")
        return v

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v):
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level '{v}'")
        return level

    @classmethod
    def from_env(cls) -> "AppConfig":
        """Build from APP_CONFIG_DIR, APP_WORK_DIR, APP_LOG_DIR, LOG_LEVEL and MUSIC_EDITOR_MODEL."""
        work_dir = os.getenv("APP_WORK_DIR", "./work")
        return cls(
            config_dir=os.getenv("APP_CONFIG_DIR", "./config"),
            work_dir=work_dir,
            log_dir=os.getenv("APP_LOG_DIR", os.path.join(work_dir, "logs")),
            log_level=os.getenv("LOG_LEVEL", "INFO"),
            default_model_path=os.getenv("MUSIC_EDITOR_MODEL") or None,
        )


class SpectraConfig(BaseModel):
    """Spectrogram geometry and analysis parameters.

    The default mel range places bin centers exactly on 440 Hz (bin 12) and
    880 Hz (bin 21), so pure A tones land in a single bin.
    """

    frames: int = Field(64, ge=1, description="Frames per clip")
    bins: int = Field(64, ge=1, description="Mel bins per frame")
    sample_rate_hz: int = Field(16000, gt=0)
    hop_samples: int = Field(256, gt=0)
    n_fft: int = Field(1024, gt=0, description="STFT window length used for WAV ingestion")
    mel_lo_hz: float = Field(11.46, gt=0)
    mel_hi_hz: float = Field(6814.8, gt=0)
    max_frames: int = Field(4096, ge=1)
    max_bins: int = Field(512, ge=1)
    pitch_low: int = Field(48, ge=21, le=108)
    pitch_high: int = Field(84, ge=21, le=108)

    @model_validator(mode='after')
    def validate_consistency(self):
        if self.mel_hi_hz <= self.mel_lo_hz:
            raise ValueError("mel_hi_hz must exceed mel_lo_hz")
        if self.mel_hi_hz > self.sample_rate_hz / 2:
            raise ValueError("mel_hi_hz must not exceed the Nyquist frequency")
        if self.hop_samples > self.n_fft:
            raise ValueError("hop_samples must not exceed n_fft")
        if self.frames > self.max_frames or self.bins > self.max_bins:
            raise ValueError("frames/bins exceed configured bounds")
        if self.pitch_low > self.pitch_high:
            raise ValueError("pitch_low must not exceed pitch_high")
        return self

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate_hz / self.hop_samples


class InstrumentClass(BaseModel):
    """Instrument axis entry: a harmonic recipe and an envelope."""

    harmonic_amplitudes: List[float] = Field(..., min_length=4)
    attack_frames: int = Field(0, ge=0)
    decay_per_frame: float = Field(0.05, ge=0)


class StyleClass(BaseModel):
    """Style axis entry: spectral tilt and texture over the neutral timbre."""

    spectral_tilt: float = Field(..., description="dB per octave")
    attack_frames: int = Field(0, ge=0)
    decay_per_frame: float = Field(0.05, ge=0)


class MoodClass(BaseModel):
    """Mood axis entry: drives the content generator, not the timbre."""

    tempo_bpm: float = Field(..., gt=0)
    mode: str = Field(..., description="'major' or 'minor'")

    @field_validator('mode')
    @classmethod
    def validate_mode(cls, v):
        if v not in ('major', 'minor'):
            raise ValueError("mode must be either 'major' or 'minor'")
        return v


class AttributeRegistry(BaseModel):
    """Attribute classes per axis plus the prompt templates built from them."""

    templates: Dict[str, str] = Field(default_factory=lambda: {
        "instrument": "a solo {} music",
        "style": "a typical {} music",
        "mood": "a {} music",
    })
    neutral_harmonics: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.33, 0.25, 0.2], min_length=4)
    tempo_range_bpm: Tuple[float, float] = (100.0, 140.0)
    instrument: Dict[str, InstrumentClass] = Field(default_factory=dict)
    style: Dict[str, StyleClass] = Field(default_factory=dict)
    mood: Dict[str, MoodClass] = Field(default_factory=dict)

    @field_validator('templates')
    @classmethod
    def validate_templates(cls, v):
        for axis in ATTRIBUTE_AXES:
            if axis not in v:
                raise ValueError(f"missing prompt template for axis '{axis}'")
            if v[axis].count("{}") != 1:
                raise ValueError(f"template for '{axis}' must contain exactly one '{{}}'")
        return v

    @field_validator('instrument', 'style', 'mood')
    @classmethod
    def validate_class_names(cls, v):
        for name in v:
            if not _WORD.match(name):
                raise ValueError(f"class name '{name}' must be a single lowercase word")
        return v

    @model_validator(mode='after')
    def validate_unique_names(self):
        seen: Dict[str, str] = {}
        for axis in ATTRIBUTE_AXES:
            for name in self.classes(axis):
                if name in seen:
                    raise ValueError(f"class '{name}' appears on both '{seen[name]}' and '{axis}' axes")
                seen[name] = axis
        low, high = self.tempo_range_bpm
        if not 0 < low <= high:
            raise ValueError("tempo_range_bpm must be positive and ordered")
        return self

    def classes(self, axis: str) -> List[str]:
        """Class names of ``axis`` in declaration order."""
        if axis not in ATTRIBUTE_AXES:
            raise KeyError(f"unknown attribute axis '{axis}'")
        return list(getattr(self, axis).keys())

    def axis_of(self, class_name: str) -> Optional[str]:
        for axis in ATTRIBUTE_AXES:
            if class_name in getattr(self, axis):
                return axis
        return None

    def prompt(self, axis: str, class_name: str) -> str:
        if class_name not in self.classes(axis):
            raise KeyError(f"unknown {axis} class '{class_name}'")
        return self.templates[axis].format(class_name)

    def class_in_prompt(self, axis: str, prompt: str) -> Optional[str]:
        """The ``axis`` class named in ``prompt``, if exactly one is."""
        words = set(prompt.split())
        found = [name for name in self.classes(axis) if name in words]
        return found[0] if len(found) == 1 else None

    def style_for(self, axis: str, class_name: str) -> StyleSpec:
        """StyleSpec used to render clips of ``class_name``."""
        if axis == "instrument":
            entry = self.instrument[class_name]
            return StyleSpec(harmonic_amplitudes=entry.harmonic_amplitudes, spectral_tilt=0.0,
                             attack_frames=entry.attack_frames, decay_per_frame=entry.decay_per_frame,
                             label=class_name)
        if axis == "style":
            entry = self.style[class_name]
            return StyleSpec(harmonic_amplitudes=self.neutral_harmonics, spectral_tilt=entry.spectral_tilt,
                             attack_frames=entry.attack_frames, decay_per_frame=entry.decay_per_frame,
                             label=class_name)
        if axis == "mood":
            if class_name not in self.mood:
                raise KeyError(f"unknown mood class '{class_name}'")
            return StyleSpec(harmonic_amplitudes=self.neutral_harmonics, label=class_name)
        raise KeyError(f"unknown attribute axis '{axis}'")

    def vocabulary(self) -> List[str]:
        """Sorted word list covering every template and class name."""
        words = set()
        for axis in ATTRIBUTE_AXES:
            words.update(self.templates[axis].replace("{}", " ").split())
            words.update(self.classes(axis))
        return sorted(words)


class DatasetConfig(BaseModel):
    """Which attribute axes to synthesize and how many clips per class."""

    axes: List[str] = Field(default_factory=lambda: list(ATTRIBUTE_AXES))
    clips_per_class: int = Field(24, ge=1)
    counts: Optional[Dict[str, Dict[str, int]]] = Field(
        default=None, description="Explicit per-class counts; overrides axes/clips_per_class")

    @field_validator('axes')
    @classmethod
    def validate_axes(cls, v):
        for axis in v:
            if axis not in ATTRIBUTE_AXES:
                raise ValueError(f"unknown attribute axis '{axis}'")
        return v

    def resolved_counts(self, registry: AttributeRegistry) -> Dict[str, Dict[str, int]]:
        if self.counts is not None:
            return {axis: dict(classes) for axis, classes in self.counts.items()}
        return {axis: {name: self.clips_per_class for name in registry.classes(axis)} for axis in self.axes}


class DenoiserConfig(BaseModel):
    """Toy denoiser geometry. Layer indices elsewhere are 1-based into ``layers``."""

    layers: int = Field(16, ge=1)
    tokens: int = Field(64, ge=1, description="Latent tokens N")
    latent_dim: int = Field(64, ge=1, description="Codec token width d")
    d_eps: int = Field(64, ge=1, description="Residual stream width")
    d_s: int = Field(64, ge=1, description="Self-attention inner width")
    d_c: int = Field(64, ge=1, description="Cross-attention inner width")
    d_tau: int = Field(64, ge=1, description="Prompt embedding width")
    heads: int = Field(4, ge=1)
    hidden: int = Field(128, ge=1, description="Feed-forward hidden width")
    timesteps: int = Field(1000, ge=1, description="Diffusion length T")

    @model_validator(mode='after')
    def validate_heads(self):
        if self.d_s % self.heads or self.d_c % self.heads:
            raise ValueError("d_s and d_c must be divisible by heads")
        return self

    @property
    def sa_head_dim(self) -> int:
        return self.d_s // self.heads

    @property
    def ca_head_dim(self) -> int:
        return self.d_c // self.heads

    def config_hash(self) -> str:
        return fnv1a_hex(canonical_json(self.model_dump()))


class TrainingConfig(BaseModel):
    """Optimizer and noise-schedule settings recorded in every checkpoint."""

    steps: int = Field(2000, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    cond_dropout: float = Field(0.1, ge=0, le=1)
    grad_clip: float = Field(1.0, ge=0, description="Max global grad norm; 0 disables clipping")
    seed: int = 0
    codec_seed: int = 0
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(2e-2, gt=0, lt=1)
    log_every: int = Field(100, ge=1)
    optimizer: str = "adam"

    @model_validator(mode='after')
    def validate_betas(self):
        if self.beta_end <= self.beta_start:
            raise ValueError("beta_end must exceed beta_start")
        return self


class EditConfig(BaseModel):
    """Full reproducibility record of one edit (layer indices are 1-based)."""

    t_start: int = Field(700, ge=0, description="Inversion depth; rounded down to the step grid")
    layer_window: List[int] = Field(default_factory=lambda: list(range(8, 15)))
    cfg_w: float = Field(5.5, ge=0)
    steps: int = Field(50, ge=1)
    seed: int = 0

    @field_validator('layer_window')
    @classmethod
    def validate_layer_window(cls, v):
        if any(layer < 1 for layer in v):
            raise ValueError("layer indices are 1-based")
        return sorted(set(v))

    @staticmethod
    def parse_layers(text: str) -> List[int]:
        """Parse the layer grammar: ``8-14``, ``1-16``, ``none`` or ``3,5,9``."""
        spec = text.strip().lower()
        if spec in ("none", ""):
            return []
        layers = set()
        for part in spec.split(","):
            part = part.strip()
            if "-" in part:
                low, high = (int(p) for p in part.split("-", 1))
                if high < low:
                    raise ValueError(f"empty layer range '{part}'")
                layers.update(range(low, high + 1))
            else:
                layers.add(int(part))
        return sorted(layers)

    @staticmethod
    def format_layers(layers: List[int]) -> str:
        if not layers:
            return "None"
        ordered = sorted(layers)
        if ordered == list(range(ordered[0], ordered[-1] + 1)) and len(ordered) > 1:
            return f"{ordered[0]}-{ordered[-1]}"
        return ",".join(str(layer) for layer in ordered)


class ProbeConfig(BaseModel):
    """Map collection and MLP probe settings."""

    prompts_per_class: int = Field(20, ge=1)
    steps_to_sample: int = Field(8, ge=1)
    sampling_steps: int = Field(50, ge=1)
    cfg_w: float = Field(5.5, ge=0)
    hidden_width: int = Field(128, ge=1)
    train_fraction: float = Field(0.7, gt=0, lt=1)
    train_steps: int = Field(400, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    sa_pool: int = Field(16, ge=1, description="SA maps are block-pooled to sa_pool x sa_pool")
    highlight_layers: List[int] = Field(default_factory=lambda: [1, 4, 6, 10, 13, 16])
    seed: int = 0


class PipelineDefaults(BaseModel):
    """Contents of config/defaults.json."""

    spectra: SpectraConfig = Field(default_factory=SpectraConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    edit: EditConfig = Field(default_factory=EditConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
