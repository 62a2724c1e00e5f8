"""Content and style descriptions of synthetic music clips."""

from typing import List, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

MIDI_LOW = 21
MIDI_HIGH = 108


class ContentSpec(BaseModel):
    """What is played: note onsets, durations and pitches."""

    onsets: List[Tuple[int, int]] = Field(default_factory=list, description="(frame index, duration frames) per note")
    pitches: List[int] = Field(default_factory=list, description="MIDI note number per onset")
    tempo_bpm: float = Field(120.0, gt=0, description="Tempo the onsets were drawn at")

    @field_validator('onsets')
    @classmethod
    def validate_onsets(cls, v):
        """Onset frames strictly increase and every note lasts at least one frame."""
        previous = -1
        for index, (frame, duration) in enumerate(v):
            if frame < 0:
                raise ValueError(f"onset {index} has negative frame {frame}")
            if duration < 1:
                raise ValueError(f"onset {index} has duration {duration} < 1")
            if frame <= previous:
                raise ValueError(f"onsets must be strictly increasing (index {index})")
            previous = frame
        return v

    @field_validator('pitches')
    @classmethod
    def validate_pitches(cls, v):
        for index, pitch in enumerate(v):
            if not MIDI_LOW <= pitch <= MIDI_HIGH:
                raise ValueError(f"pitch {pitch} at index {index} outside [{MIDI_LOW}, {MIDI_HIGH}]")
        return v

    @model_validator(mode='after')
    def validate_alignment(self):
        if len(self.onsets) != len(self.pitches):
            raise ValueError(f"{len(self.onsets)} onsets but {len(self.pitches)} pitches")
        return self

    def transposed(self, semitones: int) -> "ContentSpec":
        """Same rhythm with every pitch shifted by ``semitones``."""
        return ContentSpec(onsets=list(self.onsets),
                           pitches=[p + semitones for p in self.pitches],
                           tempo_bpm=self.tempo_bpm)


class StyleSpec(BaseModel):
    """How it sounds: harmonic recipe, spectral tilt and attack shape."""

    harmonic_amplitudes: List[float] = Field(..., min_length=4, description="Relative amplitude of harmonics 1..K")
    spectral_tilt: float = Field(0.0, description="Gain slope in dB per octave above the fundamental")
    attack_frames: int = Field(0, ge=0, description="Linear attack ramp length in frames")
    decay_per_frame: float = Field(0.05, ge=0, description="Exponential decay rate after the attack")
    label: str = Field(..., min_length=1, description="Attribute class tag")

    @field_validator('harmonic_amplitudes')
    @classmethod
    def validate_harmonics(cls, v):
        if any(a < 0.0 or a > 1.0 for a in v):
            raise ValueError("harmonic amplitudes must lie in [0, 1]")
        if not any(a > 0.0 for a in v):
            raise ValueError("at least one harmonic amplitude must be positive")
        return v
