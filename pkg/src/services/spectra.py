"""Synthetic clip rendering, spectrogram features, WAV ingestion and dataset generation."""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
from mutagen import MutagenError
from mutagen.wave import WAVE
from pydantic import BaseModel, ValidationError

from src.models.config import EDIT_TYPES, AttributeRegistry, DatasetConfig, SpectraConfig
from src.models.music import ContentSpec, StyleSpec
from src.services.errors import MusicEditorError
from src.utils.fileio import atomic_write_bytes, dumps_json

logger = logging.getLogger(__name__)

MSPC_MAGIC = b"MSPC"
_MAJOR = (0, 2, 4, 5, 7, 9, 11)
_MINOR = (0, 2, 3, 5, 7, 8, 10)


class SpectrogramError(MusicEditorError):
    default_stage = "spectra"


class WavFormatError(SpectrogramError):
    """WAV file is not 16-bit PCM or its header cannot be parsed."""


class ChannelCountError(WavFormatError):
    """WAV file is not mono."""


class DatasetError(SpectrogramError):
    default_stage = "dataset"


@dataclass(frozen=True)
class SpectrogramMeta:
    sample_rate_hz: int
    hop_samples: int
    mel_lo_hz: float
    mel_hi_hz: float

    @classmethod
    def from_config(cls, config: SpectraConfig) -> "SpectrogramMeta":
        return cls(config.sample_rate_hz, config.hop_samples, config.mel_lo_hz, config.mel_hi_hz)

    def to_dict(self) -> Dict[str, Any]:
        return {'sample_rate_hz': self.sample_rate_hz, 'hop_samples': self.hop_samples,
                'mel_lo_hz': self.mel_lo_hz, 'mel_hi_hz': self.mel_hi_hz}


@dataclass(frozen=True)
class MelSpectrogram:
    """Frames x mel-bins matrix of nonnegative magnitudes."""

    data: np.ndarray
    meta: SpectrogramMeta

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise SpectrogramError(f"spectrogram must be a non-empty 2-D matrix, got shape {data.shape}",
                                   context={'shape': list(data.shape)})
        if not np.all(np.isfinite(data)):
            raise SpectrogramError("spectrogram contains non-finite values")
        if np.any(data < 0):
            raise SpectrogramError("spectrogram contains negative magnitudes",
                                   context={'min': float(data.min())})
        m = self.meta
        if m.sample_rate_hz <= 0 or m.hop_samples <= 0 or m.mel_lo_hz <= 0 or m.mel_hi_hz <= 0:
            raise SpectrogramError("spectrogram metadata fields must be positive", context=m.to_dict())
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "MelSpectrogram":
        return MelSpectrogram(data, self.meta)


def mel_center_frequencies(bins: int, mel_lo_hz: float, mel_hi_hz: float) -> np.ndarray:
    """Center frequency in Hz of each of ``bins`` HTK-mel bands spanning [lo, hi]."""
    return librosa.mel_frequencies(n_mels=bins + 2, fmin=mel_lo_hz, fmax=mel_hi_hz, htk=True)[1:-1]


def _harmonic_profile(pitch: int, style: StyleSpec, centers_mel: np.ndarray, meta: SpectrogramMeta) -> np.ndarray:
    """Per-bin magnitude of one sustained note, before the time envelope."""
    profile = np.zeros(len(centers_mel))
    fundamental = float(librosa.midi_to_hz(pitch))
    for harmonic, amplitude in enumerate(style.harmonic_amplitudes, start=1):
        if amplitude <= 0.0:
            continue
        frequency = harmonic * fundamental
        if frequency < meta.mel_lo_hz or frequency > meta.mel_hi_hz:
            continue
        position = float(librosa.hz_to_mel(frequency, htk=True))
        if position < centers_mel[0] or position > centers_mel[-1]:
            continue
        gain = amplitude * 10.0 ** (style.spectral_tilt * np.log2(harmonic) / 20.0)
        upper = int(np.searchsorted(centers_mel, position))
        if upper == 0 or centers_mel[upper] == position:
            profile[upper] += gain
            continue
        lower = upper - 1
        weight = (position - centers_mel[lower]) / (centers_mel[upper] - centers_mel[lower])
        profile[lower] += gain * (1.0 - weight)
        profile[upper] += gain * weight
    return profile


def note_envelope(length: int, style: StyleSpec) -> np.ndarray:
    """Linear attack ramp then exponential decay over ``length`` frames."""
    envelope = np.empty(length)
    attack = style.attack_frames
    for k in range(length):
        if k < attack:
            envelope[k] = (k + 1) / (attack + 1)
        else:
            envelope[k] = np.exp(-style.decay_per_frame * (k - attack))
    return envelope


def render_clip(content: ContentSpec, style: StyleSpec, frames: int, bins: int,
                config: Optional[SpectraConfig] = None) -> MelSpectrogram:
    """Render ``content`` played with ``style`` into a mel spectrogram.

    Each harmonic is placed by linear interpolation in mel between the two
    nearest bin centers and scaled by the spectral tilt.

    Args:
        content: Notes to play
        style: Timbre and envelope
        frames: Output frame count
        bins: Output mel-bin count
        config: Spectrogram parameters (defaults when omitted)

    Returns:
        The rendered MelSpectrogram

    Raises:
        SpectrogramError: If an onset lies beyond the clip or the size is out of bounds
    """
    config = config or SpectraConfig()
    if not (1 <= frames <= config.max_frames and 1 <= bins <= config.max_bins):
        raise SpectrogramError(f"clip size {frames}x{bins} outside configured bounds",
                               context={'frames': frames, 'bins': bins,
                                        'max_frames': config.max_frames, 'max_bins': config.max_bins})
    for index, (frame, _) in enumerate(content.onsets):
        if frame >= frames:
            raise SpectrogramError(f"onset {index} at frame {frame} is beyond clip length {frames}",
                                   context={'onset_index': index, 'frame': frame, 'frames': frames})

    meta = SpectrogramMeta.from_config(config)
    centers_mel = librosa.hz_to_mel(mel_center_frequencies(bins, meta.mel_lo_hz, meta.mel_hi_hz), htk=True)
    data = np.zeros((frames, bins))
    for (frame, duration), pitch in zip(content.onsets, content.pitches):
        stop = min(frame + duration, frames)
        profile = _harmonic_profile(pitch, style, centers_mel, meta)
        data[frame:stop] += np.outer(note_envelope(stop - frame, style), profile)
    return MelSpectrogram(data, meta)


def chroma(spec: MelSpectrogram) -> np.ndarray:
    """Fold mel-bin energy onto 12 pitch classes (C=0 ... B=11).

    Each bin goes to the pitch class nearest its center frequency. Rows are
    L2-normalized; silent frames give zero rows.

    Returns:
        F x 12 array
    """
    centers = mel_center_frequencies(spec.bins, spec.meta.mel_lo_hz, spec.meta.mel_hi_hz)
    classes = np.mod(np.round(librosa.hz_to_midi(centers)).astype(int), 12)
    folding = np.zeros((spec.bins, 12))
    folding[np.arange(spec.bins), classes] = 1.0
    raw = spec.data @ folding
    return librosa.util.normalize(raw, norm=2, axis=1, threshold=1e-12, fill=False)


def onset_envelope(spec: MelSpectrogram) -> np.ndarray:
    """Half-wave-rectified log spectral flux; ``values[0]`` is 0."""
    log_mag = np.log1p(spec.data)
    values = np.zeros(spec.frames)
    if spec.frames > 1:
        values[1:] = np.maximum(np.diff(log_mag, axis=0), 0.0).sum(axis=1)
    return values


def onset_frames(envelope: np.ndarray, relative_threshold: float = 0.5) -> List[int]:
    """Frames that are local maxima of ``envelope`` above a fraction of its global max."""
    peak = float(envelope.max()) if envelope.size else 0.0
    if peak <= 0.0:
        return []
    frames = []
    for f in range(len(envelope)):
        left = envelope[f - 1] if f > 0 else -np.inf
        right = envelope[f + 1] if f + 1 < len(envelope) else -np.inf
        if envelope[f] > left and envelope[f] >= right and envelope[f] > relative_threshold * peak:
            frames.append(f)
    return frames


def load_wav(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file.

    Returns:
        (int16 samples, sample rate)

    Raises:
        WavFormatError: Malformed header or unsupported sample format
        ChannelCountError: More than one channel
    """
    path = Path(path)
    try:
        info = WAVE(str(path)).info
    except (MutagenError, OSError, ValueError, KeyError, EOFError) as e:
        raise WavFormatError(f"Malformed WAV header in {path}: {e}", context={'path': str(path)},
                             original_exception=e)
    if info.channels != 1:
        raise ChannelCountError(f"{path} has {info.channels} channels, expected mono",
                                context={'path': str(path), 'channels': info.channels})
    if info.bits_per_sample != 16:
        raise WavFormatError(f"{path} is {info.bits_per_sample}-bit, expected 16-bit PCM",
                             context={'path': str(path), 'bits_per_sample': info.bits_per_sample})
    samples, sample_rate = sf.read(str(path), dtype='int16', always_2d=False)
    return np.asarray(samples), int(sample_rate)


def wav_to_mel(pcm: np.ndarray, params: SpectraConfig, sample_rate_hz: Optional[int] = None) -> MelSpectrogram:
    """Magnitude STFT followed by a triangular mel filterbank.

    Args:
        pcm: Mono 16-bit samples
        params: Analysis parameters
        sample_rate_hz: Rate of ``pcm``; resampled to ``params.sample_rate_hz`` when different

    Raises:
        SpectrogramError: Empty input
        ChannelCountError: Multi-channel input
    """
    samples = np.asarray(pcm)
    if samples.ndim != 1:
        raise ChannelCountError(f"expected mono samples, got shape {samples.shape}",
                                context={'shape': list(samples.shape)})
    if samples.size == 0:
        raise SpectrogramError("cannot analyse empty PCM input")
    audio = samples.astype(np.float32) / 32768.0
    if sample_rate_hz is not None and sample_rate_hz != params.sample_rate_hz:
        audio = librosa.resample(audio, orig_sr=sample_rate_hz, target_sr=params.sample_rate_hz)
    magnitude = np.abs(librosa.stft(audio, n_fft=params.n_fft, hop_length=params.hop_samples,
                                    window='hann', center=True))
    filters = librosa.filters.mel(sr=params.sample_rate_hz, n_fft=params.n_fft, n_mels=params.bins,
                                  fmin=params.mel_lo_hz, fmax=params.mel_hi_hz, htk=True, norm=None)
    mel = (filters @ magnitude).T.astype(np.float64)
    return MelSpectrogram(np.maximum(mel, 0.0), SpectrogramMeta.from_config(params))


def random_content(rng: np.random.Generator, frames: int, tempo_bpm: float, mode: str,
                   config: Optional[SpectraConfig] = None) -> ContentSpec:
    """Draw a melody on a sixteenth-note grid.

    Every note is followed by at least one silent frame so each onset shows a
    single flux peak. The first onset is never frame 0.
    """
    config = config or SpectraConfig()
    scale = _MAJOR if mode == 'major' else _MINOR
    step = max(2, int(round(config.frames_per_second * 60.0 / tempo_bpm / 4.0)))
    tonic = int(rng.integers(config.pitch_low, max(config.pitch_low, config.pitch_high - 12) + 1))
    onsets, pitches = [], []
    frame = int(rng.integers(1, step + 1))
    while frame < frames:
        gap = step * int(rng.integers(1, 3))
        duration = max(1, min(gap - 1, frames - frame))
        pitch = tonic + scale[int(rng.integers(len(scale)))] + 12 * int(rng.integers(0, 2))
        while pitch > config.pitch_high:
            pitch -= 12
        onsets.append((frame, duration))
        pitches.append(pitch)
        frame += gap
    return ContentSpec(onsets=onsets, pitches=pitches, tempo_bpm=tempo_bpm)


def save_spectrogram(spec: MelSpectrogram, path: Union[str, Path]) -> Path:
    """Write ``spec`` in the MSPC format."""
    header = json.dumps({'rows': spec.frames, 'cols': spec.bins, **spec.meta.to_dict()},
                        sort_keys=True).encode('utf-8')
    body = np.ascontiguousarray(spec.data, dtype='<f4').tobytes()
    return atomic_write_bytes(path, MSPC_MAGIC + struct.pack('<I', len(header)) + header + body)


def load_spectrogram(path: Union[str, Path]) -> MelSpectrogram:
    """Read an MSPC file.

    Raises:
        SpectrogramError: Bad magic, bad header or truncated data
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise SpectrogramError(f"Cannot read spectrogram {path}: {e}", context={'path': str(path)})
    if raw[:4] != MSPC_MAGIC or len(raw) < 8:
        raise SpectrogramError(f"{path} is not an MSPC file", context={'path': str(path)})
    (header_len,) = struct.unpack('<I', raw[4:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode('utf-8'))
        rows, cols = int(header['rows']), int(header['cols'])
        meta = SpectrogramMeta(int(header['sample_rate_hz']), int(header['hop_samples']),
                               float(header['mel_lo_hz']), float(header['mel_hi_hz']))
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise SpectrogramError(f"Invalid MSPC header in {path}: {e}", context={'path': str(path)})
    body = raw[8 + header_len:]
    expected = rows * cols * 4
    if len(body) != expected:
        raise SpectrogramError(f"{path} holds {len(body)} data bytes, expected {expected}",
                               context={'path': str(path), 'expected': expected, 'actual': len(body)})
    data = np.frombuffer(body, dtype='<f4').reshape(rows, cols).astype(np.float64)
    return MelSpectrogram(data, meta)


class ManifestEntry(BaseModel):
    """One clip of a dataset or benchmark manifest."""

    id: str
    path: str
    attribute_axis: str
    class_label: str
    prompt: str
    content: ContentSpec
    style: StyleSpec
    target_prompt: Optional[str] = None
    target_class: Optional[str] = None
    edit_type: Optional[str] = None


def load_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Load and re-validate every entry of a manifest.

    Raises:
        DatasetError: Unreadable file or invalid entry
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Cannot read manifest {path}: {e}", context={'path': str(path)})
    if not isinstance(entries, list):
        raise DatasetError(f"Manifest {path} must be a JSON array", context={'path': str(path)})
    result = []
    for index, entry in enumerate(entries):
        try:
            result.append(ManifestEntry(**entry))
        except (ValidationError, TypeError) as e:
            raise DatasetError(f"Invalid manifest entry {index} in {path}: {e}",
                               context={'path': str(path), 'index': index})
    return result


def load_clip(manifest_path: Union[str, Path], entry: ManifestEntry) -> MelSpectrogram:
    """Load the spectrogram of ``entry``; relative paths resolve against the manifest's directory."""
    clip_path = Path(entry.path)
    if not clip_path.is_absolute():
        clip_path = Path(manifest_path).parent / clip_path
    return load_spectrogram(clip_path)


def _content_for(axis: str, class_name: str, registry: AttributeRegistry, rng: np.random.Generator,
                 config: SpectraConfig) -> ContentSpec:
    if axis == "mood":
        mood = registry.mood[class_name]
        return random_content(rng, config.frames, mood.tempo_bpm, mood.mode, config)
    low, high = registry.tempo_range_bpm
    mode = 'major' if rng.random() < 0.5 else 'minor'
    return random_content(rng, config.frames, float(rng.uniform(low, high)), mode, config)


def gen_dataset(dataset: DatasetConfig, seed: int, out_dir: Union[str, Path], registry: AttributeRegistry,
                config: Optional[SpectraConfig] = None, jobs: int = 1) -> List[ManifestEntry]:
    """Render labeled clips and write them with a ``manifest.json``.

    Args:
        dataset: Axes and per-class clip counts
        seed: Generation seed; identical seeds give byte-identical outputs
        out_dir: Output directory (clips go under ``clips/``)
        registry: Attribute classes and prompt templates
        config: Spectrogram parameters
        jobs: Worker threads used for file writing

    Returns:
        The manifest entries, in file order

    Raises:
        DatasetError: Fewer than two classes on an axis, a bad count, or an unwritable directory
    """
    config = config or SpectraConfig()
    counts = dataset.resolved_counts(registry)
    for axis, classes in counts.items():
        if len(classes) < 2:
            raise DatasetError(f"axis '{axis}' needs at least two classes", context={'axis': axis})
        for name, count in classes.items():
            if count < 1:
                raise DatasetError(f"class '{name}' has count {count}", context={'axis': axis, 'class': name})
            if name not in registry.classes(axis):
                raise DatasetError(f"unknown {axis} class '{name}'", context={'axis': axis, 'class': name})

    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"Cannot create output directory {out}: {e}", context={'path': str(out)})

    jobs_list: List[Tuple[ManifestEntry, MelSpectrogram]] = []
    for axis_index, (axis, classes) in enumerate(counts.items()):
        for class_index, (name, count) in enumerate(classes.items()):
            style = registry.style_for(axis, name)
            for i in range(count):
                rng = np.random.default_rng([seed, axis_index, class_index, i])
                content = _content_for(axis, name, registry, rng, config)
                clip_id = f"{axis}-{name}-{i:04d}"
                entry = ManifestEntry(id=clip_id, path=f"clips/{clip_id}.mspc", attribute_axis=axis,
                                      class_label=style.label, prompt=registry.prompt(axis, name),
                                      content=content, style=style)
                jobs_list.append((entry, render_clip(content, style, config.frames, config.bins, config)))

    def write(item: Tuple[ManifestEntry, MelSpectrogram]) -> None:
        entry, spec = item
        save_spectrogram(spec, out / entry.path)

    try:
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            list(pool.map(write, jobs_list))
        entries = [entry for entry, _ in jobs_list]
        atomic_write_bytes(out / "manifest.json", dumps_json([e.model_dump(exclude_none=True) for e in entries]))
    except OSError as e:
        raise DatasetError(f"Cannot write dataset to {out}: {e}", context={'path': str(out)})

    logger.info("Dataset generated", extra={'clips': len(entries), 'out_dir': str(out), 'seed': seed})
    return entries


def build_benchmark(manifest_path: Union[str, Path], registry: AttributeRegistry, seed: int,
                    out_path: Optional[Union[str, Path]] = None,
                    per_axis: Optional[int] = None) -> List[ManifestEntry]:
    """Pair dataset clips with a target prompt of another class on the same axis.

    Args:
        manifest_path: Dataset manifest to draw sources from
        registry: Attribute registry for target prompts
        seed: Seed for source selection and target classes
        out_path: Where to write the benchmark manifest (clip paths stay relative to it)
        per_axis: Maximum number of pairs per axis (all clips when omitted)
    """
    manifest_path = Path(manifest_path)
    entries = load_manifest(manifest_path)
    rng = np.random.default_rng(seed)
    pairs: List[ManifestEntry] = []
    for axis in sorted({e.attribute_axis for e in entries}, key=lambda a: list(EDIT_TYPES).index(a)):
        candidates = [e for e in entries if e.attribute_axis == axis]
        order = rng.permutation(len(candidates))
        if per_axis is not None:
            order = order[:per_axis]
        for index in order:
            source = candidates[int(index)]
            others = [name for name in registry.classes(axis) if name != source.class_label]
            target = others[int(rng.integers(len(others)))]
            pairs.append(source.model_copy(update={
                'target_prompt': registry.prompt(axis, target),
                'target_class': target,
                'edit_type': EDIT_TYPES[axis],
            }))
    if out_path is not None:
        out_path = Path(out_path)
        relocated = []
        for pair in pairs:
            absolute = (manifest_path.parent / pair.path).resolve()
            try:
                rel = absolute.relative_to(out_path.parent.resolve())
                relocated.append(pair.model_copy(update={'path': str(rel)}))
            except ValueError:
                relocated.append(pair.model_copy(update={'path': str(absolute)}))
        pairs = relocated
        atomic_write_bytes(out_path, dumps_json([p.model_dump(exclude_none=True) for p in pairs]))
    return pairs
