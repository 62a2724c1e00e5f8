"""Desk-scale scorers and the cohort-relative ASB/AMB composites."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import linalg
from torch import nn
from torch.nn import functional as F

from src.models.config import AttributeRegistry
from src.models.reports import (AxisTrace, MethodRaw, MethodReport, MetricReport, PublishedCell,
                                PublishedDataset, PublishedRecomputation)
from src.services.errors import MusicEditorError
from src.services.interfaces import AdherenceScorer
from src.services.spectra import MelSpectrogram, chroma, load_clip, load_manifest, onset_envelope, onset_frames

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 32
STRUCTURE_SCALES = (1, 2, 4)


class MetricsError(MusicEditorError):
    default_stage = "metrics"


def _check_shapes(source: MelSpectrogram, edited: MelSpectrogram) -> None:
    if source.data.shape != edited.data.shape:
        raise MetricsError(f"clip shapes differ: {source.data.shape} vs {edited.data.shape}",
                           context={'source': list(source.data.shape), 'edited': list(edited.data.shape)})


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; two constant signals correlate 1 when equal and 0 otherwise."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricsError(f"signal lengths differ: {a.size} vs {b.size}")
    if a.std() == 0.0 or b.std() == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.corrcoef(a, b)[0, 1])


def log_mel_pearson(a: MelSpectrogram, b: MelSpectrogram) -> float:
    _check_shapes(a, b)
    return pearson(np.log1p(a.data), np.log1p(b.data))


def onset_correlation(source: MelSpectrogram, edited: MelSpectrogram) -> float:
    _check_shapes(source, edited)
    return pearson(onset_envelope(source), onset_envelope(edited))


def _time_pool(data: np.ndarray, scale: int) -> np.ndarray:
    frames = (data.shape[0] // scale) * scale
    if frames == 0:
        return data.mean(axis=0, keepdims=True)
    return data[:frames].reshape(frames // scale, scale, data.shape[1]).mean(axis=1)


def structure_distance(source: MelSpectrogram, edited: MelSpectrogram) -> float:
    """Half multi-scale log-mel L1, half the onset decorrelation ``max(0, 1 - r)``.

    Raises:
        MetricsError: On shape mismatch
    """
    _check_shapes(source, edited)
    a, b = np.log1p(source.data), np.log1p(edited.data)
    spectral = float(np.mean([np.abs(_time_pool(a, s) - _time_pool(b, s)).mean() for s in STRUCTURE_SCALES]))
    rhythm = max(0.0, 1.0 - onset_correlation(source, edited))
    return 0.5 * spectral + 0.5 * rhythm


def chroma_similarity(source: MelSpectrogram, edited: MelSpectrogram) -> float:
    """Mean per-frame chroma cosine over frames where either clip sounds.

    Raises:
        MetricsError: If frame counts differ
    """
    if source.frames != edited.frames:
        raise MetricsError(f"frame counts differ: {source.frames} vs {edited.frames}",
                           context={'source': source.frames, 'edited': edited.frames})
    ca, cb = chroma(source), chroma(edited)
    sounding = (np.abs(ca).sum(axis=1) > 0) | (np.abs(cb).sum(axis=1) > 0)
    if not sounding.any():
        return 0.0
    return float(np.sum(ca * cb, axis=1)[sounding].mean())


def clip_features(spec: MelSpectrogram) -> np.ndarray:
    """Hand-crafted timbre, envelope, rhythm and key-invariant harmony features."""
    data = spec.data
    energy = data.sum(axis=1)
    active = energy > 1e-6 * max(float(energy.max()), 1e-12)
    sounding = data[active] if active.any() else data

    profile = sounding.mean(axis=0)
    peak = float(profile.max())
    profile = profile / peak if peak > 0 else profile
    top = np.zeros(8)
    ranked = np.sort(profile)[::-1][:8]
    top[:len(ranked)] = ranked
    harmonic_count = float((profile > 0.1).sum()) / spec.bins

    positions = np.arange(spec.bins) / spec.bins
    centroid = (sounding @ positions) / np.maximum(sounding.sum(axis=1), 1e-12)

    envelope = onset_envelope(spec)
    onsets = onset_frames(envelope)
    intervals = np.diff(onsets) / spec.frames if len(onsets) >= 2 else np.zeros(1)
    decay = [energy[min(o + 3, spec.frames - 1)] / max(energy[o], 1e-12) for o in onsets]
    attack = [energy[o] / max(energy[min(o + 2, spec.frames - 1)], 1e-12) for o in onsets]

    pitch_classes = chroma(spec).sum(axis=0)
    if pitch_classes.max() > 0:
        pitch_classes = np.roll(pitch_classes, -int(np.argmax(pitch_classes))) / pitch_classes.max()

    return np.concatenate([
        top,
        [harmonic_count, float(np.log1p(data.mean())), float(centroid.mean()), float(centroid.std())],
        np.log1p(data).mean(axis=0),
        [len(onsets) / spec.frames, float(intervals.mean()), float(intervals.std()), float(intervals.min()),
         float(active.mean()),
         float(np.clip(np.mean(decay), 0.0, 2.0)) if decay else 0.0,
         float(np.clip(np.mean(attack), 0.0, 2.0)) if attack else 0.0],
        pitch_classes,
    ])


class AttributeClassifier:
    """Small MLP over :func:`clip_features`; its hidden layer is the embedding for Fréchet statistics."""

    def __init__(self, axis: str, classes: Sequence[str], feature_mean: np.ndarray, feature_std: np.ndarray,
                 network: nn.Sequential):
        self.axis = axis
        self.classes = list(classes)
        self.feature_mean = feature_mean
        self.feature_std = feature_std
        self.network = network.eval()

    @classmethod
    def fit(cls, axis: str, clips: Sequence[MelSpectrogram], labels: Sequence[str],
            classes: Optional[Sequence[str]] = None, seed: int = 0, steps: int = 300,
            learning_rate: float = 1e-2) -> "AttributeClassifier":
        """Full-batch Adam on cross-entropy.

        Raises:
            MetricsError: Fewer than two classes or a label outside ``classes``
        """
        classes = list(classes) if classes is not None else sorted(set(labels))
        if len(classes) < 2:
            raise MetricsError(f"axis '{axis}' needs at least two classes to train a classifier",
                               context={'axis': axis, 'classes': classes})
        unknown = sorted(set(labels) - set(classes))
        if unknown:
            raise MetricsError(f"labels outside the class list: {', '.join(unknown)}", context={'axis': axis})
        features = np.stack([clip_features(clip) for clip in clips])
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0] = 1.0
        x = torch.tensor((features - mean) / std, dtype=torch.float32)
        y = torch.tensor([classes.index(label) for label in labels], dtype=torch.long)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = nn.Sequential(nn.Linear(x.shape[1], EMBEDDING_DIM), nn.Tanh(),
                                    nn.Linear(EMBEDDING_DIM, len(classes)))
        optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate)
        for _ in range(steps):
            optimizer.zero_grad()
            loss = F.cross_entropy(network(x), y)
            loss.backward()
            optimizer.step()
        logger.info(f"Attribute classifier for '{axis}' trained",
                    extra={'axis': axis, 'clips': len(labels), 'final_loss': float(loss.detach())})
        return cls(axis, classes, mean, std, network)

    def _inputs(self, clips: Sequence[MelSpectrogram]) -> torch.Tensor:
        features = np.stack([clip_features(clip) for clip in clips])
        return torch.tensor((features - self.feature_mean) / self.feature_std, dtype=torch.float32)

    def probabilities(self, clips: Sequence[MelSpectrogram]) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(self.network(self._inputs(clips)), dim=-1).double().numpy()

    def embed(self, clips: Sequence[MelSpectrogram]) -> np.ndarray:
        with torch.no_grad():
            return self.network[1](self.network[0](self._inputs(clips))).double().numpy()

    def adherence(self, clip: MelSpectrogram, target_class: str) -> float:
        if target_class not in self.classes:
            raise MetricsError(f"unknown {self.axis} class '{target_class}'",
                               context={'axis': self.axis, 'classes': self.classes})
        return float(self.probabilities([clip])[0, self.classes.index(target_class)])


class AttributeScorer:
    """One classifier per attribute axis, addressed by class name."""

    def __init__(self, classifiers: Mapping[str, AttributeClassifier]):
        self.classifiers = dict(classifiers)
        self._axis_of = {name: axis for axis, clf in self.classifiers.items() for name in clf.classes}

    def axis_of(self, class_name: str) -> str:
        try:
            return self._axis_of[class_name]
        except KeyError:
            raise MetricsError(f"unknown attribute class '{class_name}'",
                               context={'known': sorted(self._axis_of)})

    def adherence(self, clip: MelSpectrogram, target_class: str) -> float:
        return self.classifiers[self.axis_of(target_class)].adherence(clip, target_class)

    def embed(self, clips: Sequence[MelSpectrogram], axis: Optional[str] = None) -> np.ndarray:
        axis = axis or next(iter(self.classifiers))
        return self.classifiers[axis].embed(clips)


def adherence_score(clip: MelSpectrogram, target_class: str, classifier: AdherenceScorer) -> float:
    """Probability the classifier assigns to ``target_class``.

    Raises:
        MetricsError: If the class is unknown
    """
    return classifier.adherence(clip, target_class)


def train_attribute_classifiers(manifest_path: Union[str, Path], registry: Optional[AttributeRegistry] = None,
                                seed: int = 0, steps: int = 300) -> AttributeScorer:
    """Fit one classifier per attribute axis present in a dataset manifest."""
    entries = load_manifest(manifest_path)
    if not entries:
        raise MetricsError(f"dataset {manifest_path} is empty", context={'manifest': str(manifest_path)})
    classifiers: Dict[str, AttributeClassifier] = {}
    for axis in sorted({entry.attribute_axis for entry in entries}):
        members = [entry for entry in entries if entry.attribute_axis == axis]
        classes = registry.classes(axis) if registry is not None else None
        clips = [load_clip(manifest_path, entry) for entry in members]
        classifiers[axis] = AttributeClassifier.fit(axis, clips, [entry.class_label for entry in members],
                                                    classes=classes, seed=seed, steps=steps)
    return AttributeScorer(classifiers)


@dataclass(frozen=True)
class FrechetStats:
    mean: np.ndarray
    covariance: np.ndarray


def frechet_stats(embeddings: np.ndarray) -> FrechetStats:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise MetricsError(f"need at least two embeddings of shape (n, d), got {embeddings.shape}")
    return FrechetStats(embeddings.mean(axis=0), np.atleast_2d(np.cov(embeddings, rowvar=False)))


def _psd_eigh(matrix: np.ndarray, name: str, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
    symmetric = 0.5 * (matrix + matrix.T)
    values, vectors = linalg.eigh(symmetric)
    floor = -tolerance * max(1.0, float(np.abs(values).max()) if values.size else 1.0)
    if values.size and values.min() < floor:
        raise MetricsError(f"{name} covariance is not positive semidefinite (min eigenvalue {values.min():.3e})",
                           context={'matrix': name, 'min_eigenvalue': float(values.min())})
    return np.clip(values, 0.0, None), vectors


def frechet_feature_distance(a: FrechetStats, b: FrechetStats, tolerance: float = 1e-8) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`` via symmetric eigendecompositions.

    The trace of the cross term is taken as the trace of
    ``(S_a^{1/2} S_b S_a^{1/2})^{1/2}``, which shares its eigenvalues.

    Raises:
        MetricsError: Dimension mismatch or a covariance that is not PSD within ``tolerance``
    """
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise MetricsError("Fréchet statistics have different dimensions",
                           context={'a': list(a.covariance.shape), 'b': list(b.covariance.shape)})
    values_a, vectors_a = _psd_eigh(a.covariance, "first", tolerance)
    _psd_eigh(b.covariance, "second", tolerance)
    sqrt_a = (vectors_a * np.sqrt(values_a)) @ vectors_a.T
    cross = sqrt_a @ b.covariance @ sqrt_a
    cross_values = np.clip(linalg.eigh(0.5 * (cross + cross.T), eigvals_only=True), 0.0, None)
    distance = (float(np.sum((a.mean - b.mean) ** 2)) + float(np.trace(a.covariance))
                + float(np.trace(b.covariance)) - 2.0 * float(np.sum(np.sqrt(cross_values))))
    return max(distance, 0.0)


def zscore_minmax(values: Sequence[float]) -> List[float]:
    """Z-score over the cohort, then min-max to [0, 1]; an all-equal cohort maps to 0.5.

    Raises:
        MetricsError: Empty or non-finite input
    """
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise MetricsError("cannot normalize an empty cohort")
    if not np.all(np.isfinite(array)):
        raise MetricsError("cohort contains non-finite values", context={'values': [float(v) for v in array]})
    if array.max() == array.min():
        return [0.5] * array.size
    z = (array - array.mean()) / array.std()
    return [float(v) for v in (z - z.min()) / (z.max() - z.min())]


def _harmonic(a: Sequence[float], b: Sequence[float]) -> List[float]:
    return [2.0 * x * y / (x + y) if x + y > 0 else 0.0 for x, y in zip(a, b)]


def _check_cohort(*columns: Sequence[float]) -> None:
    sizes = {len(column) for column in columns}
    if len(sizes) != 1:
        raise MetricsError(f"cohort columns differ in length: {sorted(sizes)}")
    if sizes.pop() < 2:
        raise MetricsError("composite scores need a cohort of at least two methods")


def asb(adherence: Sequence[float], structure: Sequence[float]) -> List[float]:
    """Harmonic mean of normalized adherence and normalized negated structure distance."""
    _check_cohort(adherence, structure)
    return _harmonic(zscore_minmax(adherence), zscore_minmax([-s for s in structure]))


def amb(adherence: Sequence[float], chroma_sim: Sequence[float]) -> List[float]:
    """Harmonic mean of normalized adherence and normalized chroma similarity."""
    _check_cohort(adherence, chroma_sim)
    return _harmonic(zscore_minmax(adherence), zscore_minmax(chroma_sim))


def _trace(values: Sequence[float]) -> AxisTrace:
    array = np.asarray(values, dtype=np.float64)
    return AxisTrace(min=float(array.min()), max=float(array.max()), mean=float(array.mean()),
                     std=float(array.std()))


def metric_report(dataset: str, cohort: Mapping[str, MethodRaw]) -> MetricReport:
    """Composite scores of every method relative to the others."""
    names = list(cohort)
    raws = [cohort[name] for name in names]
    adherence = [raw.adherence for raw in raws]
    structure = [raw.structure_distance for raw in raws]
    chroma_sim = [raw.chroma_sim for raw in raws]
    asb_values = asb(adherence, structure)
    amb_values = amb(adherence, chroma_sim)
    trace = {'adherence': _trace(adherence), 'structure_distance': _trace(structure),
             'chroma_sim': _trace(chroma_sim)}
    if all(raw.fad is not None for raw in raws):
        trace['fad'] = _trace([raw.fad for raw in raws])
    methods = [MethodReport(name=name, raw=raw, asb=a, amb=m)
               for name, raw, a, m in zip(names, raws, asb_values, amb_values)]
    return MetricReport(dataset=dataset, methods=methods, normalization_trace=trace)


def recompute_published(published: PublishedDataset, tolerance: float = 0.03,
                        relaxed_methods: Sequence[str] = ("ASR",),
                        relaxed_tolerance: float = 0.04) -> PublishedRecomputation:
    """Rebuild printed ASB/AMB cells from the printed raw columns.

    Methods in ``relaxed_methods`` are compared with ``relaxed_tolerance``
    since rounded raw columns shift the cohort extremes; cells listed as known
    discrepancies are reported but not counted as failures.
    """
    recomputed = {'asb': asb(published.clap, published.lpaps), 'amb': amb(published.clap, published.chroma)}
    printed = {'asb': published.asb, 'amb': published.amb}
    cells = []
    for metric in ('asb', 'amb'):
        for index, method in enumerate(published.methods):
            limit = relaxed_tolerance if method in relaxed_methods else tolerance
            deviation = abs(recomputed[metric][index] - printed[metric][index])
            cell = PublishedCell(method=method, metric=metric, printed=printed[metric][index],
                                 recomputed=recomputed[metric][index], deviation=deviation, tolerance=limit,
                                 within_tolerance=deviation <= limit + 1e-9,
                                 known_discrepancy=method in published.known_discrepancies)
            if method in relaxed_methods and deviation > tolerance:
                logger.info(f"{published.name} {method} {metric} deviates by {deviation:.3f}; "
                            f"printed composites were likely computed from unrounded scores",
                            extra={'dataset': published.name, 'method': method, 'metric': metric})
            if cell.known_discrepancy and not cell.within_tolerance:
                logger.warning(f"{published.name} {method} {metric}: printed {cell.printed:.2f} cannot be "
                               f"recomputed from the raw columns (got {cell.recomputed:.2f})",
                               extra={'dataset': published.name, 'method': method, 'metric': metric})
            cells.append(cell)
    return PublishedRecomputation(dataset=published.name, cells=cells)
