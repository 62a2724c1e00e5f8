"""Editing pipeline: encode, partial inversion with capture, ASR-guided reverse pass, decode.

Also hosts the evaluation harnesses built on it: method cohorts, the layer
ablation table, the T_start sweep and the map-replacement experiment.
"""

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from matplotlib.figure import Figure

from src.models.config import EditConfig
from src.models.reports import (AblationReport, AblationRow, AblationTable, MethodRaw, MetricReport,
                                SweepCurve, SweepPoint, TStartSweepReport)
from src.services.attention import AttentionEvent, AttentionKind, CaOverride, HookSet, SaOverride
from src.services.codec import Latent
from src.services.denoiser import Checkpoint
from src.services.errors import MusicEditorError
from src.services.interfaces import AdherenceScorer
from src.services.metrics import (AttributeScorer, amb, asb, chroma_similarity, frechet_feature_distance,
                                  frechet_stats, metric_report, onset_correlation, structure_distance)
from src.services.repository import (AttentionRepository, BindingMismatchError, RepositoryBinding,
                                     RepositoryRecorder)
from src.services.sampler import (InversionResult, TimestepSchedule, invert_partial, reverse_from,
                                  schedule_for)
from src.services.spectra import MelSpectrogram, load_clip, load_manifest
from src.utils.fileio import atomic_write_bytes
from src.utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

METHODS = ("asr", "ddim_baseline", "reconstruction")
DEFAULT_ABLATION_WINDOWS = ("None", "1-16", "6-16", "10-12", "1-7", "8-14")
DEFAULT_T_STARTS = (300, 500, 700, 1000)
POOLED = "all"

T = TypeVar("T")
R = TypeVar("R")


class EditError(MusicEditorError):
    default_stage = "edit"


@dataclass(frozen=True)
class CaptureResult:
    """The inverted latent z_{T_start} and the repository recorded on the way up."""

    latent: Latent
    repository: AttentionRepository
    inversion: InversionResult


@dataclass(frozen=True)
class EditResult:
    edited: MelSpectrogram
    reconstruction: Optional[MelSpectrogram]
    config: EditConfig
    target_prompt: str
    t_start_used: int
    visited_steps: Tuple[int, ...]
    layers_overridden: List[int]
    initial_latent: Latent
    edited_latent: Latent
    repository: AttentionRepository
    timings: Dict[str, float]


def _validate(checkpoint: Checkpoint, config: EditConfig) -> None:
    outside = [layer for layer in config.layer_window if not 1 <= layer <= checkpoint.config.layers]
    if outside:
        raise EditError(f"layer window {EditConfig.format_layers(config.layer_window)} exceeds the "
                        f"model's {checkpoint.config.layers} layers",
                        context={'layers': outside, 'model_layers': checkpoint.config.layers})
    if not 0 <= config.t_start <= checkpoint.config.timesteps:
        raise EditError(f"T_start {config.t_start} outside [0, {checkpoint.config.timesteps}]",
                        context={'t_start': config.t_start})


def _encode(checkpoint: Checkpoint, source: MelSpectrogram) -> Latent:
    latent = checkpoint.codec.encode(source)
    if latent.tokens.shape[0] != checkpoint.config.tokens:
        raise EditError(f"source {source.frames}x{source.bins} gives {latent.tokens.shape[0]} tokens, "
                        f"the model expects {checkpoint.config.tokens}",
                        context={'frames': source.frames, 'bins': source.bins})
    return latent


def capture(checkpoint: Checkpoint, source: MelSpectrogram, config: EditConfig,
            schedule: Optional[TimestepSchedule] = None) -> CaptureResult:
    """Invert ``source`` to T_start while storing SA queries/keys of every visited step."""
    _validate(checkpoint, config)
    schedule = schedule or schedule_for(checkpoint, config.steps)
    z0 = _encode(checkpoint, source)
    used = schedule.round_down(config.t_start)
    repository = AttentionRepository.for_checkpoint(checkpoint, schedule, used, schedule.visited_steps(used))
    hooks = RepositoryRecorder(repository).attach(HookSet())
    inversion = invert_partial(checkpoint, z0, config.t_start, schedule, hooks)
    repository.seal()
    logger.debug("Capture complete", extra={'t_start_used': used, 'records': len(repository),
                                            'record_bytes': repository.record_bytes()})
    return CaptureResult(inversion.latent, repository, inversion)


def attach_repository(checkpoint: Checkpoint, source: MelSpectrogram, config: EditConfig,
                      repository: AttentionRepository,
                      schedule: Optional[TimestepSchedule] = None) -> CaptureResult:
    """Pair a previously saved repository with a fresh (uncaptured) inversion of ``source``.

    Raises:
        BindingMismatchError: If the repository was recorded for another model, codec or schedule
        EditError: If the repository's T_start differs from this inversion's
    """
    _validate(checkpoint, config)
    schedule = schedule or schedule_for(checkpoint, config.steps)
    expected = RepositoryBinding(schedule.schedule_hash, checkpoint.codec.codec_id, checkpoint.model_hash)
    for name in ('model_hash', 'codec_id', 'schedule_hash'):
        if getattr(expected, name) != getattr(repository.binding, name):
            raise BindingMismatchError(f"repository {name} does not match this edit",
                                       context={'field': name, 'expected': getattr(expected, name),
                                                'actual': getattr(repository.binding, name)})
    repository.check_complete()
    inversion = invert_partial(checkpoint, _encode(checkpoint, source), config.t_start, schedule)
    if inversion.t_start_used != repository.t_start:
        raise EditError(f"repository was captured to T_start {repository.t_start}, this edit inverts to "
                        f"{inversion.t_start_used}",
                        context={'repository_t_start': repository.t_start, 't_start_used': inversion.t_start_used})
    return CaptureResult(inversion.latent, repository, inversion)


def edit(checkpoint: Checkpoint, source: MelSpectrogram, target_prompt: str, config: EditConfig,
         prior: Optional[CaptureResult] = None, reconstruct: bool = True,
         monitor: Optional[PerformanceMonitor] = None) -> EditResult:
    """Edit ``source`` toward ``target_prompt`` keeping its structure.

    The reverse pass starts from the inverted latent; at every reverse step,
    layers in ``config.layer_window`` rebuild their SA map from the queries/keys
    recorded at that step, in both guidance branches. The reconstruction is the
    same reverse pass under the null prompt without guidance or overrides.

    Args:
        checkpoint: Trained model
        source: Spectrogram to edit
        target_prompt: Prompt describing the desired attribute
        config: Inversion depth, layer window, guidance and step count
        prior: Reuse an earlier capture of ``source`` under the same config
        reconstruct: Also produce the reconstruction reference
        monitor: Stage timer (a private one is used when omitted)

    Raises:
        EditError: Invalid window or T_start
        VocabularyError: If the prompt has unknown words
    """
    _validate(checkpoint, config)
    monitor = monitor or PerformanceMonitor("editor")
    schedule = schedule_for(checkpoint, config.steps)
    target = checkpoint.embed(target_prompt)

    if prior is None:
        with monitor.stage("capture", t_start=config.t_start):
            prior = capture(checkpoint, source, config, schedule)
    elif prior.repository.binding.schedule_hash != schedule.schedule_hash:
        raise BindingMismatchError("prior capture used a different schedule",
                                   context={'expected': schedule.schedule_hash,
                                            'actual': prior.repository.binding.schedule_hash})
    used = prior.inversion.t_start_used
    prior.repository.check_complete()

    with monitor.stage("reverse", layers=len(config.layer_window)):
        hooks = prior.repository.installed_on(HookSet(), config.layer_window)
        tokens = reverse_from(checkpoint, prior.latent.tokens, used, target, config.cfg_w, schedule, hooks)
    edited_latent = prior.latent.with_tokens(tokens)

    reconstruction = None
    if reconstruct:
        with monitor.stage("reconstruct"):
            restored = reverse_from(checkpoint, prior.latent.tokens, used, "", 1.0, schedule)
        reconstruction = checkpoint.codec.decode(prior.latent.with_tokens(restored)).spectrogram

    with monitor.stage("decode"):
        edited = checkpoint.codec.decode(edited_latent).spectrogram

    layers_overridden = sorted({layer for _, layer, kind, _ in hooks.override_log if kind == AttentionKind.SA.value})
    return EditResult(edited=edited, reconstruction=reconstruction, config=config, target_prompt=target.text,
                      t_start_used=used, visited_steps=prior.inversion.visited_steps,
                      layers_overridden=layers_overridden, initial_latent=prior.latent,
                      edited_latent=edited_latent, repository=prior.repository, timings=monitor.timings)


@dataclass(frozen=True)
class EvalItem:
    id: str
    source: MelSpectrogram
    source_class: str
    target_prompt: str
    target_class: str
    edit_type: str


def load_eval_set(manifest_path: Union[str, Path], limit: Optional[int] = None) -> List[EvalItem]:
    """Benchmark entries (dataset entries with a target prompt and class).

    Raises:
        EditError: If an entry has no edit target
    """
    items = []
    for entry in load_manifest(manifest_path):
        if not entry.target_prompt or not entry.target_class:
            raise EditError(f"entry '{entry.id}' has no target prompt; build a benchmark manifest first",
                            context={'entry': entry.id, 'manifest': str(manifest_path)})
        items.append(EvalItem(id=entry.id, source=load_clip(manifest_path, entry), source_class=entry.class_label,
                              target_prompt=entry.target_prompt, target_class=entry.target_class,
                              edit_type=entry.edit_type or entry.attribute_axis))
        if limit is not None and len(items) >= limit:
            break
    return items


def _parallel(function: Callable[[T], R], items: Sequence[T], jobs: int) -> List[R]:
    if jobs <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(function, items))


def capture_all(checkpoint: Checkpoint, items: Sequence[EvalItem], config: EditConfig,
                jobs: int = 1) -> List[CaptureResult]:
    schedule = schedule_for(checkpoint, config.steps)
    return _parallel(lambda item: capture(checkpoint, item.source, config, schedule), items, jobs)


@dataclass(frozen=True)
class ItemScores:
    adherence: float
    structure_distance: float
    chroma_sim: float
    onset_correlation: float


def score_item(item: EvalItem, edited: MelSpectrogram, scorer: AdherenceScorer) -> ItemScores:
    return ItemScores(adherence=scorer.adherence(edited, item.target_class),
                      structure_distance=structure_distance(item.source, edited),
                      chroma_sim=chroma_similarity(item.source, edited),
                      onset_correlation=onset_correlation(item.source, edited))


def fad_for_items(items: Sequence[EvalItem], outputs: Sequence[MelSpectrogram],
                  scorer: AttributeScorer) -> Optional[float]:
    """Clip-weighted Fréchet distance between sources and outputs, per attribute axis."""
    total, weight = 0.0, 0
    for axis in sorted(scorer.classifiers):
        group = [i for i, item in enumerate(items) if scorer.axis_of(item.target_class) == axis]
        if len(group) < 2:
            continue
        before = frechet_stats(scorer.embed([items[i].source for i in group], axis))
        after = frechet_stats(scorer.embed([outputs[i] for i in group], axis))
        total += frechet_feature_distance(before, after) * len(group)
        weight += len(group)
    return total / weight if weight else None


def summarize(items: Sequence[EvalItem], outputs: Sequence[MelSpectrogram],
              scorer: AttributeScorer) -> Tuple[MethodRaw, float]:
    """Mean raw metrics of one method plus its mean onset correlation."""
    scores = [score_item(item, output, scorer) for item, output in zip(items, outputs)]
    raw = MethodRaw(adherence=float(np.mean([s.adherence for s in scores])),
                    structure_distance=float(np.mean([s.structure_distance for s in scores])),
                    chroma_sim=float(np.mean([s.chroma_sim for s in scores])),
                    fad=fad_for_items(items, outputs, scorer))
    return raw, float(np.mean([s.onset_correlation for s in scores]))


def run_window(checkpoint: Checkpoint, items: Sequence[EvalItem], config: EditConfig,
               captures: Sequence[CaptureResult], jobs: int = 1, reconstruct: bool = False) -> List[EditResult]:
    pairs = list(zip(items, captures))
    return _parallel(lambda pair: edit(checkpoint, pair[0].source, pair[0].target_prompt, config,
                                       prior=pair[1], reconstruct=reconstruct), pairs, jobs)


def evaluate_methods(checkpoint: Checkpoint, items: Sequence[EvalItem], methods: Sequence[str],
                     config: EditConfig, scorer: AttributeScorer, dataset: str = "eval",
                     jobs: int = 1) -> MetricReport:
    """Run each method over the eval set and score the cohort.

    ``asr`` uses ``config.layer_window``; ``ddim_baseline`` is the same
    pipeline with no overrides; ``reconstruction`` performs no edit.

    Raises:
        EditError: Unknown method or fewer than two methods
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise EditError(f"unknown methods: {', '.join(unknown)}", context={'known': list(METHODS)})
    if len(methods) < 2:
        raise EditError("a metric report needs at least two methods", context={'methods': list(methods)})
    captures = capture_all(checkpoint, items, config, jobs)
    outputs: Dict[str, List[MelSpectrogram]] = {}
    baseline_config = config.model_copy(update={'layer_window': []})
    for method in methods:
        if method == "reconstruction":
            continue
        window_config = config if method == "asr" else baseline_config
        results = run_window(checkpoint, items, window_config, captures, jobs,
                             reconstruct="reconstruction" in methods and "reconstruction" not in outputs)
        outputs[method] = [r.edited for r in results]
        if results and results[0].reconstruction is not None:
            outputs["reconstruction"] = [r.reconstruction for r in results]
    if "reconstruction" in methods and "reconstruction" not in outputs:
        results = run_window(checkpoint, items, baseline_config, captures, jobs, reconstruct=True)
        outputs["reconstruction"] = [r.reconstruction for r in results]
    cohort = {}
    for method in methods:
        cohort[method], _ = summarize(items, outputs[method], scorer)
    return metric_report(dataset, cohort)


def _composites(rows: List[Dict]) -> Tuple[List[float], List[float]]:
    if len(rows) < 2:
        return [0.5] * len(rows), [0.5] * len(rows)
    adherence = [r['adherence'] for r in rows]
    return (asb(adherence, [r['structure_distance'] for r in rows]),
            amb(adherence, [r['chroma_sim'] for r in rows]))


def _table(edit_type: str, items: Sequence[EvalItem], windows: Sequence[str],
           outputs: Dict[str, List[MelSpectrogram]], scorer: AttributeScorer) -> AblationTable:
    rows = []
    for window in windows:
        raw, onset = summarize(items, outputs[window], scorer)
        rows.append({'window': window, 'layers': EditConfig.parse_layers(window), **raw.model_dump(),
                     'onset_correlation': onset})
    asb_values, amb_values = _composites(rows)
    return AblationTable(edit_type=edit_type, clips=len(items),
                         rows=[AblationRow(**row, asb=a, amb=m) for row, a, m in zip(rows, asb_values, amb_values)])


def layer_ablation_sweep(checkpoint: Checkpoint, items: Sequence[EvalItem], config: EditConfig,
                         scorer: AttributeScorer, windows: Sequence[str] = DEFAULT_ABLATION_WINDOWS,
                         jobs: int = 1) -> AblationReport:
    """Edit every item under each layer window; pooled table first, then one per edit type.

    Raises:
        EditError: No windows or no items
    """
    if not windows:
        raise EditError("layer ablation needs at least one window")
    if not items:
        raise EditError("layer ablation needs at least one eval item")
    captures = capture_all(checkpoint, items, config, jobs)
    outputs: Dict[str, List[MelSpectrogram]] = {}
    for window in windows:
        window_config = config.model_copy(update={'layer_window': EditConfig.parse_layers(window)})
        _validate(checkpoint, window_config)
        outputs[window] = [r.edited for r in run_window(checkpoint, items, window_config, captures, jobs)]
        logger.info(f"Ablation window {window} done", extra={'window': window, 'clips': len(items)})
    tables = [_table(POOLED, items, windows, outputs, scorer)]
    for edit_type in sorted({item.edit_type for item in items}):
        index = [i for i, item in enumerate(items) if item.edit_type == edit_type]
        tables.append(_table(edit_type, [items[i] for i in index], windows,
                             {w: [outputs[w][i] for i in index] for w in windows}, scorer))
    return AblationReport(tables=tables)


def t_start_sweep(checkpoint: Checkpoint, items: Sequence[EvalItem], config: EditConfig, scorer: AttributeScorer,
                  t_starts: Sequence[int] = DEFAULT_T_STARTS, jobs: int = 1) -> TStartSweepReport:
    """Adherence and structure distance per T_start, with and without structure retention."""
    methods = (("asr", list(config.layer_window)), ("ddim_baseline", []))
    points: Dict[str, List[SweepPoint]] = {name: [] for name, _ in methods}
    for t_start in t_starts:
        sweep_config = config.model_copy(update={'t_start': t_start})
        _validate(checkpoint, sweep_config)
        captures = capture_all(checkpoint, items, sweep_config, jobs)
        for name, window in methods:
            window_config = sweep_config.model_copy(update={'layer_window': window})
            results = run_window(checkpoint, items, window_config, captures, jobs)
            scores = [score_item(item, r.edited, scorer) for item, r in zip(items, results)]
            points[name].append(SweepPoint(
                t_start=t_start, t_start_used=results[0].t_start_used if results else t_start,
                adherence=float(np.mean([s.adherence for s in scores])),
                structure_distance=float(np.mean([s.structure_distance for s in scores])),
                onset_correlation=float(np.mean([s.onset_correlation for s in scores]))))
        logger.info(f"T_start {t_start} swept", extra={'t_start': t_start, 'clips': len(items)})
    return TStartSweepReport(curves=[SweepCurve(method=name, layers=window, points=points[name])
                                     for name, window in methods])


def render_sweep_plot(report: TStartSweepReport, path: Union[str, Path]) -> Path:
    """Structure distance against adherence, one line per method, points labeled by T_start."""
    figure = Figure(figsize=(6, 4), dpi=100)
    axis = figure.add_subplot()
    for curve in report.curves:
        xs = [p.adherence for p in curve.points]
        ys = [p.structure_distance for p in curve.points]
        axis.plot(xs, ys, marker="o", label=curve.method)
        for point in curve.points:
            axis.annotate(str(point.t_start), (point.adherence, point.structure_distance), fontsize=7)
    axis.set_xlabel("adherence")
    axis.set_ylabel("structure distance")
    axis.legend()
    figure.tight_layout()
    buffer = io.BytesIO()
    figure.savefig(buffer, format="png", metadata={'Software': None})
    return atomic_write_bytes(path, buffer.getvalue())


@dataclass(frozen=True)
class ReplacementResult:
    source: MelSpectrogram
    plain: MelSpectrogram
    replaced: MelSpectrogram
    kind: AttentionKind
    layers: List[int]


def replacement_experiment(checkpoint: Checkpoint, source_prompt: str, target_prompt: str,
                           kind: Union[AttentionKind, str], layers: Sequence[int],
                           config: EditConfig) -> ReplacementResult:
    """Generate from ``source_prompt`` while recording maps, then from ``target_prompt`` with the
    same seed, replacing SA maps (through stored Q/K) or CA maps in ``layers``.

    Raises:
        EditError: CA replacement between prompts of different token length
    """
    kind = AttentionKind(kind)
    _validate(checkpoint, config.model_copy(update={'layer_window': list(layers)}))
    schedule = schedule_for(checkpoint, config.steps)
    source_embedding = checkpoint.embed(source_prompt)
    target_embedding = checkpoint.embed(target_prompt)
    if kind == AttentionKind.CA and source_embedding.length != target_embedding.length:
        raise EditError("CA replacement needs prompts of equal token length",
                        context={'source_tokens': source_embedding.length,
                                 'target_tokens': target_embedding.length})

    recorded: Dict[Tuple[int, int, str], AttentionEvent] = {}

    def record(event: AttentionEvent) -> None:
        recorded[(event.timestep, event.layer, event.branch)] = event

    recording = HookSet()
    recording.add_sink(record, layers=layers, kinds=[kind])
    z_top = np.random.default_rng(config.seed).standard_normal((checkpoint.config.tokens,
                                                                 checkpoint.config.latent_dim))
    source_tokens = reverse_from(checkpoint, z_top, schedule.steps[0], source_embedding, config.cfg_w,
                                 schedule, recording)

    replaying = HookSet()
    for layer in layers:
        def supply(timestep, layer=layer):
            event = recorded.get((timestep, layer, replaying.branch))
            if event is None:
                return None
            if kind == AttentionKind.SA:
                return SaOverride(event.query[0], event.key[0], step=timestep, layer=layer)
            return CaOverride(event.attention_map[0], step=timestep, layer=layer)

        if kind == AttentionKind.SA:
            replaying.set_sa_override(layer, supply)
        else:
            replaying.set_ca_override(layer, supply)
    replaced_tokens = reverse_from(checkpoint, z_top, schedule.steps[0], target_embedding, config.cfg_w,
                                   schedule, replaying)
    plain_tokens = reverse_from(checkpoint, z_top, schedule.steps[0], target_embedding, config.cfg_w, schedule)

    def decode(tokens: np.ndarray) -> MelSpectrogram:
        return checkpoint.codec.decode(checkpoint.latent(tokens)).spectrogram

    return ReplacementResult(source=decode(source_tokens), plain=decode(plain_tokens),
                             replaced=decode(replaced_tokens), kind=kind, layers=sorted(layers))
