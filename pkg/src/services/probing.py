"""Probe which attention maps carry attribute information.

Maps are recorded during generation for attribute-labeled prompts, pooled to
fixed-length features, and a small MLP is trained per (layer, kind). High
held-out accuracy means the maps separate the attribute classes.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.model_selection import train_test_split
from torch import nn
from torch.nn import functional as F

from src.models.config import AttributeRegistry, ProbeConfig
from src.models.reports import ProbeReport
from src.services.attention import AttentionEvent, AttentionKind, HookSet
from src.services.condition import VocabularyError
from src.services.denoiser import Checkpoint
from src.services.errors import MusicEditorError
from src.services.sampler import TimestepSchedule, sample, schedule_for

logger = logging.getLogger(__name__)

MIN_SAMPLES_PER_CLASS = 10


class ProbeError(MusicEditorError):
    default_stage = "probing"


@dataclass(frozen=True)
class LabeledPrompt:
    text: str
    keyword: str
    class_label: str
    seed: int


@dataclass(frozen=True)
class ProbeSample:
    features: np.ndarray
    label: str
    layer: int
    kind: AttentionKind
    axis: str


def class_prompts(registry: AttributeRegistry, axis: str, per_class: int, seed: int = 0) -> List[LabeledPrompt]:
    """``per_class`` generations per attribute class, each with its own seed."""
    prompts = []
    for class_index, name in enumerate(registry.classes(axis)):
        for i in range(per_class):
            prompts.append(LabeledPrompt(text=registry.prompt(axis, name), keyword=name, class_label=name,
                                         seed=seed * 1_000_003 + class_index * 10_007 + i))
    return prompts


def sampled_steps(schedule: TimestepSchedule, count: int) -> List[int]:
    """``count`` evenly spaced timesteps among those the reverse pass evaluates."""
    evaluated = [t for t in schedule.steps if t > 0]
    if not evaluated:
        return []
    index = np.unique(np.round(np.linspace(0, len(evaluated) - 1, min(count, len(evaluated)))).astype(int))
    return [evaluated[i] for i in index]


def pool_map(maps: Union[np.ndarray, torch.Tensor], kind: Union[AttentionKind, str],
             span: Optional[Tuple[int, int]] = None, sa_pool: int = 16) -> np.ndarray:
    """Average a stack of maps (..., N, K) over every leading axis, then reduce to a feature.

    SA maps are block-mean downsampled to ``sa_pool`` x ``sa_pool`` and
    flattened; CA maps are column-averaged over the keyword ``span`` (length N).
    """
    if isinstance(maps, torch.Tensor):
        maps = maps.detach().cpu().double().numpy()
    maps = np.asarray(maps, dtype=np.float64)
    mean_map = maps.reshape(-1, maps.shape[-2], maps.shape[-1]).mean(axis=0)
    if AttentionKind(kind) == AttentionKind.SA:
        pooled = F.adaptive_avg_pool2d(torch.from_numpy(mean_map)[None, None], (sa_pool, sa_pool))
        return pooled.reshape(-1).numpy()
    start, stop = span if span is not None else (0, mean_map.shape[1])
    return mean_map[:, start:stop].mean(axis=1)


def collect_maps(checkpoint: Checkpoint, prompts: Sequence[LabeledPrompt], layers: Sequence[int],
                 kinds: Union[AttentionKind, Sequence[AttentionKind]], config: ProbeConfig, axis: str,
                 jobs: int = 1) -> List[ProbeSample]:
    """Generate once per prompt and pool the maps of ``layers`` at the sampled steps.

    Only the conditional branch is recorded.

    Raises:
        ProbeError: If a prompt does not contain its keyword
    """
    kinds = [AttentionKind(kinds)] if isinstance(kinds, (str, AttentionKind)) else [AttentionKind(k) for k in kinds]
    schedule = schedule_for(checkpoint, config.sampling_steps)
    steps = set(sampled_steps(schedule, config.steps_to_sample))

    def run(prompt: LabeledPrompt) -> List[ProbeSample]:
        embedding = checkpoint.embed(prompt.text)
        try:
            span = embedding.span_of(prompt.keyword)
        except VocabularyError as e:
            raise ProbeError(f"keyword '{prompt.keyword}' is not in prompt '{prompt.text}'",
                             context={'keyword': prompt.keyword, 'prompt': prompt.text}, original_exception=e)
        recorded: Dict[Tuple[int, AttentionKind], List[np.ndarray]] = {}

        def record(event: AttentionEvent) -> None:
            if event.timestep in steps:
                recorded.setdefault((event.layer, event.kind), []).append(event.attention_map[0].numpy())

        hooks = HookSet()
        hooks.add_sink(record, layers=layers, kinds=kinds, branches=["cond"])
        sample(checkpoint, embedding, config.cfg_w, schedule, prompt.seed, hooks)
        return [ProbeSample(features=pool_map(np.stack(recorded[(layer, kind)]), kind, (span.start, span.stop),
                                              config.sa_pool),
                            label=prompt.class_label, layer=layer, kind=kind, axis=axis)
                for kind in kinds for layer in layers]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(run, prompts))
    else:
        batches = [run(prompt) for prompt in prompts]
    return [s for batch in batches for s in batch]


class MlpProbe:
    """One-hidden-layer classifier over standardized features."""

    def __init__(self, classes: Sequence[str], mean: np.ndarray, std: np.ndarray, network: nn.Sequential):
        self.classes = list(classes)
        self.mean = mean
        self.std = std
        self.network = network.eval()

    @classmethod
    def fit(cls, features: np.ndarray, labels: Sequence[str], classes: Sequence[str], hidden: int = 128,
            steps: int = 400, learning_rate: float = 1e-2, seed: int = 0) -> "MlpProbe":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        std[std == 0] = 1.0
        x = torch.tensor((features - mean) / std, dtype=torch.float32)
        y = torch.tensor([list(classes).index(label) for label in labels], dtype=torch.long)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            network = nn.Sequential(nn.Linear(x.shape[1], hidden), nn.ReLU(), nn.Linear(hidden, len(classes)))
        optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate)
        for _ in range(steps):
            optimizer.zero_grad()
            F.cross_entropy(network(x), y).backward()
            optimizer.step()
        return cls(classes, mean, std, network)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        x = torch.tensor((np.atleast_2d(features) - self.mean) / self.std, dtype=torch.float32)
        with torch.no_grad():
            return torch.softmax(self.network(x), dim=-1).double().numpy()

    def predict(self, features: np.ndarray) -> List[str]:
        return [self.classes[i] for i in np.argmax(self.predict_proba(features), axis=1)]


def _single(values: set, name: str):
    if len(values) != 1:
        raise ProbeError(f"probe samples mix {name} values: {sorted(map(str, values))}")
    return values.pop()


def train_probe(samples: Sequence[ProbeSample], config: Optional[ProbeConfig] = None,
                seed: Optional[int] = None, shuffle_labels: bool = False) -> Tuple[MlpProbe, ProbeReport]:
    """Train on a stratified split and report held-out accuracy per class.

    Args:
        samples: Samples of one (layer, kind, axis)
        config: Split, width and optimizer settings
        seed: Overrides ``config.seed`` for the split and initialization
        shuffle_labels: Permute labels first (null experiment)

    Raises:
        ProbeError: Fewer than two classes, too few samples per class, or mixed layers/kinds
    """
    config = config or ProbeConfig()
    seed = config.seed if seed is None else seed
    layer = _single({s.layer for s in samples}, "layer")
    kind = _single({s.kind for s in samples}, "kind")
    axis = _single({s.axis for s in samples}, "axis")
    labels = [s.label for s in samples]
    classes = sorted(set(labels))
    counts = {name: labels.count(name) for name in classes}
    if len(classes) < 2:
        raise ProbeError("probing needs at least two classes", context={'classes': classes})
    small = {name: n for name, n in counts.items() if n < MIN_SAMPLES_PER_CLASS}
    if small:
        raise ProbeError(f"classes with fewer than {MIN_SAMPLES_PER_CLASS} samples: {sorted(small)}",
                         context={'counts': counts})

    features = np.stack([s.features for s in samples])
    targets = np.array(labels)
    if shuffle_labels:
        targets = targets[np.random.default_rng(seed).permutation(len(targets))]
    train_idx, test_idx = train_test_split(np.arange(len(targets)), train_size=config.train_fraction,
                                           stratify=targets, random_state=seed)
    probe = MlpProbe.fit(features[train_idx], targets[train_idx].tolist(), classes, hidden=config.hidden_width,
                         steps=config.train_steps, learning_rate=config.learning_rate, seed=seed)
    predicted = np.array(probe.predict(features[test_idx]))
    actual = targets[test_idx]
    accuracy = {}
    for name in classes:
        mask = actual == name
        accuracy[name] = float(np.mean(predicted[mask] == name)) if mask.any() else 0.0
    key = str(layer)
    overall = float(np.mean(predicted == actual))
    report = ProbeReport(kind=AttentionKind(kind).value, axis=axis, layers=[layer], classes=classes,
                         accuracy={name: {key: value} for name, value in accuracy.items()},
                         class_average=dict(accuracy), layer_average={key: overall}, overall_average=overall,
                         highlight_layers=[h for h in config.highlight_layers if h == layer])
    return probe, report


def merge_reports(reports: Sequence[ProbeReport], highlight_layers: Sequence[int] = ()) -> ProbeReport:
    """Combine single-layer reports of one kind and axis into a per-layer table."""
    if not reports:
        raise ProbeError("no probe reports to merge")
    kind = _single({r.kind for r in reports}, "kind")
    axis = _single({r.axis for r in reports}, "axis")
    classes = reports[0].classes
    layers = sorted(layer for r in reports for layer in r.layers)
    accuracy = {name: {} for name in classes}
    layer_average = {}
    for report in reports:
        for layer in report.layers:
            key = str(layer)
            for name in classes:
                accuracy[name][key] = report.accuracy[name][key]
            layer_average[key] = report.layer_average[key]
    class_average = {name: float(np.mean([accuracy[name][str(layer)] for layer in layers])) for name in classes}
    return ProbeReport(kind=kind, axis=axis, layers=layers, classes=classes, accuracy=accuracy,
                       class_average=class_average, layer_average=layer_average,
                       overall_average=float(np.mean([layer_average[str(layer)] for layer in layers])),
                       highlight_layers=[h for h in highlight_layers if h in layers])


def probe_all_layers(checkpoint: Checkpoint, registry: AttributeRegistry, axis: str,
                     config: Optional[ProbeConfig] = None, layers: Optional[Sequence[int]] = None,
                     seed: Optional[int] = None, jobs: int = 1) -> Tuple[ProbeReport, ProbeReport]:
    """CA and SA probe tables over every layer of ``axis``.

    Returns:
        (CA report, SA report)
    """
    config = config or ProbeConfig()
    seed = config.seed if seed is None else seed
    layers = list(layers) if layers is not None else list(range(1, checkpoint.config.layers + 1))
    prompts = class_prompts(registry, axis, config.prompts_per_class, seed)
    samples = collect_maps(checkpoint, prompts, layers, (AttentionKind.CA, AttentionKind.SA), config, axis, jobs)
    logger.info("Probe maps collected", extra={'axis': axis, 'prompts': len(prompts), 'samples': len(samples)})

    reports = []
    for kind in (AttentionKind.CA, AttentionKind.SA):
        def fit(layer: int) -> ProbeReport:
            subset = [s for s in samples if s.layer == layer and s.kind == kind]
            return train_probe(subset, config, seed=seed)[1]

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                per_layer = list(pool.map(fit, layers))
        else:
            per_layer = [fit(layer) for layer in layers]
        report = merge_reports(per_layer, config.highlight_layers)
        logger.info(f"{kind.value} probe average accuracy {report.overall_average:.3f}",
                    extra={'axis': axis, 'kind': kind.value, 'accuracy': report.overall_average})
        reports.append(report)
    return reports[0], reports[1]
