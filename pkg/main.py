"""Main entry point for the music editing command line."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, TypeVar

from pydantic import BaseModel, ValidationError

from src.models.config import ATTRIBUTE_AXES, AppConfig, EditConfig, PipelineDefaults
from src.models.reports import EditRecord, RunConfig
from src.services.config_manager import ConfigManager
from src.services.errors import MusicEditorError
from src.utils.fileio import atomic_write_bytes, atomic_write_json, write_spectrogram_image
from src.utils.logging_config import log_pipeline_step, setup_logging
from src.utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

RUN_CONFIG_FILE = "run_config.json"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# Namespace entries that are not part of a run's configuration.
_INTERNAL_ARGS = ("command", "log_level")

ModelT = TypeVar("ModelT", bound=BaseModel)


class UsageError(MusicEditorError):
    """A flag combination that argparse cannot reject by itself."""

    default_stage = "cli"


class Context:
    """Resolved application config plus the loaded configuration files."""

    def __init__(self, app_config: AppConfig, config_manager: ConfigManager):
        self.app_config = app_config
        self.config_manager = config_manager

    @property
    def defaults(self) -> PipelineDefaults:
        return self.config_manager.get_defaults()

    @property
    def registry(self):
        return self.config_manager.get_registry()


def _layers(text: str) -> List[int]:
    try:
        return EditConfig.parse_layers(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid layer list '{text}': {e}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _name_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _patch(text: str) -> List[int]:
    try:
        rows, cols = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch must look like 8x8, got '{text}'")
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("patch sides must be positive")
    return [rows, cols]


def _pick(value, default):
    return default if value is None else value


def _override(model: ModelT, **values: Any) -> ModelT:
    """Re-validate ``model`` with every non-None flag value applied."""
    try:
        return type(model)(**{**model.model_dump(), **{k: v for k, v in values.items() if v is not None}})
    except ValidationError as e:
        raise UsageError(f"invalid {type(model).__name__} settings: {e}", original_exception=e)


def _run_id(output: str) -> str:
    return Path(output).name or "run"


def _write_run_config(args: argparse.Namespace, output: str, output_is_dir: bool) -> Path:
    """Write the config echo: ``run_config.json`` in an output directory, ``<file>.run.json`` next to a file."""
    recorded = {key: value for key, value in sorted(vars(args).items()) if key not in _INTERNAL_ARGS}
    record = RunConfig(command=args.command, args=recorded, seed=getattr(args, "seed", None), output=output)
    path = Path(output) / RUN_CONFIG_FILE if output_is_dir else Path(f"{output}.run.json")
    return atomic_write_json(path, record.model_dump())


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required", context={'flag': flag})
    resolved = Path(path)
    if not resolved.is_file():
        raise MusicEditorError(f"{flag} file not found: {path}", stage="cli", context={'path': path})
    return resolved


def _model_path(args: argparse.Namespace, context: Context) -> Path:
    args.model = args.model or context.app_config.default_model_path
    if not args.model:
        raise UsageError("--model is required (or set MUSIC_EDITOR_MODEL)", context={'flag': '--model'})
    return _require_file(args.model, "--model")


def _load_checkpoint(args: argparse.Namespace, context: Context):
    from src.services.denoiser import Checkpoint

    return Checkpoint.load(_model_path(args, context))


def _edit_config(args: argparse.Namespace, defaults: PipelineDefaults) -> EditConfig:
    args.t_start = _pick(args.t_start, defaults.edit.t_start)
    args.layers = _pick(args.layers, defaults.edit.layer_window)
    args.cfg = _pick(args.cfg, defaults.edit.cfg_w)
    args.steps = _pick(args.steps, defaults.edit.steps)
    args.seed = _pick(args.seed, defaults.edit.seed)
    return _override(defaults.edit, t_start=args.t_start, layer_window=args.layers, cfg_w=args.cfg,
                     steps=args.steps, seed=args.seed)


def _train_scorer(args: argparse.Namespace, context: Context):
    from src.services.metrics import train_attribute_classifiers

    args.train_manifest = args.train_manifest or args.manifest
    _require_file(args.train_manifest, "--train-manifest")
    return train_attribute_classifiers(args.train_manifest, context.registry, seed=args.seed,
                                       steps=args.classifier_steps)


def cmd_synth(args: argparse.Namespace, context: Context) -> int:
    """Render a labeled synthetic dataset, optionally with a benchmark manifest."""
    from src.services.spectra import build_benchmark, gen_dataset

    defaults = context.defaults
    args.seed = _pick(args.seed, 0)
    spectra = _override(defaults.spectra, frames=args.frames, bins=args.bins)
    dataset = _override(defaults.dataset, axes=args.axes, clips_per_class=args.clips_per_class)
    args.frames, args.bins = spectra.frames, spectra.bins
    args.axes, args.clips_per_class = dataset.axes, dataset.clips_per_class

    entries = gen_dataset(dataset, args.seed, args.out, context.registry, spectra, jobs=args.jobs)
    print(f"wrote {len(entries)} clips to {Path(args.out) / 'manifest.json'}")
    if args.benchmark:
        pairs = build_benchmark(Path(args.out) / "manifest.json", context.registry, args.seed,
                                out_path=Path(args.out) / "benchmark.json", per_axis=args.benchmark_per_axis)
        print(f"wrote {len(pairs)} edit pairs to {Path(args.out) / 'benchmark.json'}")
    _write_run_config(args, args.out, output_is_dir=True)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, context: Context) -> int:
    """Fit the toy denoiser and write an MLDM checkpoint."""
    from src.services.denoiser import train
    from src.services.spectra import load_clip, load_manifest

    manifest = _require_file(args.manifest, "--manifest")
    defaults = context.defaults
    training = _override(defaults.training, steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr,
                         seed=args.seed)
    args.steps, args.batch_size, args.lr, args.seed = (training.steps, training.batch_size,
                                                       training.learning_rate, training.seed)

    entries = load_manifest(manifest)
    if not entries:
        raise UsageError(f"manifest {manifest} has no clips", context={'manifest': str(manifest)})
    first = load_clip(manifest, entries[0])
    rows, cols = args.patch
    if first.frames % rows or first.bins % cols:
        raise UsageError(f"patch {rows}x{cols} does not tile {first.frames}x{first.bins} clips",
                         context={'frames': first.frames, 'bins': first.bins})
    denoiser = _override(defaults.denoiser, layers=args.model_layers, heads=args.heads, hidden=args.hidden,
                         d_eps=args.width, d_s=args.width, d_c=args.width, d_tau=args.width,
                         latent_dim=rows * cols, tokens=(first.frames // rows) * (first.bins // cols))
    args.model_layers, args.heads, args.hidden, args.width = (denoiser.layers, denoiser.heads, denoiser.hidden,
                                                               denoiser.d_eps)

    monitor = PerformanceMonitor("training")
    checkpoint = train(manifest, training, denoiser, vocabulary=context.registry.vocabulary(),
                       patch=tuple(args.patch), show_progress=args.progress, monitor=monitor)
    checkpoint.save(args.out)
    print(f"trained {training.steps} steps, final loss {checkpoint.loss_curve[-1]:.5f}, "
          f"model {checkpoint.model_hash} -> {args.out}")
    _write_run_config(args, args.out, output_is_dir=False)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace, context: Context) -> int:
    """Sample a clip for a prompt."""
    from src.services.sampler import sample, schedule_for
    from src.services.spectra import save_spectrogram

    checkpoint = _load_checkpoint(args, context)
    defaults = context.defaults
    args.cfg = _pick(args.cfg, defaults.edit.cfg_w)
    args.steps = _pick(args.steps, defaults.edit.steps)
    args.seed = _pick(args.seed, 0)
    latent = sample(checkpoint, args.prompt, args.cfg, schedule_for(checkpoint, args.steps), args.seed)
    spec = checkpoint.codec.decode(latent).spectrogram
    out = Path(args.out)
    save_spectrogram(spec, out / "generated.mspc")
    write_spectrogram_image(spec.data, out / "generated.pgm")
    if args.png:
        write_spectrogram_image(spec.data, out / "generated.png", png=True)
    print(f"generated '{args.prompt}' -> {out / 'generated.mspc'}")
    _write_run_config(args, args.out, output_is_dir=True)
    return EXIT_OK


def cmd_edit(args: argparse.Namespace, context: Context) -> int:
    """Edit a source clip toward a target prompt."""
    from src.services.editor import attach_repository, edit
    from src.services.metrics import chroma_similarity, onset_correlation, structure_distance
    from src.services.repository import AttentionRepository
    from src.services.spectra import load_spectrogram, save_spectrogram

    checkpoint = _load_checkpoint(args, context)
    source = load_spectrogram(_require_file(args.source, "--source"))
    config = _edit_config(args, context.defaults)
    run_id = _run_id(args.out)

    prior = None
    if args.repository:
        repository = AttentionRepository.load(_require_file(args.repository, "--repository"))
        prior = attach_repository(checkpoint, source, config, repository)

    log_pipeline_step(run_id, "edit", "edit", "started", t_start=config.t_start,
                      layers=EditConfig.format_layers(config.layer_window))
    monitor = PerformanceMonitor("editor")
    result = edit(checkpoint, source, args.prompt, config, prior=prior, reconstruct=not args.no_reconstruction,
                  monitor=monitor)
    log_pipeline_step(run_id, "edit", "edit", "completed", t_start_used=result.t_start_used,
                      timings=result.timings)

    out = Path(args.out)
    outputs = {'edited': "edited.mspc", 'edited_image': "edited.pgm"}
    save_spectrogram(result.edited, out / "edited.mspc")
    write_spectrogram_image(result.edited.data, out / "edited.pgm")
    if args.png:
        write_spectrogram_image(result.edited.data, out / "edited.png", png=True)
        outputs['edited_png'] = "edited.png"
    if result.reconstruction is not None:
        save_spectrogram(result.reconstruction, out / "reconstruction.mspc")
        outputs['reconstruction'] = "reconstruction.mspc"
    if args.save_repository:
        result.repository.save(args.save_repository)
        outputs['repository'] = str(args.save_repository)

    record = EditRecord(
        source=str(args.source), target_prompt=result.target_prompt, config=config.model_dump(),
        t_start_used=result.t_start_used, layers_overridden=result.layers_overridden,
        visited_steps=len(result.visited_steps), repository_records=len(result.repository),
        repository_bytes=result.repository.memory_footprint(), model_hash=checkpoint.model_hash,
        codec_id=checkpoint.codec.codec_id, schedule_hash=result.repository.binding.schedule_hash,
        outputs=outputs,
        metrics={'structure_distance': structure_distance(source, result.edited),
                 'chroma_sim': chroma_similarity(source, result.edited),
                 'onset_correlation': onset_correlation(source, result.edited)})
    atomic_write_json(out / "result.json", record.model_dump())
    print(f"edited {args.source} toward '{result.target_prompt}' at T_start {result.t_start_used} "
          f"(layers {EditConfig.format_layers(config.layer_window)}) -> {out / 'edited.mspc'}")
    _write_run_config(args, args.out, output_is_dir=True)
    return EXIT_OK


def cmd_probe(args: argparse.Namespace, context: Context) -> int:
    """Train CA and SA probes over every layer for one attribute axis."""
    from src.services.probing import probe_all_layers

    checkpoint = _load_checkpoint(args, context)
    probe_config = _override(context.defaults.probe, prompts_per_class=args.prompts_per_class,
                             sampling_steps=args.steps, seed=args.seed, train_steps=args.train_steps)
    args.prompts_per_class, args.steps, args.seed, args.train_steps = (
        probe_config.prompts_per_class, probe_config.sampling_steps, probe_config.seed, probe_config.train_steps)

    run_id = _run_id(args.out)
    log_pipeline_step(run_id, "probe", "probe", "started", axis=args.axis)
    ca_report, sa_report = probe_all_layers(checkpoint, context.registry, args.axis, probe_config,
                                            layers=args.layers or None, jobs=args.jobs)
    log_pipeline_step(run_id, "probe", "probe", "completed", ca_accuracy=ca_report.overall_average,
                      sa_accuracy=sa_report.overall_average)

    out = Path(args.out)
    for name, report in (("ca", ca_report), ("sa", sa_report)):
        atomic_write_json(out / f"probe_{name}.json", report.model_dump())
        atomic_write_bytes(out / f"probe_{name}.txt", report.to_text().encode("utf-8"))
        print(report.to_text())
    _write_run_config(args, args.out, output_is_dir=True)
    return EXIT_OK


def _published_report(args: argparse.Namespace, context: Context) -> int:
    from src.services.metrics import recompute_published

    published = context.config_manager.get_all_published()
    names = [args.dataset] if args.dataset else sorted(published)
    results = {}
    ok = True
    for name in names:
        recomputation = recompute_published(context.config_manager.get_published(name))
        results[name] = recomputation.model_dump()
        ok = ok and recomputation.all_within_tolerance
        failures = [c for c in recomputation.cells if not c.within_tolerance]
        print(f"{name}: {len(recomputation.cells) - len(failures)}/{len(recomputation.cells)} cells within "
              f"tolerance" + (f" ({', '.join(f'{c.method} {c.metric}' for c in failures)} off)" if failures else ""))
    atomic_write_json(args.report, results)
    _write_run_config(args, args.report, output_is_dir=False)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_eval(args: argparse.Namespace, context: Context) -> int:
    """Score a method cohort on a benchmark manifest, or recompute the published composites."""
    if args.published:
        return _published_report(args, context)

    from src.services.editor import evaluate_methods, load_eval_set

    manifest = _require_file(args.manifest, "--manifest")
    checkpoint = _load_checkpoint(args, context)
    config = _edit_config(args, context.defaults)
    args.dataset = args.dataset or manifest.stem
    items = load_eval_set(manifest, limit=args.limit)
    run_id = _run_id(args.report)
    log_pipeline_step(run_id, "eval", "score", "started", methods=args.methods, clips=len(items))
    scorer = _train_scorer(args, context)
    report = evaluate_methods(checkpoint, items, args.methods, config, scorer, dataset=args.dataset, jobs=args.jobs)
    log_pipeline_step(run_id, "eval", "score", "completed", methods=args.methods)
    atomic_write_json(args.report, report.model_dump())
    for method in report.methods:
        print(f"{method.name:<16} adherence {method.raw.adherence:.3f}  structure {method.raw.structure_distance:.3f}"
              f"  chroma {method.raw.chroma_sim:.3f}  ASB {method.asb:.2f}  AMB {method.amb:.2f}")
    _write_run_config(args, args.report, output_is_dir=False)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, context: Context) -> int:
    """Layer-window ablation or T_start sweep over a benchmark manifest."""
    from src.services.editor import (DEFAULT_ABLATION_WINDOWS, DEFAULT_T_STARTS, layer_ablation_sweep,
                                     load_eval_set, render_sweep_plot, t_start_sweep)

    manifest = _require_file(args.manifest, "--manifest")
    checkpoint = _load_checkpoint(args, context)
    config = _edit_config(args, context.defaults)
    items = load_eval_set(manifest, limit=args.limit)
    scorer = _train_scorer(args, context)
    out = Path(args.out)
    run_id = _run_id(args.out)
    log_pipeline_step(run_id, "sweep", args.kind, "started", clips=len(items))

    if args.kind == "layers":
        args.window = _pick(args.window, list(DEFAULT_ABLATION_WINDOWS))
        for window in args.window:
            _layers(window)
        report = layer_ablation_sweep(checkpoint, items, config, scorer, windows=args.window, jobs=args.jobs)
        atomic_write_json(out / "ablation.json", report.model_dump())
        for row in report.tables[0].rows:
            print(f"{row.window:<8} adherence {row.adherence:.3f}  structure {row.structure_distance:.3f}  "
                  f"chroma {row.chroma_sim:.3f}  ASB {row.asb:.2f}  AMB {row.amb:.2f}")
    else:
        args.t_starts = _pick(args.t_starts, list(DEFAULT_T_STARTS))
        report = t_start_sweep(checkpoint, items, config, scorer, t_starts=args.t_starts, jobs=args.jobs)
        atomic_write_json(out / "t_start_sweep.json", report.model_dump())
        render_sweep_plot(report, out / "t_start_sweep.png")
        for curve in report.curves:
            print(curve.method + ": " + "  ".join(f"T={p.t_start} adh {p.adherence:.3f} str {p.structure_distance:.3f}"
                                                  for p in curve.points))

    log_pipeline_step(run_id, "sweep", args.kind, "completed")
    _write_run_config(args, args.out, output_is_dir=True)
    return EXIT_OK


def cmd_replace(args: argparse.Namespace, context: Context) -> int:
    """Generate a prompt pair with SA or CA maps carried from the source generation."""
    from src.services.editor import replacement_experiment
    from src.services.spectra import save_spectrogram

    checkpoint = _load_checkpoint(args, context)
    config = _edit_config(args, context.defaults)
    result = replacement_experiment(checkpoint, args.source_prompt, args.prompt, args.kind, config.layer_window,
                                    config)
    out = Path(args.out)
    for name, spec in (("source", result.source), ("plain", result.plain), ("replaced", result.replaced)):
        save_spectrogram(spec, out / f"{name}.mspc")
        write_spectrogram_image(spec.data, out / f"{name}.pgm")
    print(f"{result.kind.value} maps of layers {EditConfig.format_layers(result.layers)} replaced -> {out}")
    _write_run_config(args, args.out, output_is_dir=True)
    return EXIT_OK


def cmd_render(args: argparse.Namespace, context: Context) -> int:
    """Render an MSPC file as an 8-bit PGM (or PNG when the output ends in .png)."""
    from src.services.spectra import load_spectrogram

    spec = load_spectrogram(_require_file(args.input, "--in"))
    write_spectrogram_image(spec.data, args.out, png=Path(args.out).suffix.lower() == ".png")
    print(f"rendered {args.input} -> {args.out}")
    _write_run_config(args, args.out, output_is_dir=False)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace, context: Context) -> int:
    """Re-run a command from its config echo."""
    path = _require_file(args.run_config, "run_config")
    try:
        record = RunConfig.model_validate_json(path.read_bytes())
    except ValidationError as e:
        raise UsageError(f"invalid config echo {path}: {e}", original_exception=e)
    if record.command not in COMMANDS or record.command == "replay":
        raise UsageError(f"cannot replay command '{record.command}'", context={'command': record.command})
    replayed = argparse.Namespace(command=record.command, **record.args)
    logger.info(f"Replaying {record.command} from {path}", extra={'command': record.command, 'output': record.output})
    return COMMANDS[record.command](replayed, context)


COMMANDS: Dict[str, Callable[[argparse.Namespace, Context], int]] = {
    'synth': cmd_synth,
    'train': cmd_train,
    'generate': cmd_generate,
    'edit': cmd_edit,
    'probe': cmd_probe,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'replace': cmd_replace,
    'render': cmd_render,
    'replay': cmd_replay,
}


def _add_edit_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--t-start", type=int, help="Inversion depth (rounded down to the step grid)")
    parser.add_argument("--layers", type=_layers, help="Layer window: 8-14, 1-16, none or 3,5,9")
    parser.add_argument("--cfg", type=float, help="Classifier-free guidance strength")
    parser.add_argument("--steps", type=int, help="Inference steps")
    parser.add_argument("--seed", type=int)


def _add_scorer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train-manifest", help="Dataset the attribute classifiers are fit on "
                                                 "(defaults to --manifest)")
    parser.add_argument("--classifier-steps", type=int, default=300)
    parser.add_argument("--limit", type=int, help="Use only the first N benchmark entries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="music-editor",
                                     description="Structure-preserving music editing on a toy latent diffusion model")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Render a labeled synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--axes", type=_name_list, help=f"Comma list of {', '.join(ATTRIBUTE_AXES)}")
    synth.add_argument("--clips-per-class", type=int)
    synth.add_argument("--frames", type=int)
    synth.add_argument("--bins", type=int)
    synth.add_argument("--benchmark", action="store_true", help="Also write benchmark.json with edit targets")
    synth.add_argument("--benchmark-per-axis", type=int)
    synth.add_argument("--jobs", type=int, default=1)

    train = sub.add_parser("train", help="Train the toy denoiser")
    train.add_argument("--manifest", required=True)
    train.add_argument("--out", required=True, help="Checkpoint path (.mldm)")
    train.add_argument("--steps", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--patch", type=_patch, default=[8, 8], help="Codec patch, e.g. 8x8")
    train.add_argument("--model-layers", type=int)
    train.add_argument("--width", type=int, help="Residual and attention width")
    train.add_argument("--heads", type=int)
    train.add_argument("--hidden", type=int)
    train.add_argument("--progress", action="store_true")

    generate = sub.add_parser("generate", help="Sample a clip for a prompt")
    generate.add_argument("--model")
    generate.add_argument("--prompt", required=True)
    generate.add_argument("--cfg", type=float)
    generate.add_argument("--steps", type=int)
    generate.add_argument("--seed", type=int)
    generate.add_argument("--out", required=True)
    generate.add_argument("--png", action="store_true")

    edit = sub.add_parser("edit", help="Edit a clip toward a target prompt")
    edit.add_argument("--model")
    edit.add_argument("--source", required=True)
    edit.add_argument("--prompt", required=True)
    _add_edit_flags(edit)
    edit.add_argument("--out", required=True)
    edit.add_argument("--repository", help="Reuse a saved attention repository instead of capturing")
    edit.add_argument("--save-repository", help="Write the captured attention repository here")
    edit.add_argument("--no-reconstruction", action="store_true")
    edit.add_argument("--png", action="store_true")

    probe = sub.add_parser("probe", help="Probe attention maps for attribute information")
    probe.add_argument("--model")
    probe.add_argument("--axis", choices=ATTRIBUTE_AXES, required=True)
    probe.add_argument("--prompts-per-class", type=int)
    probe.add_argument("--steps", type=int, help="Sampling steps per generation")
    probe.add_argument("--train-steps", type=int)
    probe.add_argument("--layers", type=_layers, help="Layers to probe (all when omitted)")
    probe.add_argument("--seed", type=int)
    probe.add_argument("--out", required=True)
    probe.add_argument("--jobs", type=int, default=1)

    evaluate = sub.add_parser("eval", help="Score methods on a benchmark manifest")
    evaluate.add_argument("--model")
    evaluate.add_argument("--manifest")
    evaluate.add_argument("--methods", type=_name_list, default=["asr", "ddim_baseline"])
    evaluate.add_argument("--dataset", help="Report name; with --published, the table to recompute")
    evaluate.add_argument("--report", required=True)
    evaluate.add_argument("--published", action="store_true",
                          help="Recompute the published composite columns instead of running a model")
    _add_edit_flags(evaluate)
    _add_scorer_flags(evaluate)
    evaluate.add_argument("--jobs", type=int, default=1)

    sweep = sub.add_parser("sweep", help="Layer-window ablation or T_start sweep")
    sweep.add_argument("kind", choices=("layers", "t-start"))
    sweep.add_argument("--model")
    sweep.add_argument("--manifest", required=True)
    sweep.add_argument("--window", action="append", help="Layer window to ablate (repeatable)")
    sweep.add_argument("--t-starts", type=_int_list, help="Comma list of T_start values")
    _add_edit_flags(sweep)
    _add_scorer_flags(sweep)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=1)

    replace = sub.add_parser("replace", help="Carry SA or CA maps from one prompt's generation to another")
    replace.add_argument("--model")
    replace.add_argument("--source-prompt", required=True)
    replace.add_argument("--prompt", required=True)
    replace.add_argument("--kind", choices=("sa", "ca"), default="sa")
    _add_edit_flags(replace)
    replace.add_argument("--out", required=True)

    render = sub.add_parser("render", help="Render a spectrogram as an image")
    render.add_argument("--in", dest="input", required=True)
    render.add_argument("--out", required=True)

    replay = sub.add_parser("replay", help="Re-run a command from its config echo")
    replay.add_argument("run_config")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)

    app_config = AppConfig.from_env()
    if args.log_level:
        app_config = app_config.model_copy(update={'log_level': args.log_level.upper()})
    setup_logging(log_level=app_config.log_level, log_dir=app_config.log_dir, enable_console=True,
                  enable_file=True, enable_structured=True)

    if args.command == "eval" and not args.published and not args.manifest:
        parser.error("eval needs --manifest unless --published is given")

    try:
        config_manager = ConfigManager(config_dir=app_config.config_dir)
        config_manager.load_configurations()
        return COMMANDS[args.command](args, Context(app_config, config_manager))
    except UsageError as e:
        logger.error(f"Usage error: {e}", extra={'error_details': e.to_dict()})
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_USAGE
    except MusicEditorError as e:
        logger.error(f"{args.command} failed: {e}", extra={'error_details': e.to_dict()})
        print(f"error: {e.message}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}", extra={'error_type': type(e).__name__})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
