import numpy as np
import pytest

from src.models.config import EditConfig
from src.services.attention import AttentionKind, HookSet
from src.services.condition import VocabularyError
from src.services.editor import (EditError, attach_repository, capture, edit, evaluate_methods, layer_ablation_sweep,
                                 load_eval_set, render_sweep_plot, replacement_experiment, t_start_sweep)
from src.services.metrics import train_attribute_classifiers
from src.services.repository import AttentionRepository, BindingMismatchError
from src.services.sampler import reverse_from, schedule_for

TARGET = "a solo violin music"


@pytest.fixture(scope="module")
def eval_items(tiny_dataset):
    return load_eval_set(tiny_dataset / "benchmark.json", limit=3)


@pytest.fixture(scope="module")
def scorer(tiny_dataset, registry):
    return train_attribute_classifiers(tiny_dataset / "manifest.json", registry, seed=0, steps=50)


def test_edit_reports_what_it_did(tiny_checkpoint, tiny_source, tiny_edit_config):
    result = edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config)

    assert result.t_start_used == 60
    assert result.visited_steps == (10, 20, 30, 40, 50, 60)
    assert result.layers_overridden == [2, 3]
    assert result.edited.data.shape == tiny_source.data.shape
    assert result.edited.data.min() >= 0.0
    assert result.reconstruction is not None
    assert set(result.timings) >= {"capture", "reverse", "reconstruct", "decode"}


def test_edit_is_deterministic(tiny_checkpoint, tiny_source, tiny_edit_config):
    first = edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config, reconstruct=False)
    second = edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config, reconstruct=False)

    np.testing.assert_array_equal(first.edited.data, second.edited.data)


def test_empty_window_is_plain_inversion_and_regeneration(tiny_checkpoint, tiny_source, tiny_edit_config):
    config = tiny_edit_config.model_copy(update={'layer_window': []})
    plain = edit(tiny_checkpoint, tiny_source, TARGET, config, reconstruct=False)
    retained = edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config, reconstruct=False)

    assert plain.layers_overridden == []
    assert not np.array_equal(plain.edited.data, retained.edited.data)


def test_zero_t_start_returns_the_source(tiny_checkpoint, tiny_source, tiny_edit_config):
    config = tiny_edit_config.model_copy(update={'t_start': 0})

    result = edit(tiny_checkpoint, tiny_source, TARGET, config)

    assert result.visited_steps == ()
    assert result.layers_overridden == []
    np.testing.assert_allclose(result.edited.data, tiny_source.data, atol=1e-5)


def test_one_capture_serves_several_windows(tiny_checkpoint, tiny_source, tiny_edit_config):
    prior = capture(tiny_checkpoint, tiny_source, tiny_edit_config)

    for window in ([1], [2, 3], [1, 2, 3]):
        config = tiny_edit_config.model_copy(update={'layer_window': window})
        reused = edit(tiny_checkpoint, tiny_source, TARGET, config, prior=prior, reconstruct=False)
        fresh = edit(tiny_checkpoint, tiny_source, TARGET, config, reconstruct=False)
        np.testing.assert_array_equal(reused.edited.data, fresh.edited.data)


def test_saved_repository_reproduces_the_edit(tmp_path, tiny_checkpoint, tiny_source, tiny_edit_config):
    fresh = edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config, reconstruct=False)
    path = fresh.repository.save(tmp_path / "capture.mrep")

    prior = attach_repository(tiny_checkpoint, tiny_source, tiny_edit_config, AttentionRepository.load(path))
    replayed = edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config, prior=prior, reconstruct=False)

    np.testing.assert_array_equal(replayed.edited.data, fresh.edited.data)


def test_repository_from_another_schedule_is_rejected(tiny_checkpoint, tiny_source, tiny_edit_config):
    other = capture(tiny_checkpoint, tiny_source, tiny_edit_config.model_copy(update={'steps': 20}))

    with pytest.raises(BindingMismatchError):
        attach_repository(tiny_checkpoint, tiny_source, tiny_edit_config, other.repository)
    with pytest.raises(BindingMismatchError):
        edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config, prior=other)


def test_invalid_edit_settings(tiny_checkpoint, tiny_source, tiny_edit_config):
    with pytest.raises(EditError):
        edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config.model_copy(update={'layer_window': [3, 4]}))
    with pytest.raises(EditError):
        edit(tiny_checkpoint, tiny_source, TARGET, tiny_edit_config.model_copy(update={'t_start': 101}))
    with pytest.raises(VocabularyError):
        edit(tiny_checkpoint, tiny_source, "a solo banjo music", tiny_edit_config)


def test_overrides_reach_every_reverse_step_on_both_guidance_branches(tiny_checkpoint, tiny_source, tiny_edit_config):
    prior = capture(tiny_checkpoint, tiny_source, tiny_edit_config)
    hooks = prior.repository.installed_on(HookSet(), [2])
    reverse_from(tiny_checkpoint, prior.latent.tokens, 60, TARGET, 2.0, schedule_for(tiny_checkpoint, 10), hooks)

    assert {(step, branch) for step, _, _, branch in hooks.override_log} == {
        (step, branch) for step in (10, 20, 30, 40, 50, 60) for branch in ("cond", "uncond")}
    assert {kind for _, _, kind, _ in hooks.override_log} == {AttentionKind.SA.value}


def test_layers_outside_the_window_are_never_overridden(tiny_checkpoint, tiny_source, tiny_edit_config):
    prior = capture(tiny_checkpoint, tiny_source, tiny_edit_config)
    window = [1, 3]
    hooks = prior.repository.installed_on(HookSet(), window)
    reverse_from(tiny_checkpoint, prior.latent.tokens, 60, TARGET, 2.0, schedule_for(tiny_checkpoint, 10), hooks)

    assert {layer for _, layer, _, _ in hooks.override_log} == set(window)
    for step in prior.repository.visited_steps:
        for branch in ("cond", "uncond"):
            layers = sorted(layer for t, layer, _, b in hooks.override_log if t == step and b == branch)
            assert layers == window


def test_method_cohort_report(tiny_checkpoint, eval_items, scorer, tiny_edit_config):
    report = evaluate_methods(tiny_checkpoint, eval_items, ["asr", "ddim_baseline", "reconstruction"],
                              tiny_edit_config, scorer, dataset="tiny")

    assert report.dataset == "tiny"
    assert [m.name for m in report.methods] == ["asr", "ddim_baseline", "reconstruction"]
    for method in report.methods:
        assert 0.0 <= method.raw.adherence <= 1.0
        assert 0.0 <= method.asb <= 1.0
        assert 0.0 <= method.amb <= 1.0
    assert set(report.normalization_trace) >= {"adherence", "structure_distance", "chroma_sim"}


def test_method_cohort_rejects_bad_method_lists(tiny_checkpoint, eval_items, scorer, tiny_edit_config):
    with pytest.raises(EditError):
        evaluate_methods(tiny_checkpoint, eval_items, ["asr", "magic"], tiny_edit_config, scorer)
    with pytest.raises(EditError):
        evaluate_methods(tiny_checkpoint, eval_items, ["asr"], tiny_edit_config, scorer)


def test_layer_ablation_tables(tiny_checkpoint, eval_items, scorer, tiny_edit_config):
    report = layer_ablation_sweep(tiny_checkpoint, eval_items, tiny_edit_config, scorer,
                                  windows=["None", "1-3", "2-3"])

    assert [t.edit_type for t in report.tables] == ["all", "timbre"]
    pooled = report.table("all")
    assert [row.window for row in pooled.rows] == ["None", "1-3", "2-3"]
    assert pooled.row("1-3").layers == [1, 2, 3]
    assert pooled.clips == len(eval_items)
    with pytest.raises(EditError):
        layer_ablation_sweep(tiny_checkpoint, eval_items, tiny_edit_config, scorer, windows=["2-5"])


def test_t_start_sweep_and_plot(tmp_path, tiny_checkpoint, eval_items, scorer, tiny_edit_config):
    report = t_start_sweep(tiny_checkpoint, eval_items[:2], tiny_edit_config, scorer, t_starts=(35, 90))

    assert [c.method for c in report.curves] == ["asr", "ddim_baseline"]
    assert [p.t_start_used for p in report.curve("asr").points] == [30, 90]
    assert report.curve("ddim_baseline").layers == []

    first = render_sweep_plot(report, tmp_path / "a.png").read_bytes()
    second = render_sweep_plot(report, tmp_path / "b.png").read_bytes()
    assert first[:8] == b"\x89PNG\r\n\x1a\n"
    assert first == second


def test_sa_replacement_with_identical_prompts_reproduces_the_source(tiny_checkpoint, tiny_edit_config):
    result = replacement_experiment(tiny_checkpoint, TARGET, TARGET, "sa", [1, 2, 3], tiny_edit_config)

    assert result.kind == AttentionKind.SA
    np.testing.assert_allclose(result.replaced.data, result.source.data, atol=1e-4)
    np.testing.assert_allclose(result.plain.data, result.source.data, atol=1e-4)


def test_replacement_changes_the_target_generation(tiny_checkpoint, tiny_edit_config):
    result = replacement_experiment(tiny_checkpoint, "a solo piano music", TARGET, "ca", [1, 2, 3],
                                    tiny_edit_config)

    assert result.layers == [1, 2, 3]
    assert not np.array_equal(result.replaced.data, result.plain.data)


def test_ca_replacement_needs_equal_prompt_lengths(tiny_checkpoint, tiny_edit_config):
    with pytest.raises(EditError):
        replacement_experiment(tiny_checkpoint, "a solo piano music", "a piano music", "ca", [1],
                               tiny_edit_config)


def test_format_layers_round_trip():
    assert EditConfig.format_layers(EditConfig.parse_layers("8-14")) == "8-14"
    assert EditConfig.format_layers([]) == "None"
