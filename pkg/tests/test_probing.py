import numpy as np
import pytest
import torch

from src.models.config import ProbeConfig
from src.models.reports import ProbeReport
from src.services.attention import AttentionKind
from src.services.probing import (LabeledPrompt, ProbeError, ProbeSample, class_prompts, collect_maps, merge_reports,
                                  pool_map, probe_all_layers, sampled_steps, train_probe)
from src.services.sampler import build_schedule

FAST_PROBE = ProbeConfig(prompts_per_class=10, sampling_steps=10, steps_to_sample=3, cfg_w=2.0, hidden_width=16,
                         train_steps=50, highlight_layers=[2])


def _clusters(per_class: int, separation: float, seed: int = 0, layer: int = 1):
    rng = np.random.default_rng(seed)
    samples = []
    for index, name in enumerate(("piano", "violin", "flute")):
        centre = np.zeros(6)
        centre[index] = separation
        for _ in range(per_class):
            samples.append(ProbeSample(features=centre + rng.standard_normal(6), label=name, layer=layer,
                                       kind=AttentionKind.SA, axis="instrument"))
    return samples


def test_sampled_steps_span_the_reverse_pass():
    _, schedule = build_schedule(1000, 50)

    steps = sampled_steps(schedule, 8)

    assert len(steps) == 8
    assert steps[0] == 980
    assert steps[-1] == 20
    assert steps == sorted(steps, reverse=True)
    assert 0 not in steps


def test_sampled_steps_never_exceed_the_grid():
    _, schedule = build_schedule(100, 4)

    assert sampled_steps(schedule, 8) == [75, 50, 25]


def test_sa_maps_pool_to_a_fixed_grid():
    maps = np.random.default_rng(0).random((2, 64, 64))

    features = pool_map(maps, "SA")

    assert features.shape == (256,)
    assert features[0] == pytest.approx(maps.mean(axis=0)[:4, :4].mean())


def test_ca_maps_average_the_keyword_columns():
    maps = torch.zeros(3, 5, 4, dtype=torch.float64)
    maps[..., 2] = 1.0

    features = pool_map(maps, AttentionKind.CA, span=(2, 3))

    np.testing.assert_allclose(features, np.ones(5))
    np.testing.assert_allclose(pool_map(maps, AttentionKind.CA, span=(0, 2)), np.zeros(5))


def test_probe_separates_distinct_clusters():
    probe, report = train_probe(_clusters(20, separation=6.0), FAST_PROBE.model_copy(update={'train_steps': 200}))

    assert report.overall_average >= 0.9
    assert report.layers == [1]
    assert report.classes == ["flute", "piano", "violin"]
    assert probe.predict(np.eye(6)[:1] * 6.0) == ["piano"]


def test_shuffled_labels_destroy_the_signal():
    _, report = train_probe(_clusters(20, separation=6.0), FAST_PROBE.model_copy(update={'train_steps': 200}),
                            shuffle_labels=True)

    assert report.overall_average < 0.9


def test_probe_needs_enough_samples_per_class():
    with pytest.raises(ProbeError) as exc_info:
        train_probe(_clusters(9, separation=6.0), FAST_PROBE)
    assert exc_info.value.context['counts'] == {'flute': 9, 'piano': 9, 'violin': 9}


def test_probe_rejects_mixed_layers():
    with pytest.raises(ProbeError):
        train_probe(_clusters(10, 6.0, layer=1) + _clusters(10, 6.0, layer=2), FAST_PROBE)


def test_merge_reports_builds_the_layer_table():
    reports = [train_probe(_clusters(12, 6.0, seed=layer, layer=layer), FAST_PROBE)[1] for layer in (2, 1)]

    merged = merge_reports(reports, highlight_layers=[2, 9])

    assert merged.layers == [1, 2]
    assert merged.highlight_layers == [2]
    assert set(merged.accuracy["piano"]) == {"1", "2"}
    expected = np.mean([merged.layer_average["1"], merged.layer_average["2"]])
    assert merged.overall_average == pytest.approx(expected)
    assert "L2*" in merged.to_text()


def test_merge_reports_rejects_mixed_kinds():
    report = train_probe(_clusters(10, 6.0), FAST_PROBE)[1]
    other = report.model_copy(update={'kind': "CA"})

    with pytest.raises(ProbeError):
        merge_reports([report, other])
    with pytest.raises(ProbeError):
        merge_reports([])


def test_class_prompts_use_the_axis_template(registry):
    prompts = class_prompts(registry, "instrument", per_class=2, seed=1)

    assert len(prompts) == 2 * len(registry.classes("instrument"))
    assert prompts[0].text == registry.prompt("instrument", prompts[0].class_label)
    assert len({p.seed for p in prompts}) == len(prompts)


def test_keyword_missing_from_prompt_is_rejected(tiny_checkpoint):
    prompt = LabeledPrompt(text="a solo piano music", keyword="violin", class_label="violin", seed=0)

    with pytest.raises(ProbeError):
        collect_maps(tiny_checkpoint, [prompt], [1], AttentionKind.CA, FAST_PROBE, "instrument")


def test_collected_features_have_the_pooled_shapes(tiny_checkpoint):
    prompt = LabeledPrompt(text="a solo piano music", keyword="piano", class_label="piano", seed=0)

    samples = collect_maps(tiny_checkpoint, [prompt], [1, 3], (AttentionKind.CA, AttentionKind.SA),
                           FAST_PROBE, "instrument")

    shapes = {(s.kind, s.layer): s.features.shape for s in samples}
    tokens = tiny_checkpoint.config.tokens
    assert shapes == {(AttentionKind.CA, 1): (tokens,), (AttentionKind.CA, 3): (tokens,),
                      (AttentionKind.SA, 1): (256,), (AttentionKind.SA, 3): (256,)}


def test_probe_all_layers_on_the_tiny_model(tiny_checkpoint, registry):
    ca_report, sa_report = probe_all_layers(tiny_checkpoint, registry, "instrument", FAST_PROBE)

    for report, kind in ((ca_report, "CA"), (sa_report, "SA")):
        assert isinstance(report, ProbeReport)
        assert report.kind == kind
        assert report.layers == [1, 2, 3]
        assert report.classes == sorted(registry.classes("instrument"))
        assert 0.0 <= report.overall_average <= 1.0
        assert "Avg." in report.to_text()
