import numpy as np
import pytest

from src.models.config import SpectraConfig
from src.models.reports import MethodRaw
from src.services.interfaces import AdherenceScorer
from src.services.metrics import (EMBEDDING_DIM, FrechetStats, MetricsError, adherence_score, amb, asb,
                                  chroma_similarity, frechet_feature_distance, frechet_stats, metric_report, pearson,
                                  recompute_published, structure_distance, train_attribute_classifiers,
                                  zscore_minmax)
from src.services.spectra import MelSpectrogram, load_clip, load_manifest, render_clip


@pytest.fixture(scope="module")
def scorer(tiny_dataset, registry):
    return train_attribute_classifiers(tiny_dataset / "manifest.json", registry, seed=0, steps=100)


@pytest.fixture(scope="module")
def clips(tiny_dataset):
    manifest = tiny_dataset / "manifest.json"
    return [load_clip(manifest, entry) for entry in load_manifest(manifest)]


@pytest.mark.parametrize("dataset", ["musicdelta", "zome_bench", "prompt_pairs"])
def test_published_composites_recompute_within_tolerance(config_manager, dataset):
    recomputation = recompute_published(config_manager.get_published(dataset))

    assert recomputation.all_within_tolerance
    assert len(recomputation.cells) == 2 * 6


def test_published_known_discrepancy_is_flagged(config_manager):
    recomputation = recompute_published(config_manager.get_published("prompt_pairs"))

    flagged = [cell for cell in recomputation.cells if cell.known_discrepancy]
    assert {cell.method for cell in flagged} == {"SDEdit"}
    assert any(not cell.within_tolerance for cell in flagged)


def test_published_cells_follow_the_printed_row_order(config_manager):
    published = config_manager.get_published("prompt_pairs")
    recomputation = recompute_published(published)

    assert recomputation.dataset == "prompt_pairs"
    assert [c.metric for c in recomputation.cells] == ["asb"] * 6 + ["amb"] * 6
    assert [c.method for c in recomputation.cells] == published.methods * 2
    assert [c.printed for c in recomputation.cells] == published.asb + published.amb


def test_published_cells_match_hand_computed_values(config_manager):
    musicdelta = recompute_published(config_manager.get_published("musicdelta"))
    cells = {(c.method, c.metric): c for c in musicdelta.cells}

    assert cells[("DDPM-Friendly", "asb")].recomputed == pytest.approx(0.584, abs=5e-3)
    assert cells[("DDPM-Friendly", "amb")].recomputed == pytest.approx(0.737, abs=5e-3)
    assert cells[("ASR", "asb")].recomputed == pytest.approx(0.971, abs=5e-3)
    assert cells[("ASR", "asb")].tolerance == 0.04
    assert cells[("SDEdit", "asb")].recomputed == 0.0


def test_zscore_minmax_endpoints():
    assert zscore_minmax([1.0, 2.0, 4.0]) == pytest.approx([0.0, 1.0 / 3.0, 1.0])
    assert zscore_minmax([3.0, 3.0]) == [0.5, 0.5]
    with pytest.raises(MetricsError):
        zscore_minmax([])
    with pytest.raises(MetricsError):
        zscore_minmax([1.0, float("nan")])


def test_composites_need_a_cohort():
    assert asb([0.2, 0.4], [5.0, 3.0]) == [0.0, 1.0]
    assert amb([0.3, 0.3], [0.1, 0.1]) == [0.5, 0.5]
    with pytest.raises(MetricsError):
        asb([0.2], [5.0])
    with pytest.raises(MetricsError):
        amb([0.2, 0.3], [0.1])


def test_frechet_distance_in_one_dimension():
    a = FrechetStats(np.array([0.0]), np.array([[1.0]]))
    b = FrechetStats(np.array([2.0]), np.array([[4.0]]))

    assert frechet_feature_distance(a, b) == pytest.approx(5.0)
    assert frechet_feature_distance(a, a) == pytest.approx(0.0, abs=1e-12)


def test_frechet_distance_of_identical_samples_is_zero():
    stats = frechet_stats(np.random.default_rng(0).standard_normal((50, 4)))

    assert frechet_feature_distance(stats, stats) == pytest.approx(0.0, abs=1e-9)


def test_frechet_rejects_bad_covariances():
    good = FrechetStats(np.zeros(2), np.eye(2))
    indefinite = FrechetStats(np.zeros(2), np.diag([1.0, -1.0]))

    with pytest.raises(MetricsError):
        frechet_feature_distance(good, indefinite)
    with pytest.raises(MetricsError):
        frechet_feature_distance(good, FrechetStats(np.zeros(3), np.eye(3)))
    with pytest.raises(MetricsError):
        frechet_stats(np.zeros((1, 3)))


def test_pearson_handles_constant_signals():
    assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0)
    assert pearson([1.0, 1.0], [1.0, 1.0]) == 1.0
    assert pearson([1.0, 1.0], [1.0, 2.0]) == 0.0
    with pytest.raises(MetricsError):
        pearson([1.0], [1.0, 2.0])


def test_structure_distance_of_a_clip_to_itself_is_zero(clips):
    assert structure_distance(clips[0], clips[0]) == pytest.approx(0.0, abs=1e-12)
    assert structure_distance(clips[0], clips[-1]) > 0.0


def test_chroma_similarity(clips):
    silent = clips[0].with_data(np.zeros_like(clips[0].data))

    assert chroma_similarity(clips[0], clips[0]) == pytest.approx(1.0)
    assert chroma_similarity(silent, silent) == 0.0
    assert 0.0 <= chroma_similarity(clips[0], clips[-1]) <= 1.0


def test_metric_report_traces_every_axis():
    cohort = {'asr': MethodRaw(adherence=0.4, structure_distance=0.2, chroma_sim=0.8, fad=1.0),
              'ddim_baseline': MethodRaw(adherence=0.5, structure_distance=0.6, chroma_sim=0.5, fad=2.0)}

    report = metric_report("unit", cohort)

    assert set(report.normalization_trace) == {"adherence", "structure_distance", "chroma_sim", "fad"}
    assert report.normalization_trace["adherence"].max == 0.5
    assert [m.name for m in report.methods] == ["asr", "ddim_baseline"]
    assert report.methods[0].amb == pytest.approx(0.0)


def test_metric_report_omits_fad_when_missing():
    cohort = {'a': MethodRaw(adherence=0.1, structure_distance=0.2, chroma_sim=0.3),
              'b': MethodRaw(adherence=0.2, structure_distance=0.1, chroma_sim=0.4)}

    assert "fad" not in metric_report("unit", cohort).normalization_trace


def test_classifier_outputs(scorer, clips, registry):
    classifier = scorer.classifiers["instrument"]
    probabilities = classifier.probabilities(clips)

    assert classifier.classes == registry.classes("instrument")
    assert probabilities.shape == (len(clips), len(classifier.classes))
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0)
    assert scorer.embed(clips[:3]).shape == (3, EMBEDDING_DIM)
    assert 0.0 <= adherence_score(clips[0], "violin", scorer) <= 1.0


def test_classifier_learns_the_tiny_dataset(scorer, clips, tiny_dataset):
    labels = [entry.class_label for entry in load_manifest(tiny_dataset / "manifest.json")]
    adherence = [scorer.adherence(clip, label) for clip, label in zip(clips, labels)]

    assert np.mean(adherence) > 0.5


def test_uniform_noise_scores_at_chance(scorer, clips):
    classes = scorer.classifiers["instrument"].classes
    rng = np.random.default_rng(7)
    peak = max(float(clip.data.max()) for clip in clips)

    scores = []
    for draw in range(32):
        noise = MelSpectrogram(rng.uniform(0.0, peak, clips[0].data.shape), clips[0].meta)
        scores.append(adherence_score(noise, classes[draw % len(classes)], scorer))

    assert abs(np.mean(scores) - 1.0 / len(classes)) <= 0.2


def test_unknown_classes_are_rejected(scorer, clips):
    with pytest.raises(MetricsError):
        scorer.adherence(clips[0], "kazoo")
    with pytest.raises(MetricsError):
        scorer.classifiers["instrument"].adherence(clips[0], "jazz")


def test_structure_distance_is_symmetric(clips):
    assert structure_distance(clips[0], clips[5]) == pytest.approx(structure_distance(clips[5], clips[0]), abs=1e-6)


def test_shared_content_is_closer_than_shared_nothing(tiny_dataset, registry, tiny_spectra):
    entries = load_manifest(tiny_dataset / "manifest.json")
    pianos = [e for e in entries if e.class_label == "piano"]
    violins = [e for e in entries if e.class_label == "violin"]
    violin_style = registry.style_for("instrument", "violin")

    def render(entry, style):
        return render_clip(entry.content, style, tiny_spectra.frames, tiny_spectra.bins, tiny_spectra)

    same_content = [structure_distance(render(p, p.style), render(p, violin_style)) for p in pianos]
    different = [structure_distance(render(p, p.style), render(v, v.style)) for p, v in zip(pianos, violins)]

    assert np.mean(same_content) < np.mean(different)


def test_tritone_transposition_lowers_chroma_similarity(tiny_dataset):
    entry = load_manifest(tiny_dataset / "manifest.json")[0]
    config = SpectraConfig()

    def render(content):
        return render_clip(content, entry.style, config.frames, config.bins, config)

    original = render(entry.content)
    shifted = render(entry.content.transposed(-6))

    assert chroma_similarity(original, shifted) < chroma_similarity(original, original)


def test_scorers_satisfy_the_adherence_interface(scorer):
    assert isinstance(scorer, AdherenceScorer)
    assert isinstance(scorer.classifiers["instrument"], AdherenceScorer)
    assert not isinstance(object(), AdherenceScorer)
