import json

import numpy as np
import pytest

from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from src.models.config import SpectraConfig
from src.models.reports import EditRecord, RunConfig
from src.services.spectra import MelSpectrogram, SpectrogramMeta, load_spectrogram, save_spectrogram
from src.utils.fileio import decode_pgm


@pytest.fixture(autouse=True)
def cli_env(monkeypatch, tmp_path, config_dir):
    monkeypatch.setenv("APP_CONFIG_DIR", str(config_dir))
    monkeypatch.setenv("APP_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("APP_WORK_DIR", str(tmp_path / "work"))
    monkeypatch.delenv("MUSIC_EDITOR_MODEL", raising=False)
    monkeypatch.delenv("LOG_LEVEL", raising=False)


def _snapshot(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_render_zeros_gives_a_black_image_and_replays(tmp_path):
    spec = MelSpectrogram(np.zeros((32, 16)), SpectrogramMeta.from_config(SpectraConfig(frames=32, bins=16)))
    source = save_spectrogram(spec, tmp_path / "zeros.mspc")
    out = tmp_path / "zeros.pgm"

    assert main(["render", "--in", str(source), "--out", str(out)]) == EXIT_OK

    image = decode_pgm(out.read_bytes())
    assert image.shape == (16, 32)
    assert not image.any()
    echo = RunConfig.model_validate_json((tmp_path / "zeros.pgm.run.json").read_bytes())
    assert echo.command == "render"
    assert echo.args['input'] == str(source)

    first = out.read_bytes()
    out.unlink()
    assert main(["replay", str(tmp_path / "zeros.pgm.run.json")]) == EXIT_OK
    assert out.read_bytes() == first


def test_logs_stay_out_of_run_outputs(tmp_path):
    spec = MelSpectrogram(np.ones((32, 16)), SpectrogramMeta.from_config(SpectraConfig(frames=32, bins=16)))
    source = save_spectrogram(spec, tmp_path / "in" / "ones.mspc")

    assert main(["render", "--in", str(source), "--out", str(tmp_path / "out" / "ones.pgm")]) == EXIT_OK

    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["ones.pgm", "ones.pgm.run.json"]
    assert (tmp_path / "logs").is_dir()


def test_missing_input_is_a_runtime_error(tmp_path):
    assert main(["render", "--in", str(tmp_path / "absent.mspc"), "--out", str(tmp_path / "x.pgm")]) == EXIT_RUNTIME


def test_argument_errors_exit_with_usage_code():
    with pytest.raises(SystemExit) as exc_info:
        main(["render"])
    assert exc_info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc_info:
        main(["edit", "--source", "x.mspc", "--prompt", "a solo piano music", "--layers", "9-3", "--out", "o"])
    assert exc_info.value.code == EXIT_USAGE


def test_missing_model_is_a_usage_error(tmp_path):
    assert main(["generate", "--prompt", "a solo piano music", "--out", str(tmp_path / "g")]) == EXIT_USAGE


def test_published_recomputation(tmp_path):
    report = tmp_path / "published.json"

    assert main(["eval", "--published", "--report", str(report)]) == EXIT_OK

    payload = json.loads(report.read_text())
    assert sorted(payload) == ["musicdelta", "prompt_pairs", "zome_bench"]
    assert len(payload["musicdelta"]["cells"]) == 12
    assert (tmp_path / "published.json.run.json").is_file()


def test_eval_without_manifest_or_published_is_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc_info:
        main(["eval", "--report", str(tmp_path / "r.json")])
    assert exc_info.value.code == EXIT_USAGE


def test_synth_replays_bit_identically(tmp_path):
    out = tmp_path / "data"
    args = ["synth", "--out", str(out), "--seed", "3", "--axes", "instrument", "--clips-per-class", "1",
            "--frames", "32", "--bins", "16", "--benchmark"]

    assert main(args) == EXIT_OK
    first = _snapshot(out)
    entries = json.loads((out / "manifest.json").read_text())
    assert (out / "benchmark.json").is_file()
    assert (out / "run_config.json").is_file()
    assert entries

    assert main(["replay", str(out / "run_config.json")]) == EXIT_OK
    assert _snapshot(out) == first


def test_edit_writes_a_result_record_and_replays(tmp_path, tiny_checkpoint_path, tiny_source):
    source = save_spectrogram(tiny_source, tmp_path / "source.mspc")
    out = tmp_path / "edit"
    args = ["edit", "--model", str(tiny_checkpoint_path), "--source", str(source), "--prompt", "a solo violin music",
            "--t-start", "60", "--layers", "2-3", "--cfg", "2", "--steps", "10", "--seed", "0", "--out", str(out),
            "--save-repository", str(tmp_path / "capture.mrep")]

    assert main(args) == EXIT_OK

    record = EditRecord.model_validate_json((out / "result.json").read_bytes())
    assert record.t_start_used == 60
    assert record.layers_overridden == [2, 3]
    assert record.visited_steps == 6
    assert record.repository_records == 6 * 3 * 2
    assert record.config['layer_window'] == [2, 3]
    assert set(record.metrics) == {"structure_distance", "chroma_sim", "onset_correlation"}
    edited = load_spectrogram(out / "edited.mspc")
    assert edited.data.shape == tiny_source.data.shape

    first = _snapshot(out)
    assert main(["replay", str(out / "run_config.json")]) == EXIT_OK
    assert _snapshot(out) == first


def test_edit_with_a_saved_repository(tmp_path, tiny_checkpoint_path, tiny_source):
    source = save_spectrogram(tiny_source, tmp_path / "source.mspc")
    common = ["--model", str(tiny_checkpoint_path), "--source", str(source), "--prompt", "a solo violin music",
              "--t-start", "60", "--layers", "2-3", "--cfg", "2", "--steps", "10", "--no-reconstruction"]
    repository = tmp_path / "capture.mrep"

    assert main(["edit", *common, "--out", str(tmp_path / "a"), "--save-repository", str(repository)]) == EXIT_OK
    assert main(["edit", *common, "--out", str(tmp_path / "b"), "--repository", str(repository)]) == EXIT_OK

    assert (tmp_path / "a" / "edited.mspc").read_bytes() == (tmp_path / "b" / "edited.mspc").read_bytes()
    assert not (tmp_path / "b" / "reconstruction.mspc").exists()


def test_layer_window_beyond_the_model_fails(tmp_path, tiny_checkpoint_path, tiny_source):
    source = save_spectrogram(tiny_source, tmp_path / "source.mspc")

    code = main(["edit", "--model", str(tiny_checkpoint_path), "--source", str(source),
                 "--prompt", "a solo violin music", "--layers", "8-14", "--t-start", "60", "--steps", "10",
                 "--out", str(tmp_path / "edit")])

    assert code == EXIT_RUNTIME
    assert not (tmp_path / "edit" / "result.json").exists()


def test_model_from_environment(monkeypatch, tmp_path, tiny_checkpoint_path):
    monkeypatch.setenv("MUSIC_EDITOR_MODEL", str(tiny_checkpoint_path))
    out = tmp_path / "gen"

    assert main(["generate", "--prompt", "a solo piano music", "--steps", "10", "--cfg", "1", "--out", str(out)]) \
        == EXIT_OK

    echo = RunConfig.model_validate_json((out / "run_config.json").read_bytes())
    assert echo.args['model'] == str(tiny_checkpoint_path)
    assert load_spectrogram(out / "generated.mspc").data.shape == (32, 16)
