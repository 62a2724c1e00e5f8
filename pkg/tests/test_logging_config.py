import json
import logging
import sys

import numpy as np
import pytest

from src.services.errors import MusicEditorError
from src.utils.logging_config import (PerformanceFilter, PipelineFilter, StructuredFormatter, log_pipeline_step,
                                      setup_logging)
from src.utils.performance_monitor import PerformanceMonitor


def _record(message="hello", **extra):
    record = logging.LogRecord("src.services.editor", logging.INFO, __file__, 10, message, None, None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


@pytest.fixture
def restore_logging():
    yield
    setup_logging(log_level="WARNING", enable_file=False)


def test_structured_formatter_emits_json_with_extras():
    payload = json.loads(StructuredFormatter().format(_record(t_start_used=700, layers=[8, 9], shape=object())))

    assert payload['level'] == "INFO"
    assert payload['logger'] == "src.services.editor"
    assert payload['message'] == "hello"
    assert payload['extra']['t_start_used'] == 700
    assert payload['extra']['layers'] == [8, 9]
    assert isinstance(payload['extra']['shape'], str)


def test_structured_formatter_handles_arrays_and_editor_errors():
    try:
        raise MusicEditorError("bad window", stage="edit", context={'layers': [8, 9]})
    except MusicEditorError:
        record = _record(score=np.float64(0.25), latent=np.zeros((64, 64)))
        record.exc_info = sys.exc_info()

    payload = json.loads(StructuredFormatter().format(record))

    assert payload['extra']['score'] == 0.25
    assert payload['extra']['latent'] == {'shape': [64, 64], 'dtype': "float64"}
    assert payload['exception']['type'] == "MusicEditorError"
    assert payload['exception']['details']['context'] == {'layers': [8, 9]}


def test_structured_formatter_can_drop_extras():
    payload = json.loads(StructuredFormatter(include_extra_fields=False).format(_record(records=3)))

    assert 'extra' not in payload


def test_filters_route_records():
    assert PerformanceFilter().filter(_record(duration=0.5))
    assert not PerformanceFilter().filter(_record())
    assert PipelineFilter().filter(_record(run_id="edit-1"))
    assert not PipelineFilter().filter(_record(duration=0.5))


def test_file_logging_writes_under_the_log_dir(tmp_path, restore_logging):
    setup_logging(log_level="DEBUG", log_dir=str(tmp_path), enable_console=False)

    log_pipeline_step("run-1", "edit", "capture", "completed", t_start_used=60)
    logging.getLogger("src.services.editor").error("capture failed", extra={'layer': 3})
    for handler in logging.getLogger("src.pipeline").handlers + logging.getLogger("src.services").handlers:
        handler.flush()

    pipeline = [json.loads(line) for line in (tmp_path / "pipeline.log").read_text().splitlines()]
    assert pipeline[-1]['extra']['run_id'] == "run-1"
    assert pipeline[-1]['extra']['t_start_used'] == 60
    errors = (tmp_path / "errors.log").read_text()
    assert "capture failed" in errors


def test_performance_monitor_times_stages():
    monitor = PerformanceMonitor("unit")

    with monitor.stage("capture", layers=2):
        pass
    with monitor.stage("capture"):
        pass
    with monitor.stage("decode"):
        pass

    assert set(monitor.timings) == {"capture", "decode"}
    assert len(monitor.stages()) == 3
    assert monitor.stages()[0].extra == {'layers': 2}
    assert all(value >= 0.0 for value in monitor.timings.values())


def test_performance_monitor_records_failed_stages():
    monitor = PerformanceMonitor("unit")

    with pytest.raises(RuntimeError):
        with monitor.stage("reverse"):
            raise RuntimeError("boom")
    assert "reverse" in monitor.timings


def test_error_context_serializes():
    error = MusicEditorError("bad layer", stage="edit", context={'layer': 9}, original_exception=KeyError("x"))

    payload = error.to_dict()

    assert payload['error_type'] == "MusicEditorError"
    assert payload['stage'] == "edit"
    assert payload['context'] == {'layer': 9}
    assert payload['original_exception'] == "'x'"
    json.dumps(payload)
