import struct

import numpy as np
import pytest

from src.services.attention import HookSet
from src.services.editor import capture
from src.services.repository import (MREP_MAGIC, AttentionRepository, BindingMismatchError, DuplicateRecordError,
                                     IncompleteRepositoryError, MissingRecordError, RepoKey, RepositoryBinding,
                                     RepositoryError, RepositoryGeometry)
from src.utils.hashing import canonical_json

BINDING = RepositoryBinding(schedule_hash="s" * 16, codec_id="c" * 16, model_hash="m" * 16)


def _filled(geometry: RepositoryGeometry, steps, seed: int = 0) -> AttentionRepository:
    repository = AttentionRepository(geometry, BINDING, t_start=max(steps) + 1, visited_steps=steps)
    rng = np.random.default_rng(seed)
    for key in repository.expected_keys():
        repository.put(key, rng.standard_normal(geometry.record_shape), rng.standard_normal(geometry.record_shape))
    return repository


def _write_raw(repository: AttentionRepository, path) -> None:
    """Serialize whatever records are present, bypassing the completeness check on save."""
    manifest = canonical_json(repository.manifest())
    body = b"".join(np.ascontiguousarray(array, dtype='<f4').tobytes()
                    for key in repository.keys()
                    for array in (repository.get(key).query.numpy(), repository.get(key).key.numpy()))
    path.write_bytes(MREP_MAGIC + struct.pack('<II', 1, len(manifest)) + manifest + body)


def test_capture_records_every_visited_step_layer_and_head(tiny_checkpoint, tiny_source, tiny_edit_config):
    result = capture(tiny_checkpoint, tiny_source, tiny_edit_config)
    repository = result.repository
    config = tiny_checkpoint.config

    assert repository.sealed
    assert repository.visited_steps == (10, 20, 30, 40, 50, 60)
    assert len(repository) == 6 * config.layers * config.heads
    assert repository.missing_keys() == []
    record = repository.get(RepoKey(30, 2, 1))
    assert tuple(record.query.shape) == (config.tokens, config.sa_head_dim)
    assert repository.binding.model_hash == tiny_checkpoint.model_hash
    assert repository.binding.codec_id == tiny_checkpoint.codec.codec_id


def test_saved_repository_loads_byte_exact(tmp_path, tiny_checkpoint, tiny_source, tiny_edit_config):
    repository = capture(tiny_checkpoint, tiny_source, tiny_edit_config).repository
    path = repository.save(tmp_path / "capture.mrep")

    for mmap in (False, True):
        loaded = AttentionRepository.load(path, expected_binding=repository.binding, mmap=mmap)
        assert loaded.keys() == repository.keys()
        assert loaded.t_start == repository.t_start
        for key in repository.keys():
            assert np.array_equal(loaded.get(key).query.numpy(), repository.get(key).query.numpy())
            assert np.array_equal(loaded.get(key).key.numpy(), repository.get(key).key.numpy())


def test_binding_mismatch_names_the_field(tmp_path):
    path = _filled(RepositoryGeometry(2, 2, 4, 3), [0, 10]).save(tmp_path / "r.mrep")
    other = RepositoryBinding(schedule_hash=BINDING.schedule_hash, codec_id="x" * 16, model_hash=BINDING.model_hash)

    with pytest.raises(BindingMismatchError) as exc_info:
        AttentionRepository.load(path, expected_binding=other)
    assert exc_info.value.context['field'] == "codec_id"


def test_missing_record_blocks_save_and_load(tmp_path):
    repository = _filled(RepositoryGeometry(2, 2, 4, 3), [0, 10])
    repository.delete(RepoKey(10, 2, 1))

    with pytest.raises(IncompleteRepositoryError) as exc_info:
        repository.save(tmp_path / "r.mrep")
    assert exc_info.value.context['missing'] == [[10, 2, 1]]
    with pytest.raises(IncompleteRepositoryError):
        repository.seal()

    path = tmp_path / "partial.mrep"
    _write_raw(repository, path)
    with pytest.raises(IncompleteRepositoryError):
        AttentionRepository.load(path)


def test_duplicate_and_out_of_range_records_are_rejected():
    geometry = RepositoryGeometry(2, 2, 4, 3)
    repository = _filled(geometry, [0, 10])
    with pytest.raises(DuplicateRecordError):
        repository.put(RepoKey(0, 1, 0), np.zeros((4, 3)), np.zeros((4, 3)))

    empty = AttentionRepository(geometry, BINDING, t_start=20, visited_steps=[0, 10])
    with pytest.raises(RepositoryError):
        empty.put(RepoKey(5, 1, 0), np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(RepositoryError):
        empty.put(RepoKey(0, 3, 0), np.zeros((4, 3)), np.zeros((4, 3)))
    with pytest.raises(RepositoryError):
        empty.put(RepoKey(0, 1, 0), np.zeros((4, 2)), np.zeros((4, 3)))
    with pytest.raises(MissingRecordError):
        empty.get(RepoKey(0, 1, 0))


def test_sealed_repository_is_read_only():
    repository = _filled(RepositoryGeometry(1, 1, 2, 2), [0]).seal()

    with pytest.raises(RepositoryError):
        repository.put(RepoKey(0, 1, 0), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(RepositoryError):
        repository.delete(RepoKey(0, 1, 0))


def test_footprint_of_a_full_size_capture():
    geometry = RepositoryGeometry(layers=16, heads=4, tokens=64, head_dim=16)
    repository = _filled(geometry, list(range(0, 1000, 20)))

    assert repository.record_bytes() == 50 * 16 * 4 * 2 * 64 * 16 * 4 == 26_214_400
    assert repository.memory_footprint() == 26_214_400 + len(canonical_json(repository.manifest()))


def test_footprint_grows_linearly_with_visited_steps():
    geometry = RepositoryGeometry(layers=2, heads=2, tokens=8, head_dim=4)
    ten = _filled(geometry, list(range(0, 100, 10)))
    twenty = _filled(geometry, list(range(0, 200, 10)))

    assert twenty.record_bytes() == 2 * ten.record_bytes()


def test_layer_override_stacks_heads_and_skips_unvisited_steps():
    repository = _filled(RepositoryGeometry(2, 3, 4, 2), [0, 10]).seal()
    hooks = repository.installed_on(HookSet(), [2])

    with hooks.at(10, "cond"):
        override = hooks.sa_override(2)
    assert tuple(override.query.shape) == (3, 4, 2)
    assert np.array_equal(override.key[1].numpy(), repository.get(RepoKey(10, 2, 1)).key.numpy())
    with hooks.at(20, "cond"):
        assert hooks.sa_override(2) is None
    with pytest.raises(RepositoryError):
        repository.installed_on(HookSet(), [3])
