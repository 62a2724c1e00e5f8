"""Attention repository: per-step, per-layer, per-head SA queries/keys from inversion."""

import json
import logging
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.services.attention import AttentionEvent, AttentionKind, HookSet, SaOverride
from src.services.errors import MusicEditorError
from src.services.sampler import INVERSION_BRANCH, TimestepSchedule
from src.utils.fileio import atomic_write_bytes
from src.utils.hashing import canonical_json

if TYPE_CHECKING:
    from src.services.denoiser import Checkpoint

logger = logging.getLogger(__name__)

MREP_MAGIC = b"MREP"
FORMAT_VERSION = 1


class RepositoryError(MusicEditorError):
    default_stage = "repository"


class DuplicateRecordError(RepositoryError):
    pass


class MissingRecordError(RepositoryError):
    pass


class IncompleteRepositoryError(RepositoryError):
    pass


class BindingMismatchError(RepositoryError):
    pass


@dataclass(frozen=True, order=True)
class RepoKey:
    step_t: int
    layer: int
    head: int

    def as_list(self) -> List[int]:
        return [self.step_t, self.layer, self.head]


@dataclass(frozen=True)
class RepositoryGeometry:
    layers: int
    heads: int
    tokens: int
    head_dim: int

    @property
    def record_shape(self) -> Tuple[int, int]:
        return self.tokens, self.head_dim


@dataclass(frozen=True)
class RepositoryBinding:
    """Hashes that tie a repository to one schedule, codec and model."""

    schedule_hash: str
    codec_id: str
    model_hash: str


class AttentionRepository:
    """Records keyed by (scheduled timestep, 1-based layer, head).

    Writes are single-pass and single-writer; after :meth:`seal` the
    repository is read-only.
    """

    def __init__(self, geometry: RepositoryGeometry, binding: RepositoryBinding, t_start: int,
                 visited_steps: Sequence[int]):
        self.geometry = geometry
        self.binding = binding
        self.t_start = t_start
        self.visited_steps: Tuple[int, ...] = tuple(sorted(visited_steps))
        self._visited = frozenset(self.visited_steps)
        self._records: Dict[RepoKey, Tuple[np.ndarray, np.ndarray]] = {}
        self._layer_cache: Dict[Tuple[int, int], SaOverride] = {}
        self._sealed = False
        self._lock = threading.Lock()

    @classmethod
    def for_checkpoint(cls, checkpoint: "Checkpoint", schedule: TimestepSchedule, t_start: int,
                       visited_steps: Sequence[int]) -> "AttentionRepository":
        config = checkpoint.config
        geometry = RepositoryGeometry(config.layers, config.heads, config.tokens, config.sa_head_dim)
        binding = RepositoryBinding(schedule.schedule_hash, checkpoint.codec.codec_id, checkpoint.model_hash)
        return cls(geometry, binding, t_start, visited_steps)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: RepoKey) -> bool:
        return key in self._records

    @property
    def sealed(self) -> bool:
        return self._sealed

    def keys(self) -> List[RepoKey]:
        return sorted(self._records)

    def expected_keys(self) -> List[RepoKey]:
        return [RepoKey(step, layer, head) for step in self.visited_steps
                for layer in range(1, self.geometry.layers + 1) for head in range(self.geometry.heads)]

    def _check_key(self, key: RepoKey) -> None:
        if not 1 <= key.layer <= self.geometry.layers:
            raise RepositoryError(f"layer {key.layer} outside [1, {self.geometry.layers}]", context=asdict(key))
        if not 0 <= key.head < self.geometry.heads:
            raise RepositoryError(f"head {key.head} outside [0, {self.geometry.heads})", context=asdict(key))
        if key.step_t not in self._visited:
            raise RepositoryError(f"step {key.step_t} is not a visited step of this repository",
                                  context={**asdict(key), 'visited_steps': list(self.visited_steps)})

    def put(self, key: RepoKey, query, key_matrix) -> None:
        """Store one head's Q and K.

        Raises:
            DuplicateRecordError: If ``key`` is already present
            RepositoryError: Shape mismatch, key outside the geometry, or a sealed repository
        """
        if self._sealed:
            raise RepositoryError("repository is sealed", context=asdict(key))
        self._check_key(key)
        arrays = []
        for name, matrix in (("query", query), ("key", key_matrix)):
            if isinstance(matrix, torch.Tensor):
                matrix = matrix.detach().cpu().numpy()
            array = np.array(matrix, dtype=np.float32)
            if array.shape != self.geometry.record_shape:
                raise RepositoryError(f"{name} shape {array.shape} does not match expected "
                                      f"{self.geometry.record_shape}",
                                      context={**asdict(key), 'expected': list(self.geometry.record_shape),
                                               'actual': list(array.shape)})
            array.setflags(write=False)
            arrays.append(array)
        with self._lock:
            if key in self._records:
                raise DuplicateRecordError(f"record for step {key.step_t} layer {key.layer} head {key.head} "
                                           f"already stored", context=asdict(key))
            self._records[key] = (arrays[0], arrays[1])

    def get(self, key: RepoKey) -> SaOverride:
        """Stored Q/K of one head with provenance.

        Raises:
            MissingRecordError: Naming the step, layer and head
        """
        try:
            query, key_matrix = self._records[key]
        except KeyError:
            raise MissingRecordError(f"no record for step {key.step_t} layer {key.layer} head {key.head}; "
                                     f"the edit schedule may not match the capture schedule",
                                     context=asdict(key))
        return SaOverride(torch.from_numpy(query.copy()), torch.from_numpy(key_matrix.copy()),
                          step=key.step_t, layer=key.layer, head=key.head)

    def layer_override(self, step: int, layer: int) -> SaOverride:
        """All heads of one (step, layer) stacked into H x N x head_dim."""
        cached = self._layer_cache.get((step, layer))
        if cached is not None:
            return cached
        heads = [self.get(RepoKey(step, layer, head)) for head in range(self.geometry.heads)]
        override = SaOverride(torch.stack([h.query for h in heads]), torch.stack([h.key for h in heads]),
                              step=step, layer=layer)
        if self._sealed:
            self._layer_cache[(step, layer)] = override
        return override

    def delete(self, key: RepoKey) -> None:
        if self._sealed:
            raise RepositoryError("repository is sealed", context=asdict(key))
        with self._lock:
            if self._records.pop(key, None) is None:
                raise MissingRecordError(f"no record for step {key.step_t} layer {key.layer} head {key.head}",
                                         context=asdict(key))

    def missing_keys(self) -> List[RepoKey]:
        return [key for key in self.expected_keys() if key not in self._records]

    def check_complete(self) -> None:
        """Raise IncompleteRepositoryError listing missing keys (first 20 in context)."""
        missing = self.missing_keys()
        if missing:
            raise IncompleteRepositoryError(
                f"repository is missing {len(missing)} records, first: step {missing[0].step_t} "
                f"layer {missing[0].layer} head {missing[0].head}",
                context={'missing_count': len(missing), 'missing': [k.as_list() for k in missing[:20]]})

    def seal(self) -> "AttentionRepository":
        self.check_complete()
        self._sealed = True
        logger.debug("Repository sealed", extra={'records': len(self), 'record_bytes': self.record_bytes()})
        return self

    def record_bytes(self) -> int:
        return sum(query.nbytes + key.nbytes for query, key in self._records.values())

    def manifest(self) -> Dict:
        return {
            'format_version': FORMAT_VERSION,
            'schedule_hash': self.binding.schedule_hash,
            'codec_id': self.binding.codec_id,
            'model_hash': self.binding.model_hash,
            't_start': self.t_start,
            'visited_steps': list(self.visited_steps),
            'geometry': asdict(self.geometry),
            'keys': [key.as_list() for key in self.keys()],
        }

    def memory_footprint(self) -> int:
        """Record bytes plus the serialized index."""
        return self.record_bytes() + len(canonical_json(self.manifest()))

    def installed_on(self, hooks: HookSet, layers: Iterable[int]) -> HookSet:
        """Install SA override suppliers for ``layers``; steps without a record pass through."""
        for layer in layers:
            if not 1 <= layer <= self.geometry.layers:
                raise RepositoryError(f"layer {layer} outside [1, {self.geometry.layers}]", context={'layer': layer})
            hooks.set_sa_override(layer, self._supplier(layer))
        return hooks

    def _supplier(self, layer: int):
        def supply(timestep: Optional[int]) -> Optional[SaOverride]:
            if timestep is None or timestep not in self._visited:
                return None
            return self.layer_override(timestep, layer)
        return supply

    def save(self, path: Union[str, Path]) -> Path:
        """Write MREP: magic, u32 version, u32 manifest length, JSON manifest, Q then K per key.

        Raises:
            IncompleteRepositoryError: If any expected record is missing
        """
        self.check_complete()
        manifest = canonical_json(self.manifest())
        body = b"".join(np.ascontiguousarray(self._records[key][i], dtype='<f4').tobytes()
                        for key in self.keys() for i in (0, 1))
        target = atomic_write_bytes(path, MREP_MAGIC + struct.pack('<II', FORMAT_VERSION, len(manifest))
                                    + manifest + body)
        logger.info("Attention repository saved", extra={'path': str(target), 'records': len(self),
                                                         'file_size': target.stat().st_size})
        return target

    @classmethod
    def load(cls, path: Union[str, Path], expected_binding: Optional[RepositoryBinding] = None,
             mmap: bool = False) -> "AttentionRepository":
        """Read an MREP file, optionally memory-mapped, and seal it.

        Raises:
            BindingMismatchError: Naming the first hash that differs from ``expected_binding``
            RepositoryError: Bad magic, version or truncation
        """
        path = Path(path)
        with open(path, 'rb') as f:
            prefix = f.read(12)
            if len(prefix) < 12 or prefix[:4] != MREP_MAGIC:
                raise RepositoryError(f"{path} is not an MREP file", context={'path': str(path)})
            version, manifest_len = struct.unpack('<II', prefix[4:12])
            if version != FORMAT_VERSION:
                raise RepositoryError(f"repository format version {version} is not supported",
                                      context={'expected': FORMAT_VERSION, 'actual': version})
            try:
                manifest = json.loads(f.read(manifest_len).decode('utf-8'))
            except (ValueError, UnicodeDecodeError) as e:
                raise RepositoryError(f"Invalid MREP manifest in {path}: {e}", context={'path': str(path)})
        binding = RepositoryBinding(manifest['schedule_hash'], manifest['codec_id'], manifest['model_hash'])
        if expected_binding is not None:
            for name in ('model_hash', 'codec_id', 'schedule_hash'):
                expected, actual = getattr(expected_binding, name), getattr(binding, name)
                if expected != actual:
                    raise BindingMismatchError(f"repository {name} {actual} does not match {expected}",
                                               context={'field': name, 'expected': expected, 'actual': actual})
        geometry = RepositoryGeometry(**manifest['geometry'])
        repo = cls(geometry, binding, manifest['t_start'], manifest['visited_steps'])
        keys = [RepoKey(*entry) for entry in manifest['keys']]
        offset = 12 + manifest_len
        count = len(keys) * 2 * geometry.tokens * geometry.head_dim
        if path.stat().st_size < offset + count * 4:
            raise RepositoryError(f"repository {path} is truncated",
                                  context={'expected_bytes': offset + count * 4, 'actual_bytes': path.stat().st_size})
        shape = (len(keys), 2, geometry.tokens, geometry.head_dim)
        if mmap:
            blocks = np.memmap(path, dtype='<f4', mode='r', offset=offset, shape=shape)
        else:
            blocks = np.fromfile(path, dtype='<f4', count=count, offset=offset).reshape(shape)
        for index, key in enumerate(keys):
            repo.put(key, blocks[index, 0], blocks[index, 1])
        return repo.seal()


class RepositoryRecorder:
    """Capture sink that stores SA events of the inversion pass, one record per head."""

    def __init__(self, repository: AttentionRepository):
        self.repository = repository

    def __call__(self, event: AttentionEvent) -> None:
        if event.kind != AttentionKind.SA or event.timestep is None:
            return
        query = event.query[0] if event.query.dim() == 4 else event.query
        key = event.key[0] if event.key.dim() == 4 else event.key
        for head in range(query.shape[0]):
            self.repository.put(RepoKey(event.timestep, event.layer, head), query[head], key[head])

    def attach(self, hooks: HookSet) -> HookSet:
        hooks.add_sink(self, kinds=[AttentionKind.SA], branches=[INVERSION_BRANCH])
        return hooks
