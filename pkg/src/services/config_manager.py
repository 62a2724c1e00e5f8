"""Configuration manager for the attribute registry and pipeline defaults."""

import json
import logging
import threading
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from src.models.config import ATTRIBUTE_AXES, AttributeRegistry, PipelineDefaults
from src.models.reports import PublishedDataset
from src.services.errors import MusicEditorError

logger = logging.getLogger(__name__)


class ConfigurationError(MusicEditorError):
    """Exception raised for configuration-related errors."""

    default_stage = "config"


def _strip_metadata(data: Dict[str, Any]) -> Dict[str, Any]:
    """Drop keys that start with an underscore (comments and metadata)."""
    return {key: value for key, value in data.items() if not key.startswith('_')}


class ConfigManager:
    """Thread-safe loader for ``attributes.json``, ``defaults.json`` and ``published_composites.json``."""

    ATTRIBUTES_FILE = "attributes.json"
    DEFAULTS_FILE = "defaults.json"
    PUBLISHED_FILE = "published_composites.json"

    def __init__(self, config_dir: str = "./config"):
        """Initialize ConfigManager with configuration directory.

        Args:
            config_dir: Path to directory containing configuration files
        """
        self.config_dir = Path(config_dir)
        self._registry: Optional[AttributeRegistry] = None
        self._defaults: Optional[PipelineDefaults] = None
        self._published: Dict[str, PublishedDataset] = {}
        self._config_lock = threading.RLock()
        self._loaded = False

    def load_configurations(self) -> None:
        """Load all configuration files.

        Raises:
            ConfigurationError: If configuration files cannot be loaded or are invalid
        """
        with self._config_lock:
            try:
                registry = self._load_registry()
                defaults = self._load_defaults()
                published = self._load_published()
            except ConfigurationError as e:
                logger.error(f"Failed to load configuration: {e}", extra={'error_details': e.to_dict()})
                raise
            self._registry, self._defaults, self._published = registry, defaults, published
            self._loaded = True
            logger.info("Configuration loaded successfully", extra={
                'config_dir': str(self.config_dir),
                'classes': {axis: len(registry.classes(axis)) for axis in ATTRIBUTE_AXES},
                'published_datasets': sorted(published),
            })

    def _read_json(self, filename: str, required: bool = True) -> Optional[Dict[str, Any]]:
        path = self.config_dir / filename
        if not path.exists():
            if not required:
                return None
            raise ConfigurationError(f"Configuration file not found: {path}", context={'file': str(path)})
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in {filename}: {e}", context={'file': str(path)})
        except IOError as e:
            raise ConfigurationError(f"Error reading {filename}: {e}", context={'file': str(path)})
        if not isinstance(data, dict):
            raise ConfigurationError(f"{filename} must be a JSON object", context={'file': str(path)})
        return _strip_metadata(data)

    def _load_registry(self) -> AttributeRegistry:
        """Load attribute classes from attributes.json."""
        data = self._read_json(self.ATTRIBUTES_FILE)
        for axis in ATTRIBUTE_AXES:
            section = data.get(axis)
            if section is None:
                raise ConfigurationError(f"{self.ATTRIBUTES_FILE} has no '{axis}' section",
                                         context={'file': self.ATTRIBUTES_FILE, 'key': axis})
            if not isinstance(section, dict):
                raise ConfigurationError(f"'{axis}' section must be a JSON object",
                                         context={'file': self.ATTRIBUTES_FILE, 'key': axis})
            data[axis] = _strip_metadata(section)
            if len(data[axis]) < 2:
                raise ConfigurationError(f"axis '{axis}' needs at least two classes",
                                         context={'file': self.ATTRIBUTES_FILE, 'key': axis})
        try:
            registry = AttributeRegistry(**data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid attribute registry: {e}",
                                     context={'file': self.ATTRIBUTES_FILE}, original_exception=e)
        logger.info(f"Loaded {sum(len(registry.classes(a)) for a in ATTRIBUTE_AXES)} attribute classes")
        return registry

    def _load_defaults(self) -> PipelineDefaults:
        """Load desk-scale defaults; a missing file means built-in defaults."""
        data = self._read_json(self.DEFAULTS_FILE, required=False)
        if data is None:
            logger.warning(f"{self.DEFAULTS_FILE} not found, using built-in defaults")
            return PipelineDefaults()
        sections = {key: _strip_metadata(value) if isinstance(value, dict) else value
                    for key, value in data.items()}
        try:
            return PipelineDefaults(**sections)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid defaults: {e}",
                                     context={'file': self.DEFAULTS_FILE}, original_exception=e)

    def _load_published(self) -> Dict[str, PublishedDataset]:
        data = self._read_json(self.PUBLISHED_FILE, required=False)
        if data is None:
            return {}
        published = {}
        for name, table in data.items():
            try:
                published[name] = PublishedDataset(name=name, **_strip_metadata(table))
            except (ValidationError, TypeError) as e:
                raise ConfigurationError(f"Invalid published table '{name}': {e}",
                                         context={'file': self.PUBLISHED_FILE, 'key': name})
        return published

    def _require_loaded(self) -> None:
        if not self._loaded:
            raise ConfigurationError("Configuration not loaded. Call load_configurations() first.")

    def get_registry(self) -> AttributeRegistry:
        """Get the attribute registry.

        Raises:
            ConfigurationError: If configurations haven't been loaded
        """
        with self._config_lock:
            self._require_loaded()
            return self._registry

    def get_defaults(self) -> PipelineDefaults:
        """Get a copy of the pipeline defaults.

        Raises:
            ConfigurationError: If configurations haven't been loaded
        """
        with self._config_lock:
            self._require_loaded()
            return self._defaults.model_copy(deep=True)

    def get_published(self, dataset: str) -> PublishedDataset:
        with self._config_lock:
            self._require_loaded()
            if dataset not in self._published:
                raise ConfigurationError(f"No published table for dataset '{dataset}'",
                                         context={'available': sorted(self._published)})
            return self._published[dataset]

    def get_all_published(self) -> Dict[str, PublishedDataset]:
        with self._config_lock:
            self._require_loaded()
            return dict(self._published)

    def reload_configurations(self) -> None:
        """Reload all configuration files; the previous state is kept if loading fails."""
        with self._config_lock:
            self.load_configurations()
            logger.info("Configuration reloaded successfully")

    def is_loaded(self) -> bool:
        with self._config_lock:
            return self._loaded
