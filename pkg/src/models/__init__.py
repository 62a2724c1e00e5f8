# Models module

from .config import AppConfig, AttributeRegistry, DenoiserConfig, EditConfig, PipelineDefaults, ProbeConfig
from .music import ContentSpec, StyleSpec
from .reports import EditRecord, MetricReport, ProbeReport, RunConfig

__all__ = [
    "AppConfig",
    "AttributeRegistry",
    "DenoiserConfig",
    "EditConfig",
    "PipelineDefaults",
    "ProbeConfig",
    "ContentSpec",
    "StyleSpec",
    "EditRecord",
    "MetricReport",
    "ProbeReport",
    "RunConfig"
]
