"""Report and record models written as JSON artifacts by the CLI."""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, model_validator


class RunConfig(BaseModel):
    """Config echo written next to every run's outputs; replaying it re-runs the command."""

    command: str = Field(..., min_length=1)
    args: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    output: str


class EditRecord(BaseModel):
    """Sidecar ``result.json`` of one edit."""

    source: str
    target_prompt: str
    config: Dict[str, Any]
    t_start_used: int
    layers_overridden: List[int]
    visited_steps: int
    repository_records: int
    repository_bytes: int
    model_hash: str
    codec_id: str
    schedule_hash: str
    outputs: Dict[str, str] = Field(default_factory=dict)
    metrics: Optional[Dict[str, float]] = None


class MethodRaw(BaseModel):
    adherence: float
    structure_distance: float
    chroma_sim: float
    fad: Optional[float] = None


class MethodReport(BaseModel):
    name: str
    raw: MethodRaw
    asb: float
    amb: float


class AxisTrace(BaseModel):
    """Cohort statistics of one raw metric axis before normalization."""

    min: float
    max: float
    mean: float
    std: float


class MetricReport(BaseModel):
    """Cohort-relative evaluation report."""

    dataset: str
    methods: List[MethodReport]
    normalization_trace: Dict[str, AxisTrace]


class PublishedDataset(BaseModel):
    """Printed raw columns and composites of one benchmark dataset."""

    name: str
    methods: List[str]
    clap: List[float]
    lpaps: List[float]
    chroma: List[float]
    fad: Optional[List[float]] = None
    asb: List[float]
    amb: List[float]
    known_discrepancies: List[str] = Field(default_factory=list,
                                           description="Methods whose printed composites cannot be recomputed")

    @model_validator(mode='after')
    def validate_lengths(self):
        size = len(self.methods)
        columns = {'clap': self.clap, 'lpaps': self.lpaps, 'chroma': self.chroma, 'asb': self.asb, 'amb': self.amb}
        if self.fad is not None:
            columns['fad'] = self.fad
        for name, column in columns.items():
            if len(column) != size:
                raise ValueError(f"column '{name}' has {len(column)} values for {size} methods")
        return self


class PublishedCell(BaseModel):
    method: str
    metric: str
    printed: float
    recomputed: float
    deviation: float
    tolerance: float
    within_tolerance: bool
    known_discrepancy: bool = False


class PublishedRecomputation(BaseModel):
    dataset: str
    cells: List[PublishedCell]

    @property
    def all_within_tolerance(self) -> bool:
        return all(cell.within_tolerance or cell.known_discrepancy for cell in self.cells)


class ProbeReport(BaseModel):
    """Held-out probe accuracy per (class, layer)."""

    kind: str
    axis: str
    layers: List[int]
    classes: List[str]
    accuracy: Dict[str, Dict[str, float]] = Field(..., description="class -> layer (as string) -> accuracy")
    class_average: Dict[str, float]
    layer_average: Dict[str, float]
    overall_average: float
    highlight_layers: List[int] = Field(default_factory=list)

    def to_text(self) -> str:
        """Aligned text table: one row per class, one column per layer plus the average."""
        highlighted = set(self.highlight_layers)
        headers = [f"L{layer}{'*' if layer in highlighted else ''}" for layer in self.layers] + ["Avg."]
        name_width = max([len("class")] + [len(name) for name in self.classes] + [len("average")])
        col_width = max(6, max(len(h) for h in headers))
        lines = [f"{self.kind} probe accuracy ({self.axis})",
                 "class".ljust(name_width) + "".join(h.rjust(col_width) for h in headers)]
        for name in self.classes:
            cells = [self.accuracy[name][str(layer)] for layer in self.layers] + [self.class_average[name]]
            lines.append(name.ljust(name_width) + "".join(f"{v:.2f}".rjust(col_width) for v in cells))
        averages = [self.layer_average[str(layer)] for layer in self.layers] + [self.overall_average]
        lines.append("average".ljust(name_width) + "".join(f"{v:.2f}".rjust(col_width) for v in averages))
        return "\n".join(lines) + "\n"


class AblationRow(BaseModel):
    window: str
    layers: List[int]
    adherence: float
    structure_distance: float
    chroma_sim: float
    onset_correlation: float
    fad: Optional[float] = None
    asb: float
    amb: float


class AblationTable(BaseModel):
    edit_type: str
    clips: int
    rows: List[AblationRow]

    def row(self, window: str) -> AblationRow:
        for row in self.rows:
            if row.window == window:
                return row
        raise KeyError(window)


class AblationReport(BaseModel):
    """Pooled table first, then one table per edit type."""

    tables: List[AblationTable]

    def table(self, edit_type: str) -> AblationTable:
        for table in self.tables:
            if table.edit_type == edit_type:
                return table
        raise KeyError(edit_type)


class SweepPoint(BaseModel):
    t_start: int
    t_start_used: int
    adherence: float
    structure_distance: float
    onset_correlation: float


class SweepCurve(BaseModel):
    method: str
    layers: List[int]
    points: List[SweepPoint]


class TStartSweepReport(BaseModel):
    curves: List[SweepCurve]

    def curve(self, method: str) -> SweepCurve:
        for curve in self.curves:
            if curve.method == method:
                return curve
        raise KeyError(method)
