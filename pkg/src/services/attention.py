"""Cross/self-attention primitives with map capture and self-attention overrides.

Layer indices are 1-based throughout: layer 1 is the block nearest the input.
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple

import torch
from torch import nn

from src.services.errors import MusicEditorError

logger = logging.getLogger(__name__)


class AttentionError(MusicEditorError):
    default_stage = "attention"


class AttentionKind(str, Enum):
    SA = "SA"
    CA = "CA"


@dataclass(frozen=True)
class AttentionCapture:
    """What an attention primitive hands to its sink: per-head Q, K and the map."""

    query: torch.Tensor
    key: torch.Tensor
    attention_map: torch.Tensor


@dataclass(frozen=True)
class AttentionEvent:
    """A captured attention evaluation with its position in the sampling loop."""

    layer: int
    kind: AttentionKind
    timestep: Optional[int]
    branch: str
    query: torch.Tensor
    key: torch.Tensor
    attention_map: torch.Tensor


@dataclass(frozen=True)
class SaOverride:
    """Stored self-attention queries/keys with provenance.

    A layer override holds all heads (H x N x head_dim); a single repository
    record holds one head (N x head_dim) and sets ``head``.
    """

    query: torch.Tensor
    key: torch.Tensor
    step: int
    layer: int
    head: Optional[int] = None


@dataclass(frozen=True)
class CaOverride:
    """A replacement cross-attention map (H x N x M) with provenance."""

    attention_map: torch.Tensor
    step: int
    layer: int


AttentionSink = Callable[[AttentionCapture], None]
OverrideSupplier = Callable[[Optional[int]], Optional[object]]


class AttentionParams(nn.Module):
    """Q/K/V projections of one attention layer."""

    def __init__(self, query_dim: int, context_dim: int, inner_dim: int, heads: int):
        super().__init__()
        if inner_dim % heads:
            raise AttentionError(f"inner dim {inner_dim} is not divisible by {heads} heads",
                                 context={'inner_dim': inner_dim, 'heads': heads})
        self.query_dim = query_dim
        self.context_dim = context_dim
        self.inner_dim = inner_dim
        self.heads = heads
        self.head_dim = inner_dim // heads
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.heads, self.head_dim).transpose(1, 2)

    def merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, _, length, _ = x.shape
        return x.transpose(1, 2).reshape(batch, length, self.inner_dim)


def scaled_softmax_map(query: torch.Tensor, key: torch.Tensor, scale_dim: int) -> torch.Tensor:
    """Row-stochastic ``Softmax(Q K^T / sqrt(scale_dim))`` with explicit row-max subtraction.

    Raises:
        AttentionError: Mismatched inner dims, non-positive ``scale_dim`` or non-finite logits
    """
    if scale_dim <= 0:
        raise AttentionError(f"scale_dim must be positive, got {scale_dim}")
    if query.shape[-1] != key.shape[-1]:
        raise AttentionError(f"query dim {query.shape[-1]} != key dim {key.shape[-1]}",
                             context={'query': list(query.shape), 'key': list(key.shape)})
    logits = query @ key.transpose(-1, -2) / math.sqrt(scale_dim)
    if not torch.isfinite(logits).all():
        raise AttentionError("attention logits are not finite")
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.exp(logits)
    return weights / weights.sum(dim=-1, keepdim=True)


def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise AttentionError(f"expected a 2-D or 3-D token tensor, got shape {tuple(x.shape)}")


def _check_width(x: torch.Tensor, expected: int, name: str) -> None:
    if x.shape[-1] != expected:
        raise AttentionError(f"{name} width {x.shape[-1]} does not match layer width {expected}",
                             context={'tensor': name, 'expected': expected, 'actual': x.shape[-1]})


def cross_attention(phi: torch.Tensor, tau: torch.Tensor, params: AttentionParams,
                    sink: Optional[AttentionSink] = None,
                    override: Optional[CaOverride] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Latent tokens attend to prompt rows.

    Args:
        phi: (B, N, d_eps) or (N, d_eps) latent tokens
        tau: (B, M, d_tau) or (M, d_tau) prompt rows
        params: Layer projections
        sink: Receives the per-head Q, K and map
        override: Replacement map, used only by the map-replacement harness

    Returns:
        (output with width params.inner_dim, per-head map of shape (..., H, N, M))
    """
    phi_b, unbatched = _batched(phi)
    tau_b, _ = _batched(tau)
    if tau_b.shape[0] != phi_b.shape[0]:
        tau_b = tau_b.expand(phi_b.shape[0], -1, -1)
    _check_width(phi_b, params.query_dim, "phi")
    _check_width(tau_b, params.context_dim, "tau")

    query = params.split_heads(params.to_q(phi_b))
    key = params.split_heads(params.to_k(tau_b))
    value = params.split_heads(params.to_v(tau_b))
    attention_map = scaled_softmax_map(query, key, params.head_dim)
    if override is not None:
        replacement = override.attention_map.to(attention_map.dtype)
        if tuple(replacement.shape) != tuple(attention_map.shape[1:]):
            raise AttentionError(f"CA override shape {tuple(replacement.shape)} does not match layer map "
                                 f"{tuple(attention_map.shape[1:])}",
                                 context={'layer': override.layer, 'step': override.step})
        attention_map = replacement.unsqueeze(0).expand_as(attention_map)
    if sink is not None:
        sink(AttentionCapture(query.detach(), key.detach(), attention_map.detach()))
    output = params.merge_heads(attention_map @ value)
    if unbatched:
        return output[0], attention_map[0]
    return output, attention_map


def self_attention(phi: torch.Tensor, params: AttentionParams, override: Optional[SaOverride] = None,
                   sink: Optional[AttentionSink] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Latent tokens attend to each other.

    With an override, the map is rebuilt from the stored queries/keys while
    values are still projected from the current ``phi``.

    Args:
        phi: (B, N, d_eps) or (N, d_eps) latent tokens
        params: Layer projections
        override: Stored Q/K (H x N x head_dim), broadcast over the batch
        sink: Receives the per-head Q, K and map

    Returns:
        (output with width params.inner_dim, per-head map of shape (..., H, N, N))

    Raises:
        AttentionError: If the override geometry does not match the layer
    """
    phi_b, unbatched = _batched(phi)
    _check_width(phi_b, params.query_dim, "phi")
    batch, tokens, _ = phi_b.shape
    value = params.split_heads(params.to_v(phi_b))
    if override is None:
        query = params.split_heads(params.to_q(phi_b))
        key = params.split_heads(params.to_k(phi_b))
    else:
        expected = (params.heads, tokens, params.head_dim)
        for name, stored in (("query", override.query), ("key", override.key)):
            if tuple(stored.shape) != expected:
                raise AttentionError(f"SA override {name} shape {tuple(stored.shape)} does not match layer "
                                     f"geometry {expected}",
                                     context={'layer': override.layer, 'step': override.step,
                                              'expected': list(expected), 'actual': list(stored.shape)})
        query = override.query.to(phi_b.dtype).unsqueeze(0).expand(batch, -1, -1, -1)
        key = override.key.to(phi_b.dtype).unsqueeze(0).expand(batch, -1, -1, -1)
    attention_map = scaled_softmax_map(query, key, params.head_dim)
    if sink is not None:
        sink(AttentionCapture(query.detach(), key.detach(), attention_map.detach()))
    output = params.merge_heads(attention_map @ value)
    if unbatched:
        return output[0], attention_map[0]
    return output, attention_map


class HookSet:
    """Capture sinks and override suppliers consulted by every denoiser block.

    The sampler sets ``timestep`` and ``branch`` before each model call; the
    blocks pull overrides and push events through this object.
    """

    def __init__(self):
        self._sinks: List[Tuple[Callable[[AttentionEvent], None], Optional[FrozenSet[int]],
                                Optional[FrozenSet[AttentionKind]], Optional[FrozenSet[str]]]] = []
        self._sa_suppliers: Dict[int, OverrideSupplier] = {}
        self._ca_suppliers: Dict[int, OverrideSupplier] = {}
        self._lock = threading.Lock()
        self.timestep: Optional[int] = None
        self.branch: str = "cond"
        self.override_log: List[Tuple[Optional[int], int, str, str]] = []

    def add_sink(self, sink: Callable[[AttentionEvent], None], layers: Optional[Iterable[int]] = None,
                 kinds: Optional[Iterable[AttentionKind]] = None,
                 branches: Optional[Iterable[str]] = None) -> None:
        """Register ``sink``; the filters restrict which events it sees."""
        self._sinks.append((sink,
                            frozenset(layers) if layers is not None else None,
                            frozenset(AttentionKind(k) for k in kinds) if kinds is not None else None,
                            frozenset(branches) if branches is not None else None))

    def set_sa_override(self, layer: int, supplier: Callable[[Optional[int]], Optional[SaOverride]]) -> None:
        """Install the single SA override supplier of ``layer``.

        Raises:
            AttentionError: If ``layer`` already has one
        """
        if layer in self._sa_suppliers:
            raise AttentionError(f"layer {layer} already has an SA override supplier", context={'layer': layer})
        self._sa_suppliers[layer] = supplier

    def set_ca_override(self, layer: int, supplier: Callable[[Optional[int]], Optional[CaOverride]]) -> None:
        if layer in self._ca_suppliers:
            raise AttentionError(f"layer {layer} already has a CA override supplier", context={'layer': layer})
        self._ca_suppliers[layer] = supplier

    def clear_overrides(self) -> None:
        self._sa_suppliers.clear()
        self._ca_suppliers.clear()

    @property
    def override_layers(self) -> List[int]:
        return sorted(set(self._sa_suppliers) | set(self._ca_suppliers))

    def _pull(self, suppliers: Dict[int, OverrideSupplier], layer: int, kind: str):
        supplier = suppliers.get(layer)
        if supplier is None:
            return None
        override = supplier(self.timestep)
        if override is not None:
            with self._lock:
                self.override_log.append((self.timestep, layer, kind, self.branch))
        return override

    def sa_override(self, layer: int) -> Optional[SaOverride]:
        return self._pull(self._sa_suppliers, layer, AttentionKind.SA.value)

    def ca_override(self, layer: int) -> Optional[CaOverride]:
        return self._pull(self._ca_suppliers, layer, AttentionKind.CA.value)

    def sink_for(self, layer: int, kind: AttentionKind) -> Optional[AttentionSink]:
        """A primitive-level sink that wraps captures into events, or None if nobody listens."""
        listeners = [sink for sink, layers, kinds, branches in self._sinks
                     if (layers is None or layer in layers)
                     and (kinds is None or kind in kinds)
                     and (branches is None or self.branch in branches)]
        if not listeners:
            return None
        timestep, branch = self.timestep, self.branch

        def emit(capture: AttentionCapture) -> None:
            event = AttentionEvent(layer=layer, kind=kind, timestep=timestep, branch=branch,
                                   query=capture.query, key=capture.key,
                                   attention_map=capture.attention_map)
            for listener in listeners:
                listener(event)

        return emit

    @contextmanager
    def at(self, timestep: Optional[int], branch: str = "cond") -> Iterator["HookSet"]:
        """Set the loop position for the enclosed model call."""
        previous = (self.timestep, self.branch)
        self.timestep, self.branch = timestep, branch
        try:
            yield self
        finally:
            self.timestep, self.branch = previous
