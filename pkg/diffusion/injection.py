"""Plug-and-play feature recording and replacement.

The source branch records conv features and spatial/temporal attention
queries and keys at planned decoder sites; the edit branch replaces its own
values with them during the first ``round(tau * T)`` sampling steps. Values
are never replaced, so attention scores come from source Q/K while the mixed
content stays the edit branch's own.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np

from cache import FeatureCache
from config import L1_LAYERS, L2_LAYERS, L3_LAYERS, SAMPLING_STEPS, TAU_CONV, TAU_SA, TAU_TA
from diffusion.tensor_core import Tensor
from diffusion.unet import FeatureKind
from utils.errors import PlanError

logger = logging.getLogger(__name__)

CONV_KINDS = (FeatureKind.CONV,)
SPATIAL_KINDS = (FeatureKind.SPATIAL_Q, FeatureKind.SPATIAL_K)
TEMPORAL_KINDS = (FeatureKind.TEMPORAL_Q, FeatureKind.TEMPORAL_K)


def _kind(kind) -> FeatureKind:
    try:
        return FeatureKind(kind)
    except ValueError:
        raise PlanError(f"unknown feature kind {kind!r}", key=str(kind))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class InjectionPlan:
    """Layer sets and step thresholds for the three injection kinds."""
    l1: FrozenSet[int] = frozenset(L1_LAYERS)
    l2: FrozenSet[int] = frozenset(L2_LAYERS)
    l3: FrozenSet[int] = frozenset(L3_LAYERS)
    tau_conv: float = TAU_CONV
    tau_sa: float = TAU_SA
    tau_ta: float = TAU_TA
    T: int = SAMPLING_STEPS

    def __post_init__(self):
        for name in ("l1", "l2", "l3"):
            layers = frozenset(int(i) for i in getattr(self, name))
            if any(i < 0 for i in layers):
                raise PlanError(f"{name} has a negative layer index", key=name)
            object.__setattr__(self, name, layers)
        for name in ("tau_conv", "tau_sa", "tau_ta"):
            tau = getattr(self, name)
            if not 0.0 <= tau <= 1.0:
                raise PlanError(f"{name}={tau} outside [0, 1]", key=name)
        if self.T < 1:
            raise PlanError("T must be >= 1", key="steps")

    def validate_for(self, decoder_layer_count: int) -> "InjectionPlan":
        for name in ("l1", "l2", "l3"):
            bad = sorted(i for i in getattr(self, name) if i >= decoder_layer_count)
            if bad:
                raise PlanError(
                    f"{name} layers {bad} exceed the {decoder_layer_count} decoder layers", key=name
                )
        return self

    def layers_for(self, kind) -> FrozenSet[int]:
        kind = _kind(kind)
        if kind in CONV_KINDS:
            return self.l1
        if kind in SPATIAL_KINDS:
            return self.l2
        return self.l3

    def tau_for(self, kind) -> float:
        kind = _kind(kind)
        if kind in CONV_KINDS:
            return self.tau_conv
        if kind in SPATIAL_KINDS:
            return self.tau_sa
        return self.tau_ta

    def active_steps(self, kind) -> int:
        """Number of leading sampling steps in which ``kind`` is injected."""
        return round_half_up(self.tau_for(kind) * self.T)

    def with_thresholds(self, **taus: float) -> "InjectionPlan":
        values = dict(tau_conv=self.tau_conv, tau_sa=self.tau_sa, tau_ta=self.tau_ta)
        values.update(taus)
        return InjectionPlan(l1=self.l1, l2=self.l2, l3=self.l3, T=self.T, **values)


def should_inject(plan: InjectionPlan, kind, layer: int, step_index: int) -> bool:
    """True iff ``layer`` is planned for ``kind`` and ``step_index < round(tau_kind * T)``."""
    kind = _kind(kind)
    if not 0 <= step_index < plan.T:
        raise PlanError(f"step_index {step_index} outside [0, {plan.T})", key="step_index")
    return layer in plan.layers_for(kind) and step_index < plan.active_steps(kind)


def expected_entry_count(plan: InjectionPlan) -> int:
    """Closed-form number of cache entries a full recording run produces."""
    return sum(len(plan.layers_for(kind)) * plan.active_steps(kind) for kind in FeatureKind)


def planned_sites(plan: InjectionPlan, step_index: int) -> List[Tuple[int, FeatureKind]]:
    return [
        (layer, kind)
        for kind in FeatureKind
        for layer in sorted(plan.layers_for(kind))
        if should_inject(plan, kind, layer, step_index)
    ]


def remap_layers(layers: Iterable[int], from_count: int, to_count: int) -> FrozenSet[int]:
    """Proportional index remap between decoder layouts: floor(i * to / from)."""
    return frozenset(i * to_count // from_count for i in layers)


def record(cache: FeatureCache, step_index: int, layer: int, kind, value: Tensor) -> None:
    cache.store(step_index, layer, _kind(kind), value)


def inject(cache: FeatureCache, step_index: int, layer: int, kind) -> Tensor:
    return cache.get(step_index, layer, _kind(kind))


class RecordHooks:
    """Source-branch hooks: store planned sites, pass every value through."""

    def __init__(self, plan: InjectionPlan, cache: FeatureCache, step_index: int):
        self.plan = plan
        self.cache = cache
        self.step_index = step_index

    def __call__(self, layer: int, kind: FeatureKind, value: Tensor) -> Tensor:
        if should_inject(self.plan, kind, layer, self.step_index):
            record(self.cache, self.step_index, layer, kind, value)
        return value


@dataclass
class SiteCheck:
    """One replaced site. ``replaced_equals_cached`` is set once the network
    reports the tensor it actually consumed there; until then it is False."""
    branch: str
    step_index: int
    layer: int
    kind: FeatureKind
    replaced_equals_cached: bool
    local_equals_cached: bool


@dataclass
class InjectionMonitor:
    """Instrumentation: one check per replaced site."""
    checks: List[SiteCheck] = field(default_factory=list)

    def observe(self, branch: str, step_index: int, layer: int, kind: FeatureKind,
                local: Tensor, cached: Tensor) -> int:
        """Open a check for a replaced site and return its index."""
        self.checks.append(SiteCheck(
            branch=branch,
            step_index=step_index,
            layer=layer,
            kind=kind,
            replaced_equals_cached=False,
            local_equals_cached=bool(np.array_equal(local, cached)),
        ))
        return len(self.checks) - 1

    def confirm(self, index: int, consumed_equals_cached: bool) -> None:
        self.checks[index].replaced_equals_cached = consumed_equals_cached

    def count(self, branch: Optional[str] = None) -> int:
        return sum(1 for c in self.checks if branch is None or c.branch == branch)

    def all_replaced_equal(self) -> bool:
        return all(c.replaced_equals_cached for c in self.checks)

    def count_by_branch(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for c in self.checks:
            counts[c.branch] = counts.get(c.branch, 0) + 1
        return counts


class InjectHooks:
    """Edit-branch hooks: replace planned sites with recorded source features."""

    def __init__(self, plan: InjectionPlan, cache: FeatureCache, step_index: int,
                 branch: str = "cond", monitor: Optional[InjectionMonitor] = None):
        self.plan = plan
        self.cache = cache
        self.step_index = step_index
        self.branch = branch
        self.monitor = monitor
        self._pending: Dict[Tuple[int, FeatureKind], Tuple[int, Tensor]] = {}

    def __call__(self, layer: int, kind: FeatureKind, value: Tensor) -> Tensor:
        if not should_inject(self.plan, kind, layer, self.step_index):
            return value
        cached = inject(self.cache, self.step_index, layer, kind)
        if cached.shape != value.shape:
            raise PlanError(
                f"cached {kind.value} at layer {layer} has shape {cached.shape}, edit branch has {value.shape}",
                key=f"layer {layer}",
            )
        if self.monitor is not None:
            index = self.monitor.observe(self.branch, self.step_index, layer, kind, value, cached)
            self._pending[(layer, kind)] = (index, cached)
        return cached

    def consumed(self, layer: int, kind: FeatureKind, value: Tensor) -> None:
        """Called by the network with the tensor it went on to use at a site."""
        pending = self._pending.pop((layer, kind), None)
        if pending is not None:
            index, cached = pending
            self.monitor.confirm(index, bool(np.array_equal(value, cached)))
