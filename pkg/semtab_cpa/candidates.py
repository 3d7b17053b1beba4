"""Per-column candidate reduction over the stats dictionaries."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import AbstractSet, Dict, FrozenSet, List, Optional, Tuple

from semtab_cpa.errors import ConfigError, ConfigFileError, ContractError
from semtab_cpa.stats import StatsModel
from semtab_cpa.tables import DomainLabel, RelationLabel, relation_label
from semtab_cpa.type_detector import PrimitiveType

FILTER_DOMAIN = "domain"
FILTER_RANGE = "range"
FILTER_COAPPEARANCE = "coappearance"
TAG_UNKNOWN_DOMAIN = "domain:unknown"
TAG_NO_ANCHORS = "coappearance:no-anchors"

# Undo order when the filters leave nothing to choose from.
FALLBACK_ORDER = (FILTER_COAPPEARANCE, FILTER_RANGE, FILTER_DOMAIN)


class CoAppearanceMode(str, Enum):
    OFF = "off"
    ALWAYS = "always"
    PRECISION_GATED = "precision_gated"


@dataclass(frozen=True)
class ApproachConfig:
    use_domain: bool = False
    use_range: bool = False
    use_coappearance: CoAppearanceMode = CoAppearanceMode.OFF
    precision_gate: Optional[FrozenSet[RelationLabel]] = None
    fallback: bool = True
    name: str = "custom"

    def __post_init__(self) -> None:
        if self.use_coappearance is CoAppearanceMode.PRECISION_GATED and self.precision_gate is None:
            raise ConfigError("Precision-gated co-appearance requires a precision gate")

    @property
    def uses_stats(self) -> bool:
        return self.use_domain or self.use_range or self.use_coappearance is not CoAppearanceMode.OFF

    @property
    def needs_domain(self) -> bool:
        return self.use_domain or self.use_coappearance is not CoAppearanceMode.OFF

    @classmethod
    def for_variant(
        cls,
        variant: str,
        *,
        precision_gate: Optional[AbstractSet[RelationLabel]] = None,
        fallback: bool = True,
    ) -> "ApproachConfig":
        key = (variant or "").strip().lower()
        if key not in VARIANTS:
            raise ConfigError(f"Unknown approach '{variant}' (expected one of {', '.join(VARIANTS)})")
        use_domain, use_range, coappearance = VARIANTS[key]
        gate = frozenset(precision_gate) if precision_gate is not None else None
        if coappearance is not CoAppearanceMode.PRECISION_GATED:
            gate = None
        return cls(
            use_domain=use_domain,
            use_range=use_range,
            use_coappearance=coappearance,
            precision_gate=gate,
            fallback=fallback,
            name=key,
        )

    def anchors(self, prior_predictions: List[RelationLabel]) -> FrozenSet[RelationLabel]:
        if self.use_coappearance is CoAppearanceMode.OFF:
            return frozenset()
        if self.use_coappearance is CoAppearanceMode.ALWAYS:
            return frozenset(prior_predictions)
        gate = self.precision_gate or frozenset()
        return frozenset(relation for relation in prior_predictions if relation in gate)


VARIANTS: Dict[str, Tuple[bool, bool, CoAppearanceMode]] = {
    "base": (False, False, CoAppearanceMode.OFF),
    "d": (True, False, CoAppearanceMode.OFF),
    "r": (False, True, CoAppearanceMode.OFF),
    "c": (False, False, CoAppearanceMode.ALWAYS),
    "rd": (True, True, CoAppearanceMode.OFF),
    "rdc": (True, True, CoAppearanceMode.ALWAYS),
    "rdc_p": (True, True, CoAppearanceMode.PRECISION_GATED),
}


def load_precision_gate(path: str) -> FrozenSet[RelationLabel]:
    """Read a JSON array of relation labels."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise ConfigFileError(f"Unable to read precision gate '{path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"Invalid JSON in precision gate '{path}': {exc}") from exc
    if not isinstance(data, list):
        raise ConfigFileError(f"Precision gate '{path}' must be a JSON array of relation labels")
    try:
        return frozenset(relation_label(item) for item in data)
    except ValueError as exc:
        raise ConfigFileError(f"Precision gate '{path}': {exc}") from exc


@dataclass(frozen=True)
class CandidateSet:
    relations: Tuple[RelationLabel, ...]
    applied_filters: Tuple[str, ...] = ()
    fallback_used: bool = False
    dropped_filters: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if len(set(self.relations)) != len(self.relations):
            raise ContractError("Candidate relations must be unique")

    @classmethod
    def of(cls, relations: AbstractSet[str], *tags: str) -> "CandidateSet":
        return cls(relations=tuple(sorted(RelationLabel(relation) for relation in relations)), applied_filters=tags)

    def __len__(self) -> int:
        return len(self.relations)

    def __contains__(self, relation: object) -> bool:
        return relation in self.relations

    @property
    def empty(self) -> bool:
        return not self.relations


def reduce_candidates(
    full_vocab: AbstractSet[RelationLabel],
    domain: Optional[DomainLabel],
    coltype: PrimitiveType,
    already_predicted: AbstractSet[RelationLabel],
    anchor_predictions: AbstractSet[RelationLabel],
    stats: Optional[StatsModel],
    config: ApproachConfig,
) -> CandidateSet:
    """Intersect the vocabulary with the enabled filters, then drop prior predictions.

    When the result is empty and fallback is enabled, the most recently applied
    filter is undone (co-appearance, then range, then domain) until something is left.
    """
    if config.uses_stats and stats is None:
        raise ContractError(f"Approach '{config.name}' needs a stats model")
    tags: List[str] = []
    stages: List[Tuple[str, FrozenSet[RelationLabel]]] = []

    if config.use_domain and stats is not None:
        domain_set = stats.domain_dict.relations_for(domain)
        if domain_set is None:
            tags.append(TAG_UNKNOWN_DOMAIN)
        else:
            stages.append((FILTER_DOMAIN, domain_set))
    if config.use_range and stats is not None:
        stages.append((FILTER_RANGE, stats.range_dict.allowed(coltype)))
    if config.use_coappearance is not CoAppearanceMode.OFF and stats is not None:
        if anchor_predictions:
            partners: set = set()
            for anchor in sorted(anchor_predictions):
                partners.update(stats.co_dict.partners(domain, anchor))
            stages.append((FILTER_COAPPEARANCE, frozenset(partners)))
        else:
            tags.append(TAG_NO_ANCHORS)

    def _apply(active: List[Tuple[str, FrozenSet[RelationLabel]]]) -> set:
        remaining = set(full_vocab)
        for _, allowed in active:
            remaining &= allowed
        return remaining - set(already_predicted)

    active = list(stages)
    result = _apply(active)
    dropped: List[str] = []
    if not result and config.fallback:
        for name in FALLBACK_ORDER:
            if result:
                break
            if any(stage_name == name for stage_name, _ in active):
                active = [stage for stage in active if stage[0] != name]
                dropped.append(name)
                result = _apply(active)
    return CandidateSet(
        relations=tuple(sorted(result)),
        applied_filters=tuple([stage_name for stage_name, _ in active] + tags),
        fallback_used=bool(dropped),
        dropped_filters=tuple(dropped),
    )


__all__ = [
    "ApproachConfig",
    "CandidateSet",
    "CoAppearanceMode",
    "FALLBACK_ORDER",
    "FILTER_COAPPEARANCE",
    "FILTER_DOMAIN",
    "FILTER_RANGE",
    "TAG_NO_ANCHORS",
    "TAG_UNKNOWN_DOMAIN",
    "VARIANTS",
    "load_precision_gate",
    "reduce_candidates",
]
