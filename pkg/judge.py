#!/usr/bin/env python3
"""
OpenMic Judge
=============
Five-dimension producer-persona evaluation and the weighted total

    S_total = 0.30*persona + 0.25*humor + 0.20*reactivity + 0.15*coherence + 0.10*narrative

Scores come from the stripped script. When the script carries stage markers
a second call on the marked-up text collects the timing rationale.
"""

import json
import math
from pathlib import Path
from typing import Dict, Optional, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from agents import AgentCrew, RoleId
from blackboard import Blackboard
from config import WeightSettings
from errors import EmptyScript, WeightSumError
from markup import Text, parse_markup, strip_plain


logger = structlog.get_logger(__name__)

DIMENSIONS: Tuple[str, ...] = ("persona", "humor", "reactivity", "coherence", "narrative")
WEIGHT_TOLERANCE = 1e-9


class DimensionScores(BaseModel):
    model_config = ConfigDict(frozen=True)

    persona: float = Field(ge=0, le=100)
    humor: float = Field(ge=0, le=100)
    reactivity: float = Field(ge=0, le=100)
    coherence: float = Field(ge=0, le=100)
    narrative: float = Field(ge=0, le=100)
    rationale: Dict[str, str] = Field(default_factory=dict)

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, d) for d in DIMENSIONS)


class JudgeWeights(BaseModel):
    """Per-dimension weights. The sum is checked by validate_weights, not here."""
    model_config = ConfigDict(frozen=True)

    persona: float = 0.30
    humor: float = 0.25
    reactivity: float = 0.20
    coherence: float = 0.15
    narrative: float = 0.10

    @classmethod
    def from_settings(cls, settings: WeightSettings) -> "JudgeWeights":
        return cls(**settings.model_dump())

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, d) for d in DIMENSIONS)


def validate_weights(weights: JudgeWeights) -> None:
    """
    Raises:
        WeightSumError: a weight outside [0, 1] or a sum off 1 by more than 1e-9
    """
    total = math.fsum(weights.values())
    for name, w in zip(DIMENSIONS, weights.values()):
        if not 0.0 <= w <= 1.0:
            raise WeightSumError(total, f"weight {name}={w!r} is outside [0, 1]")
    if abs(total - 1.0) > WEIGHT_TOLERANCE:
        raise WeightSumError(total)


def aggregate(scores: DimensionScores, weights: JudgeWeights = JudgeWeights()) -> float:
    validate_weights(weights)
    return math.fsum(w * s for w, s in zip(weights.values(), scores.values()))


class JudgeReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    scores: DimensionScores
    weights: JudgeWeights
    total: float
    rationale: Dict[str, str] = Field(default_factory=dict)
    timing: str = ""

    @model_validator(mode="after")
    def _total_matches(self):
        expected = math.fsum(w * s for w, s in zip(self.weights.values(), self.scores.values()))
        if abs(self.total - expected) > WEIGHT_TOLERANCE:
            raise ValueError(f"total {self.total!r} does not match weighted sum {expected!r}")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), ensure_ascii=False, indent=2)


def _scores_from(data: Dict) -> DimensionScores:
    return DimensionScores(
        **{d: float(data[d]["score"]) for d in DIMENSIONS},
        rationale={d: data[d].get("rationale", "") for d in DIMENSIONS},
    )


def judge_script(script: str, crew: AgentCrew) -> DimensionScores:
    """
    One producer-persona call on ``script``; out-of-range scores go through
    the agents repair round-trip.

    Raises:
        EmptyScript: nothing to judge
        SchemaViolation, GatewayError: propagated
    """
    if not script.strip():
        raise EmptyScript("cannot judge an empty script")
    out = crew.invoke(RoleId.JUDGE, Blackboard(), sections=[("script", script)])
    return _scores_from(out.data)


def has_markers(text: str) -> bool:
    return any(not isinstance(node, Text) for node in parse_markup(text, strict=False).walk())


def evaluate(script: str, crew: AgentCrew, weights: Optional[JudgeWeights] = None) -> JudgeReport:
    """Score the stripped script; ask for a timing rationale when markers are present."""
    weights = weights or JudgeWeights.from_settings(crew.config.judge_weights)
    validate_weights(weights)
    plain = strip_plain(parse_markup(script, strict=False))
    scores = judge_script(plain, crew)

    timing = ""
    if has_markers(script):
        out = crew.invoke(RoleId.JUDGE, Blackboard(), sections=[("script_with_markup", script)])
        timing = out.data.get("timing", "")

    report = JudgeReport(scores=scores, weights=weights, total=aggregate(scores, weights),
                         rationale=dict(scores.rationale), timing=timing)
    logger.info("script_judged", total=round(report.total, 4))
    return report


def write_report(report: JudgeReport, path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "x", encoding="utf-8") as f:
        f.write(report.to_json())
    return out
