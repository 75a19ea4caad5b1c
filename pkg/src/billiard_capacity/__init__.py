"""Inradius bounds, periodic billiard trajectories and loop contractions on implicit domains."""

from .expr import DomainError, Expression, ParseError, eval_jet, parse
from .geometry import (
    GeometryError,
    ImplicitDomain,
    disk,
    distance_to_boundary,
    ellipse,
    from_expression,
    inradius,
    peanut,
    project_to_boundary,
    superellipse,
)
from .loops import DiscreteLoop, concatenate, escapes, loop_length
from .billiard import PeriodicBilliardTrajectory, find_critical_configs, reflect, validate
from .capacity import CapacityBracket, capacity_bracket, report

__version__ = "0.1.0"

__all__ = [
    "CapacityBracket",
    "DiscreteLoop",
    "DomainError",
    "Expression",
    "GeometryError",
    "ImplicitDomain",
    "ParseError",
    "PeriodicBilliardTrajectory",
    "capacity_bracket",
    "concatenate",
    "disk",
    "distance_to_boundary",
    "ellipse",
    "escapes",
    "eval_jet",
    "find_critical_configs",
    "from_expression",
    "inradius",
    "loop_length",
    "parse",
    "peanut",
    "project_to_boundary",
    "reflect",
    "report",
    "superellipse",
    "validate",
]
