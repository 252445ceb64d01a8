"""Grade a rollout group's binary reward pattern and pick its pathway.

The three grades partition all reward patterns: a group is Easy when every
rollout is rewarded, Hard when none is, and Mid otherwise. Easy groups are
discarded (zero gradient contribution), Hard groups go to supervised
distillation, Mid groups to the mixed RL objective.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

from .errors import InputError


class DifficultyGrade(Enum):
    EASY = "easy"
    HARD = "hard"
    MID = "mid"


class Route(Enum):
    DISCARD = "discard"
    SFT = "sft"
    MIXED_RL = "mixed_rl"


def grade(rewards: Sequence[int]) -> DifficultyGrade:
    """Map a group's binary rewards to exactly one difficulty grade."""
    if len(rewards) < 2:
        raise InputError(f"grading needs a group of >= 2 rewards, got {len(rewards)}")
    total = 0
    for r in rewards:
        if r not in (0, 1):
            raise InputError(f"rewards must be 0 or 1, got {r!r}")
        total += r
    if total == len(rewards):
        return DifficultyGrade.EASY
    if total == 0:
        return DifficultyGrade.HARD
    return DifficultyGrade.MID


_ROUTES = {
    DifficultyGrade.EASY: Route.DISCARD,
    DifficultyGrade.HARD: Route.SFT,
    DifficultyGrade.MID: Route.MIXED_RL,
}


def route(g: DifficultyGrade) -> Route:
    return _ROUTES[g]
