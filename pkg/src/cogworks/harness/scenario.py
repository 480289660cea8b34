"""Scenario files: scripted conversations with optional chaos, as JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any


@dataclass(frozen=True)
class ScenarioStep:
    channel: str
    text: str
    expect_intent: str | None = None
    expect_reply: str | None = None  # regex searched in the reply


@dataclass(frozen=True)
class ChaosSpec:
    ack_drop_prob: float = 0.0
    kill_consumer_at_step: int | None = None
    kill_consumer: str = "core-1"
    kill_datanode_at_step: int | None = None
    kill_datanode: str = "dn-0"

    def __post_init__(self) -> None:
        if not 0.0 <= self.ack_drop_prob <= 1.0:
            raise ValueError("ack_drop_prob must be in [0,1]")

    @property
    def active(self) -> bool:
        return (
            self.ack_drop_prob > 0.0
            or self.kill_consumer_at_step is not None
            or self.kill_datanode_at_step is not None
        )


@dataclass(frozen=True)
class Scenario:
    name: str
    fixed_clock_start: str  # ISO-8601, UTC assumed when naive
    steps: tuple[ScenarioStep, ...]
    machine: dict[str, Any] = field(default_factory=dict)
    directory: dict[str, Any] = field(default_factory=dict)
    channels: tuple[dict[str, Any], ...] = ()
    chaos: ChaosSpec = field(default_factory=ChaosSpec)

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("scenario needs at least one step")

    @property
    def start_epoch(self) -> float:
        moment = datetime.fromisoformat(self.fixed_clock_start)
        if moment.tzinfo is None:
            moment = moment.replace(tzinfo=timezone.utc)
        return moment.timestamp()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        return cls(
            name=data["name"],
            fixed_clock_start=data["fixed_clock_start"],
            steps=tuple(ScenarioStep(**s) for s in data["steps"]),
            machine=data.get("machine", {}),
            directory=data.get("directory", {}),
            channels=tuple(data.get("channels", ())),
            chaos=ChaosSpec(**data.get("chaos", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))
