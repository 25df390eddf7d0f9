from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class Segment:
    """A labelled interval in clip-local seconds."""

    label: int
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"degenerate segment [{self.start_s}, {self.end_s}]")

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Detection:
    clip_id: str
    label: int
    start_s: float
    end_s: float
    score: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(str(d["clip_id"]), int(d["label"]), float(d["start_s"]), float(d["end_s"]),
                   float(d["score"]))
