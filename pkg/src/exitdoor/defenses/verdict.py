from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field


@dataclass
class DefenseVerdict:
    """Outcome of one detector run.

    ``direction`` says which side of ``threshold`` means "backdoored":
    ``"above"`` flags when ``statistic >= threshold``, ``"below"`` when
    ``statistic < threshold``.
    """

    method: str
    statistic: float
    threshold: float
    direction: str = "above"
    per_class_scores: dict[int, float] = field(default_factory=dict)
    flagged: bool = field(init=False)
    suspect_class: int | None = None
    artifacts: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.direction not in ("above", "below"):
            raise ValueError("direction must be 'above' or 'below'")
        if not math.isfinite(self.statistic):
            raise ValueError(f"{self.method}: statistic is not finite")
        if self.direction == "above":
            self.flagged = bool(self.statistic >= self.threshold)
        else:
            self.flagged = bool(self.statistic < self.threshold)

    def to_dict(self, with_artifacts: bool = False) -> dict:
        d = asdict(self)
        d["per_class_scores"] = {str(k): v for k, v in self.per_class_scores.items()}
        if not with_artifacts:
            d.pop("artifacts")
        return d
