"""Choice observations and their JSON-lines encoding.

One line per task::

    {"respondent_id": ..., "task_id": ..., "alts": [{"hhc", "tti", "image_id", "month"}, ...], "chosen": 0}

``chosen`` is omitted for unanswered designs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .errors import ValidationError

DECEMBER = 12


@dataclass(frozen=True)
class Alternative:
    hhc: float
    tti: float
    image_id: Optional[str] = None
    month: int = DECEMBER

    def __post_init__(self):
        if not 1 <= int(self.month) <= 12:
            raise ValidationError(f"month must be in 1..12, got {self.month}")

    def to_dict(self) -> dict:
        return {"hhc": self.hhc, "tti": self.tti, "image_id": self.image_id, "month": self.month}

    @classmethod
    def from_dict(cls, d: dict) -> "Alternative":
        return cls(hhc=d["hhc"], tti=d["tti"], image_id=d.get("image_id"), month=int(d.get("month", DECEMBER)))


@dataclass(frozen=True)
class ChoiceTask:
    respondent_id: str
    task_id: str
    alternatives: tuple
    chosen: Optional[int] = None

    def __post_init__(self):
        if len(self.alternatives) != 2:
            raise ValidationError(f"task {self.task_id}: expected 2 alternatives, got {len(self.alternatives)}")
        if self.chosen is not None and self.chosen not in (0, 1):
            raise ValidationError(f"task {self.task_id}: chosen must be 0 or 1, got {self.chosen}")
        object.__setattr__(self, "alternatives", tuple(self.alternatives))

    @property
    def image_ids(self) -> tuple:
        return tuple(a.image_id for a in self.alternatives)

    def swapped(self) -> "ChoiceTask":
        """Same task with the two alternatives (and the choice) exchanged."""
        chosen = None if self.chosen is None else 1 - self.chosen
        return replace(self, alternatives=self.alternatives[::-1], chosen=chosen)

    def with_choice(self, chosen: int) -> "ChoiceTask":
        return replace(self, chosen=int(chosen))

    def to_dict(self) -> dict:
        d = {
            "respondent_id": self.respondent_id,
            "task_id": self.task_id,
            "alts": [a.to_dict() for a in self.alternatives],
        }
        if self.chosen is not None:
            d["chosen"] = self.chosen
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChoiceTask":
        chosen = d.get("chosen")
        return cls(
            respondent_id=str(d["respondent_id"]),
            task_id=str(d["task_id"]),
            alternatives=tuple(Alternative.from_dict(a) for a in d["alts"]),
            chosen=None if chosen is None else int(chosen),
        )


@dataclass
class Dataset:
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        self.tasks = list(self.tasks)

    @property
    def n_obs(self) -> int:
        return len(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[ChoiceTask]:
        return iter(self.tasks)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.tasks[idx])
        return self.tasks[idx]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.tasks[i] for i in indices])

    def image_ids(self) -> set:
        return {i for t in self.tasks for i in t.image_ids if i is not None}

    @property
    def answered(self) -> bool:
        return all(t.chosen is not None for t in self.tasks)

    def require_answered(self):
        missing = [t.task_id for t in self.tasks if t.chosen is None]
        if missing:
            raise ValidationError(f"{len(missing)} task(s) have no recorded choice, e.g. {missing[0]}")

    def to_jsonl(self, path) -> None:
        Path(path).write_text("".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in self.tasks))

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        tasks = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    tasks.append(ChoiceTask.from_dict(json.loads(line)))
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed task ({exc})") from exc
        return cls(tasks)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    return Dataset([t for d in datasets for t in d.tasks])
