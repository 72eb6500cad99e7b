"""Calendar quarters, July-June survey cycles and the rotating panel schedule."""

from __future__ import annotations

import re
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Iterable

_YQ = re.compile(r"^(\d{4})-Q([1-4])$")
_SY = re.compile(r"^(\d{4})-(\d{2})$")


class ScheduleError(ValueError):
    pass


@lru_cache(maxsize=None)
def quarter_ordinal(year_quarter: str) -> int:
    """Map ``"2017-Q3"`` to a monotone integer so quarters can be differenced."""
    m = _YQ.match(year_quarter)
    if not m:
        raise ScheduleError(f"bad calendar quarter {year_quarter!r}")
    return int(m.group(1)) * 4 + int(m.group(2)) - 1


def ordinal_quarter(ordinal: int) -> str:
    return f"{ordinal // 4}-Q{ordinal % 4 + 1}"


def shift_quarter(year_quarter: str, n: int) -> str:
    return ordinal_quarter(quarter_ordinal(year_quarter) + n)


def survey_year_start(survey_year: str) -> int:
    m = _SY.match(survey_year)
    if not m:
        raise ScheduleError(f"bad survey year {survey_year!r}, expected e.g. '2017-18'")
    start = int(m.group(1))
    if (start + 1) % 100 != int(m.group(2)):
        raise ScheduleError(f"survey year {survey_year!r} does not span consecutive years")
    return start


@lru_cache(maxsize=None)
def cycle_to_calendar(survey_year: str, quarter: int) -> str:
    """Quarter 1 of a July-June survey year is the July-September calendar quarter."""
    if quarter not in (1, 2, 3, 4):
        raise ScheduleError(f"cycle quarter must be 1-4, got {quarter}")
    start = survey_year_start(survey_year)
    return ordinal_quarter(start * 4 + 2 + quarter - 1)


def calendar_to_cycle(year_quarter: str) -> tuple[str, int]:
    o = quarter_ordinal(year_quarter) - 2
    start = o // 4
    return f"{start}-{(start + 1) % 100:02d}", o % 4 + 1


def quarter_range(first: str, last: str) -> list[str]:
    a, b = quarter_ordinal(first), quarter_ordinal(last)
    return [ordinal_quarter(o) for o in range(a, b + 1)]


@dataclass
class PanelSchedule:
    """Panel label -> ordered ``(year_quarter, visit_no)`` pairs.

    Each panel is visited in four consecutive quarters and a new panel
    starts every quarter.
    """

    panels: dict[str, list[tuple[str, int]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        starts = []
        for label, visits in self.panels.items():
            if [v for _, v in visits] != [1, 2, 3, 4]:
                raise ScheduleError(f"panel {label} must have visits 1-4 in order")
            ords = [quarter_ordinal(q) for q, _ in visits]
            if ords != list(range(ords[0], ords[0] + 4)):
                raise ScheduleError(f"panel {label} does not span four consecutive quarters")
            starts.append(ords[0])
        if len(set(starts)) != len(starts):
            raise ScheduleError("two panels start in the same quarter")
        if starts and sorted(starts) != list(range(min(starts), min(starts) + len(starts))):
            raise ScheduleError("panel start quarters are not consecutive")
        self._index = {
            (q, v): label for label, visits in self.panels.items() for q, v in visits
        }

    @classmethod
    def staggered(cls, labels: Iterable[str], first_quarter: str) -> "PanelSchedule":
        panels = {}
        for i, label in enumerate(labels):
            start = shift_quarter(first_quarter, i)
            panels[label] = [(shift_quarter(start, k), k + 1) for k in range(4)]
        return cls(panels)

    def infer_panel(self, year_quarter: str, visit_no: int) -> str:
        try:
            return self._index[(year_quarter, int(visit_no))]
        except KeyError:
            raise ScheduleError(
                f"no panel visits quarter {year_quarter} with visit number {visit_no}"
            ) from None

    def quarter_of(self, panel: str, visit_no: int) -> str:
        return self.panels[panel][visit_no - 1][0]

    def labels(self) -> list[str]:
        return list(self.panels)

    def to_rows(self) -> list[tuple[str, str, int]]:
        return [(p, q, v) for p, visits in self.panels.items() for q, v in visits]


# Panels P11-P18 use the first urban frame, P21 onward the next one.
DEFAULT_PANELS = ["P11", "P12", "P13", "P14", "P15", "P16", "P17", "P18", "P21", "P22"]
DEFAULT_SCHEDULE = PanelSchedule.staggered(DEFAULT_PANELS, "2017-Q3")
STUDY_WINDOW = ("2017-Q3", "2019-Q4")


def infer_panel(year_quarter: str, visit_no: int, schedule: PanelSchedule = DEFAULT_SCHEDULE) -> str:
    return schedule.infer_panel(year_quarter, visit_no)
