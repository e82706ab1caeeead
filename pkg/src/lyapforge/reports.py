"""Small shared result record for verification passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MarginReport:
    """Worst-case margin of a pointwise inequality check.

    ``worst_margin`` is the largest value of (left side - right side) seen,
    so the check passes when it does not exceed ``tolerance``.  ``margins``
    and ``locations`` keep the full profile for diagnostics; they are not
    serialized.
    """

    label: str
    passed: bool
    worst_margin: float
    tolerance: float
    worst_location: float | str | None = None
    margins: np.ndarray | None = field(default=None, repr=False)
    locations: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        loc = self.worst_location
        if isinstance(loc, (np.floating, np.integer)):
            loc = float(loc)
        return {
            "label": self.label,
            "passed": bool(self.passed),
            "worst_margin": float(self.worst_margin),
            "tolerance": float(self.tolerance),
            "worst_location": loc,
        }


def from_margins(label: str, margins, tolerance: float, locations=None) -> MarginReport:
    """Fold a margin profile into a report; empty profiles pass vacuously."""
    margins = np.asarray(margins, dtype=float).reshape(-1)
    if margins.size == 0:
        return MarginReport(label, True, -np.inf, tolerance, None)
    k = int(np.argmax(margins))
    worst = float(margins[k])
    where = None
    if locations is not None:
        locations = np.asarray(locations).reshape(-1)
        where = locations[k]
    return MarginReport(label, worst <= tolerance, worst, tolerance, where,
                        margins=margins,
                        locations=None if locations is None else locations)
