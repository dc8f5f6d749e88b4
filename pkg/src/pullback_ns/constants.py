"""Bundle of the analysis constants (C, C1..C5, C'1, C'2) with provenance tags.

The estimates carry unnamed generic constants.  Here each one is either a
calibration output (measured on a concrete basis/flow) or the default 1.0,
and every report states which.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

NAMES = ("C", "C1", "C2", "C3", "C4", "C5", "C1p", "C2p")
DEFAULT = "default (uncalibrated)"


@dataclass(frozen=True)
class Constants:
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.values) - set(NAMES)
        if unknown:
            raise ValueError(f"unknown constants {sorted(unknown)}")

    def get(self, name: str) -> float:
        if name not in NAMES:
            raise KeyError(name)
        if name not in self.values:
            log.warning("constant %s is uncalibrated; using 1.0", name)
            return 1.0
        return float(self.values[name])

    def source(self, name: str) -> str:
        return self.provenance.get(name, DEFAULT) if name in self.values else DEFAULT

    def with_values(self, provenance: str, **values) -> "Constants":
        vals = dict(self.values)
        prov = dict(self.provenance)
        for k, v in values.items():
            vals[k] = float(v)
            prov[k] = provenance
        return Constants(vals, prov)

    def report(self) -> dict:
        return {n: {"value": float(self.values.get(n, 1.0)), "source": self.source(n)} for n in NAMES}


def unit_constants() -> Constants:
    """All constants explicitly set to 1 (still tagged as uncalibrated)."""
    return Constants({n: 1.0 for n in NAMES}, {n: DEFAULT for n in NAMES})
