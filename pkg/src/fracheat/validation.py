from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    measured: float | None = None
    tolerance: float | None = None
    note: str = ""


@dataclass
class ValidationReport:
    """Ordered list of named pass/fail checks with the measured quantities."""

    subject: str
    checks: list[Check] = field(default_factory=list)

    def add(self, name, passed, measured=None, tolerance=None, note=""):
        self.checks.append(
            Check(name, bool(passed),
                  None if measured is None else float(measured),
                  None if tolerance is None else float(tolerance), note)
        )
        return self

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "subject": self.subject,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "measured": c.measured,
                 "tolerance": c.tolerance, "note": c.note}
                for c in self.checks
            ],
        }
