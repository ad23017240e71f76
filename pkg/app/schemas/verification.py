from typing import List

from pydantic import BaseModel


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""
    # informational checks are reported but never fail the suite
    informational: bool = False


class SuiteReport(BaseModel):
    checks: List[CheckResult] = []

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.informational)
