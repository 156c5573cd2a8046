from enum import Enum
from datetime import datetime
from typing import Dict, Optional, Any, List, Union
from dataclasses import dataclass, field, asdict
from pathlib import Path
import itertools
import json
import logging

logger = logging.getLogger(__name__)


class CheckStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    PASSED = "passed"
    FAILED = "failed"
    ERROR = "error"


@dataclass
class CheckRun:
    """One execution of an invariant check."""
    run_id: str
    check_name: str
    module: str
    status: CheckStatus = CheckStatus.PENDING
    witness: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None
    invariant: Optional[str] = None
    created_at: datetime = field(default_factory=datetime.now)
    updated_at: datetime = field(default_factory=datetime.now)

    def update(self, status: CheckStatus, witness: Optional[Dict[str, Any]] = None, error: Optional[str] = None,
               invariant: Optional[str] = None):
        self.status = status
        if witness is not None:
            self.witness = witness
        self.error = error
        if invariant is not None:
            self.invariant = invariant
        self.updated_at = datetime.now()

    @property
    def duration(self) -> float:
        return (self.updated_at - self.created_at).total_seconds()

    def get_status_message(self) -> str:
        """Human-readable one-liner for reports."""
        if self.status == CheckStatus.PENDING:
            return f"Waiting to run {self.check_name}"
        elif self.status == CheckStatus.RUNNING:
            return f"Running {self.check_name}"
        elif self.status == CheckStatus.PASSED:
            return f"{self.check_name} passed"
        elif self.status == CheckStatus.FAILED:
            witness = ", ".join(f"{k}={v}" for k, v in self.witness.items())
            return f"{self.module}: invariant '{self.invariant or self.check_name}' violated ({witness})"
        return f"{self.check_name} errored: {self.error}"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['status'] = self.status.value
        data['created_at'] = self.created_at.isoformat()
        data['updated_at'] = self.updated_at.isoformat()
        return data


class RunLedger:
    """Ordered record of check runs."""
    def __init__(self):
        self._runs: Dict[str, CheckRun] = {}
        self._counter = itertools.count(1)

    def _generate_run_id(self) -> str:
        return f"run-{next(self._counter):04d}"

    def create_run(self, check_name: str, module: str) -> CheckRun:
        run = CheckRun(run_id=self._generate_run_id(), check_name=check_name, module=module)
        self._runs[run.run_id] = run
        logger.debug(f"Created run {run.run_id} for check {check_name}")
        return run

    def get_run(self, run_id: str) -> Optional[CheckRun]:
        return self._runs.get(run_id)

    def update_run(self, run_id: str, status: CheckStatus, witness: Optional[Dict[str, Any]] = None,
                   error: Optional[str] = None, invariant: Optional[str] = None):
        run = self.get_run(run_id)
        if run:
            run.update(status, witness, error, invariant)

    def list_runs(self, status: Optional[CheckStatus] = None) -> List[CheckRun]:
        runs = list(self._runs.values())
        return runs if status is None else [r for r in runs if r.status == status]

    def summary(self) -> Dict[str, int]:
        counts = {s.value: 0 for s in CheckStatus}
        for run in self._runs.values():
            counts[run.status.value] += 1
        return counts

    def first_failure(self) -> Optional[CheckRun]:
        return next((r for r in self._runs.values() if r.status in (CheckStatus.FAILED, CheckStatus.ERROR)), None)

    def write_json(self, path: Union[str, Path]) -> Path:
        """Write every run, in creation order, as a JSON list."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump([run.to_dict() for run in self.list_runs()], f, indent=2, default=str)
        logger.info(f"Wrote {len(self._runs)} check runs to {path}")
        return path


run_ledger = RunLedger()
