from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional
import logging

from .exceptions import InvariantViolation
from .run_registry import CheckStatus, RunLedger, run_ledger

logger = logging.getLogger(__name__)


@contextmanager
def check_context(run_id: str, ledger: Optional[RunLedger] = None) -> Iterator[Dict[str, Any]]:
    """
    Context manager for one check run.
    Sets the run to RUNNING on entry and PASSED on a clean exit; invariant
    violations become FAILED and any other exception ERROR. The yielded dict
    collects witness values.

    Example:
        ```python
        with check_context(run.run_id) as witness:
            witness["max_error"] = err
        ```
    """
    ledger = ledger or run_ledger
    witness: Dict[str, Any] = {}
    ledger.update_run(run_id, CheckStatus.RUNNING)
    try:
        yield witness
    except InvariantViolation as e:
        ledger.update_run(run_id, CheckStatus.FAILED, witness={**witness, **e.witness}, error=e.detail,
                          invariant=e.invariant)
        raise
    except Exception as e:
        ledger.update_run(run_id, CheckStatus.ERROR, witness=witness, error=f"{type(e).__name__}: {e}")
        raise
    else:
        ledger.update_run(run_id, CheckStatus.PASSED, witness=witness)


def require(condition: bool, module: str, invariant: str, **witness: Any) -> None:
    """Raise InvariantViolation with the given witness values unless ``condition`` holds."""
    if not condition:
        raise InvariantViolation(module, invariant, witness)
