"""
Core check definitions and the check registry.

Checks are plain functions registered with the ``@check`` decorator. Each one
takes its ``CheckSettings`` and returns a dict of witness values, raising
``InvariantViolation`` when the property it guards does not hold.
"""

from typing import Any, Callable, Dict, List, Optional
import importlib
import logging
import os
import pkgutil

from pydantic import BaseModel

from ..exceptions import InvariantViolation, ParameterError
from ..run_registry import CheckRun, RunLedger, run_ledger
from ..run_utils import check_context

logger = logging.getLogger(__name__)

CheckFn = Callable[["CheckSettings"], Optional[Dict[str, Any]]]


class CheckSchema(BaseModel):
    """Describes a registered check."""
    name: str
    module: str
    description: str


class CheckSettings(BaseModel):
    """Execution settings for a check."""
    seed: int = 0
    slow: bool = False


class CheckRegistry:
    """Registry for invariant checks, grouped by pipeline module."""
    def __init__(self):
        self._checks: Dict[str, CheckSchema] = {}
        self._implementations: Dict[str, CheckFn] = {}
        self._settings: Dict[str, CheckSettings] = {}

    def register(self, schema: CheckSchema, implementation: CheckFn, settings: Optional[CheckSettings] = None) -> None:
        if schema.name in self._checks:
            raise ParameterError(f"check {schema.name!r} is already registered")
        self._checks[schema.name] = schema
        self._implementations[schema.name] = implementation
        self._settings[schema.name] = settings or CheckSettings()

    def list_checks(self, module: Optional[str] = None) -> List[str]:
        return [name for name, schema in self._checks.items() if module is None or schema.module == module]

    def modules(self) -> List[str]:
        return list(dict.fromkeys(schema.module for schema in self._checks.values()))

    def suites(self) -> List[str]:
        return ["all"] + self.modules()

    def run_check(self, name: str, ledger: Optional[RunLedger] = None) -> CheckRun:
        """Run one check inside a ledger context; failures are recorded, not raised."""
        ledger = ledger or run_ledger
        schema = self._checks[name]
        run = ledger.create_run(name, schema.module)
        try:
            with check_context(run.run_id, ledger) as witness:
                result = self._implementations[name](self._settings[name])
                witness.update(result or {})
        except InvariantViolation as e:
            logger.error(f"Check {name} failed: {e.detail}")
        except Exception as e:
            logger.error(f"Check {name} raised {type(e).__name__}: {e}")
        else:
            logger.info(f"Check {name} passed")
        return run

    def run_suite(self, suite: str = "all", ledger: Optional[RunLedger] = None,
                  include_slow: bool = True) -> List[CheckRun]:
        if suite != "all" and suite not in self.modules():
            raise ParameterError(f"unknown suite {suite!r}; expected one of {', '.join(self.suites())}")
        names = self.list_checks(None if suite == "all" else suite)
        if not include_slow:
            names = [n for n in names if not self._settings[n].slow]
        return [self.run_check(name, ledger) for name in names]


# Global registry instance
registry = CheckRegistry()


def check(
    name: Optional[str] = None,
    module: Optional[str] = None,
    description: Optional[str] = None,
    settings: Optional[CheckSettings] = None
) -> Callable:
    """Decorator for registering functions as invariant checks.

    Args:
        name: Optional check name. Defaults to the function name.
        module: Pipeline module the check belongs to. Defaults to the defining
            module's name without its ``_checks`` suffix.
        description: Optional description. Defaults to the first docstring line.
        settings: Optional execution settings.
    """
    def decorator(func: CheckFn) -> CheckFn:
        check_module = module or func.__module__.rsplit(".", 1)[-1].removesuffix("_checks")
        check_description = description or (func.__doc__ or "").strip().split("\n")[0]
        schema = CheckSchema(name=name or func.__name__, module=check_module, description=check_description)
        registry.register(schema, func, settings)
        return func

    return decorator


def load_check_modules() -> List[str]:
    """Import every ``*_checks`` module in this package so their checks register."""
    loaded = []
    for module_info in pkgutil.iter_modules([os.path.dirname(__file__)]):
        if module_info.name.endswith("_checks"):
            importlib.import_module(f".{module_info.name}", package=__package__)
            loaded.append(module_info.name)
    return loaded
