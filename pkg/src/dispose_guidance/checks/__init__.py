"""
Invariant checks backing ``dispose check --suite``.

One ``*_checks`` module per pipeline module; they register on import and
``load_check_modules`` discovers them.
"""

from .core import (
    CheckSchema,
    CheckSettings,
    CheckRegistry,
    registry,
    check,
    load_check_modules,
)

__all__ = [
    'CheckSchema',
    'CheckSettings',
    'CheckRegistry',
    'registry',
    'check',
    'load_check_modules',
]
