#!/usr/bin/env python
"""Run the dispose CLI from a source checkout without installing the package."""

import sys

from src.dispose_guidance.cli import main

if __name__ == "__main__":
    sys.exit(main())
