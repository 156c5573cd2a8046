from rich.traceback import install

from .logging_utils import console

# Install the rich traceback handler before any other imports
install(show_locals=False, width=console.width)

__version__ = "0.1.0"
