"""Zero-shot interactive perception on a simulated tabletop."""

from .errors import IPerceptError

__version__ = "0.1.0"

__all__ = ["IPerceptError", "__version__"]
