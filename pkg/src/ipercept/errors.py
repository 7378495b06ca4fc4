class IPerceptError(Exception):
    """Base class for all library errors."""
