"""Exception types shared across segforge modules."""


class SegforgeError(Exception):
    """Base class for all segforge errors."""


class FormatError(SegforgeError):
    """A file or manifest is missing, malformed, or unparsable."""


class ValidationError(SegforgeError):
    """Inputs violate a documented precondition or invariant."""


class IntegrityError(SegforgeError):
    """Stored bytes do not match their recorded checksum."""


class CompatibilityError(SegforgeError):
    """A stored artifact does not match the requested configuration."""
