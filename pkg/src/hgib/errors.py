"""Exception types shared across the package."""


class HgibError(Exception):
    """Base class for package-specific failures."""


class DataError(HgibError):
    """Malformed or inconsistent input data (files, manifests, splits)."""


class NumericalError(HgibError):
    """A computation produced a non-finite value; the step must be aborted."""
