"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation was called with inconsistent shapes or out-of-contract values."""


class DataError(RuntimeError):
    """Dataset, file-format, or configuration content problems."""


class CheckFailedError(RuntimeError):
    """A numerical self-check (e.g. gradient check on non-finite values) failed."""


class EmptyFragmentError(RuntimeError):
    """A fragment produced an empty bounding volume and cannot be processed."""


class EmptyMeshError(RuntimeError):
    """A mesh operation that requires geometry received an empty mesh."""
