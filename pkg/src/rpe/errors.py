"""Exception hierarchy shared by every module."""


class RPEError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RPEError, ValueError):
    pass


class StructureError(RPEError, ValueError):
    """Adapters in one merge disagree on their parameter-name sets."""

    def __init__(self, message, missing=(), extra=()):
        super().__init__(message)
        self.missing = tuple(missing)
        self.extra = tuple(extra)


class DomainError(RPEError, ValueError):
    pass


class SchemaError(RPEError, ValueError):
    """An entry does not fit the registry's declared dim or adapter signature."""


class ConflictError(RPEError):
    pass


class FormatError(RPEError, ValueError):
    """A binary file is truncated, has the wrong magic, or is otherwise malformed."""


class ConfigError(RPEError, ValueError):
    pass
