"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid configuration: bad key, bad value or violated grid constraint."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DeadlockError(RuntimeError):
    """Processes are still waiting but no event can ever wake them."""

    def __init__(self, message, edges=()):
        self.edges = list(edges)
        super().__init__(message)


class IntegrityError(RuntimeError):
    """A trace or a finished run violates a bookkeeping invariant."""


class UnsupportedFailure(RuntimeError):
    """Recovery state needed by a failure was already lost (double failure)."""
