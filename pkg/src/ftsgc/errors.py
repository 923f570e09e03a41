"""Exception hierarchy.

Every error carries the module and operation that raised it so batch users
can tell from a log line where a run went wrong.
"""

from __future__ import annotations


class FtsgcError(Exception):
    module = "ftsgc"

    def __init__(self, message: str, *, operation: str = "", **context):
        self.operation = operation
        self.context = context
        prefix = f"{self.module}.{operation}" if operation else self.module
        super().__init__(f"[{prefix}] {message}")


class GridError(FtsgcError):
    module = "grid"


class GridTooSmall(GridError):
    pass


class InvalidGrid(GridError):
    pass


class PointNotOnGrid(GridError):
    pass


class BadBasisOrder(GridError):
    pass


class ShapeError(FtsgcError):
    module = "model"


class NumericalBreakdown(FtsgcError):
    module = "statespace"

    def __init__(self, message: str, *, operation: str = "", time: int | None = None):
        self.time = time
        if time is not None:
            message = f"{message} (t={time})"
        super().__init__(message, operation=operation)


class InitFailure(FtsgcError):
    module = "gibbs"


class SweepFailure(FtsgcError):
    module = "gibbs"

    def __init__(self, message: str, *, operation: str = "sweep", component: str = "",
                 iteration: int | None = None):
        self.detail = message
        self.component = component
        self.iteration = iteration
        parts = [message]
        if component:
            parts.append(f"component={component}")
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        super().__init__(" ".join(parts), operation=operation)


class EvidenceFailure(FtsgcError):
    module = "evidence"


class DegenerateKernel(FtsgcError):
    module = "simulate"


class IngestError(FtsgcError):
    module = "cli"

    def __init__(self, message: str, *, operation: str = "ingest", row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message, operation=operation)


class DegenerateInput(FtsgcError):
    module = "cli"


class ConfigError(FtsgcError):
    module = "cli"
