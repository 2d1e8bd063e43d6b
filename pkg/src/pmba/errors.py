"""Exception types shared across the package."""


class PmbaError(Exception):
    """Base class for library errors."""


class GeometryError(PmbaError, ValueError):
    """A geometric quantity is undefined for the given input."""


class DegenerateParallaxError(GeometryError):
    pass


class CoincidentAnchorsError(GeometryError):
    pass


class CoincidentPointError(GeometryError):
    pass


class ZeroRayError(GeometryError):
    pass


class AtPlaneError(GeometryError):
    """Point lies on the camera's principal plane (local z == 0)."""


class DataError(PmbaError, ValueError):
    """Malformed or inconsistent input data."""


class BalFormatError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DisconnectedGraphError(DataError):
    def __init__(self, components):
        self.components = [sorted(int(i) for i in c) for c in components]
        listing = "; ".join("{" + ", ".join(map(str, c)) + "}" for c in self.components)
        super().__init__(f"view graph is disconnected: {len(self.components)} components: {listing}")


class InfeasibleProblemError(PmbaError):
    pass


class StageError(PmbaError):
    """A pipeline stage failed; carries the stage name and its diagnostics."""

    def __init__(self, stage: str, message: str, diagnostics: dict | None = None):
        self.stage = stage
        self.diagnostics = diagnostics or {}
        super().__init__(f"[{stage}] {message}")
