"""Exception types shared across the package.

Every failure mode that callers are expected to handle gets its own class so
tests and the CLI can match on type instead of message text.
"""


class ScsurfError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------- geometry
class BehindCamera(ScsurfError):
    """Point projects behind the camera (depth <= eps_z)."""


class OutOfBounds(ScsurfError):
    """Pixel coordinate outside the image rectangle."""


class DegeneratePlane(ScsurfError):
    """Plane-induced homography undefined (|d| below threshold)."""


class DegenerateConfiguration(ScsurfError):
    """Point set is collinear/coincident; similarity fit is underdetermined."""


class InsufficientPoints(ScsurfError):
    """Fewer points than the algorithm's minimum."""


# ------------------------------------------------------------ intersection
class GrazingRay(ScsurfError):
    """Ray-surface incidence too tangential for a stable Newton step."""


# ------------------------------------------------------------------ losses
class NonFiniteLoss(ScsurfError):
    """A loss term evaluated to NaN/inf. Carries the term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value


# ---------------------------------------------------------------- training
class DivergedRun(ScsurfError):
    """Too many consecutive non-finite training steps."""


class ConfigError(ScsurfError):
    """Bad key or unparsable value in a key=value config file."""


# ---------------------------------------------------------------- scene_io
class ParseError(ScsurfError):
    """Malformed scene file. Carries file path and, where known, line number."""

    def __init__(self, message: str, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}: "
            if line is not None:
                loc = f"{path}:{line}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class MissingImage(ScsurfError):
    """scene.json references an image file that does not exist."""


class InvariantViolation(ScsurfError):
    """Loaded data violates a documented invariant."""


# -------------------------------------------------------------- evaluation
class EmptySurface(ScsurfError):
    """Zero level set absent from the sampled grid."""


class EmptyInput(ScsurfError):
    """Point set or mesh with nothing in it."""


class CountMismatch(ScsurfError):
    """Estimated and reference pose lists differ in length."""
