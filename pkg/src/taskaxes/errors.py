"""Exception types shared across the package.

Every error raised by the library derives from TaskAxesError so callers
(and the CLI) can catch the whole family at once.
"""


class TaskAxesError(Exception):
    def annotate(self, context):
        """Prefix the message with caller context, keeping the concrete type."""
        if self.args:
            self.args = (f"{context}: {self.args[0]}",) + self.args[1:]
        else:
            self.args = (context,)
        return self


class ConfigError(TaskAxesError):
    """Invalid configuration value or unstable gain/stiffness/dt combination."""


class FileFormatError(TaskAxesError):
    """Binary or JSON input file does not match the documented layout."""


# geometry -------------------------------------------------------------

class NonPositiveDepth(TaskAxesError):
    """Depth value must be strictly positive."""


class OutOfBounds(TaskAxesError):
    """Pixel coordinate lies outside the image."""


# feature matching -----------------------------------------------------

class DimMismatch(TaskAxesError):
    """Descriptor dimensions of the two operands disagree."""


class ZeroReferenceDescriptor(TaskAxesError):
    """Reference descriptor has zero norm, cosine similarity undefined."""


class NoValidPixels(TaskAxesError):
    """Similarity map has no valid candidate pixels."""


class NonPositiveTemperature(TaskAxesError):
    """Soft-argmax temperature must be > 0."""


# grounding ------------------------------------------------------------

class MatchBelowThreshold(TaskAxesError):
    """Best match score fell under the configured reliability threshold."""

    def __init__(self, message, score):
        super().__init__(message)
        self.score = score


class DegenerateAxis(TaskAxesError):
    """Two keypoints coincide, no direction can be derived."""


class InsufficientNeighbors(TaskAxesError):
    """Too few cloud points inside the query radius."""


class DegenerateNeighborhood(TaskAxesError):
    """Local covariance has no unique principal direction for the request."""


# controllers / skills -------------------------------------------------

class UnresolvedBinding(TaskAxesError):
    """Controller binding label missing from the grounded parameters."""


class EmptyWaypointList(TaskAxesError):
    """Waypoint controller requires at least one offset."""


class SkillSyntaxError(TaskAxesError):
    """Skill source text failed to parse; carries line/column and expectation."""

    def __init__(self, line, col, expected):
        super().__init__(f"line {line}, col {col}: expected {expected}")
        self.line = line
        self.col = col
        self.expected = expected


class SkillValidationError(TaskAxesError):
    """Well-formed text with an invalid skill structure."""

    def __init__(self, message, line=None, col=None):
        if line is not None:
            message = f"line {line}, col {col}: {message}"
        super().__init__(message)
        self.line = line
        self.col = col


class UnknownControllerKind(SkillValidationError):
    pass


class UnboundSymbol(SkillValidationError):
    pass


class PriorityOverflow(SkillValidationError):
    pass


class DuplicateLabel(SkillValidationError):
    pass


# simulator ------------------------------------------------------------

class EmptyScene(TaskAxesError):
    """Scene contains no renderable points."""


class GraspTooFar(TaskAxesError):
    """End effector is not close enough to the grasp keypoint."""

    def __init__(self, message, distance):
        super().__init__(message)
        self.distance = distance
