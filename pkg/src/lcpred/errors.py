"""Exception types shared across the pipeline stages."""


class PipelineError(Exception):
    """Base class for all pipeline errors."""


class MissingColumn(PipelineError):
    def __init__(self, name, path=None):
        self.name = name
        self.path = path
        super().__init__(f"missing required column {name!r}" + (f" in {path}" if path else ""))


class NonMonotoneFrames(PipelineError):
    def __init__(self, track_id):
        self.track_id = track_id
        super().__init__(f"track {track_id}: frame indices are not strictly increasing and gap-free")


class UnknownLaneId(PipelineError):
    def __init__(self, lane_id):
        self.lane_id = lane_id
        super().__init__(f"lane id {lane_id!r} not present in the lane configuration")


class ParseError(PipelineError):
    pass


class NotConverged(PipelineError):
    def __init__(self, max_iterations):
        self.max_iterations = max_iterations
        super().__init__(f"SMO did not converge within {max_iterations} iterations")


class DegenerateInput(PipelineError):
    pass


class EmptyBoundary(PipelineError):
    pass


class TooFewPoints(PipelineError):
    pass


class SingularProjection(PipelineError):
    pass


class InvalidScene(PipelineError):
    pass


class TooShort(PipelineError):
    pass


class EmptySet(PipelineError):
    pass


class InsufficientClass(PipelineError):
    def __init__(self, tag, label, available, requested):
        self.tag = tag
        self.label = label
        self.available = available
        self.requested = requested
        super().__init__(
            f"population {tag!r}: class {label} has {available} samples, {requested} requested"
        )


class InvalidConfig(PipelineError):
    pass


class ShapeMismatch(PipelineError):
    pass


class InvalidParams(PipelineError):
    pass


class StageError(PipelineError):
    """Wraps a module error with the name of the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
