"""Exception types shared across the package.

Validation problems (bad inputs, malformed files) derive from ``ValidationError``;
degenerate-but-well-formed data (nothing to train on, empty metric region) from
``DegenerateData``. The CLI maps these to exit codes 2 and 3.
"""


class GnfrError(Exception):
    pass


class ValidationError(GnfrError, ValueError):
    pass


class DegenerateData(GnfrError):
    pass


class MissingFile(ValidationError, FileNotFoundError):
    pass


class BadPose(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class BadBounds(ValidationError):
    pass


class BadSpec(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class DegenerateTransform(ValidationError):
    pass


class BadCheckpoint(ValidationError):
    pass


class MisalignedScenes(ValidationError):
    pass


class NoMask(ValidationError):
    pass


class TooFewViews(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class DivergedLoss(GnfrError, ArithmeticError):
    pass


class NoTrainableTargets(DegenerateData):
    pass


class EmptyRegion(DegenerateData):
    pass
