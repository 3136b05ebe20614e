"""Exception taxonomy shared across the toolkit."""


class EpimatchError(Exception):
    """Base class for all toolkit errors."""


class DegenerateBaseline(EpimatchError):
    """Translation too small for an epipolar constraint (pure rotation)."""


class EpipoleQuery(EpimatchError):
    """Queried the epipolar line of the epipole itself."""


class DegenerateLine(EpimatchError):
    """Line with vanishing (a, b) part; no perpendicular distance exists."""


class PointAtInfinity(EpimatchError):
    """Homogeneous point with w = 0 where a finite point is required."""


class BehindCamera(EpimatchError):
    """Projected point has non-positive depth."""


class DegenerateConfiguration(EpimatchError):
    """Point configuration is rank-deficient for the requested solve."""


class AmbiguousCheirality(EpimatchError):
    """Two essential-matrix decompositions tie on the cheirality vote."""


class NotEnoughMatches(EpimatchError):
    """Fewer correspondences than the estimator's minimal sample."""


class NoValidHypothesis(EpimatchError):
    """Every RANSAC iteration produced a degenerate model."""


class EmptySupervision(EpimatchError):
    """A loss was evaluated with no supervised entries."""


class BadDimensions(EpimatchError):
    """Array shape incompatible with the configured grid."""


class NonFiniteGradient(EpimatchError):
    """An optimizer step received NaN/inf gradients."""


class NonFiniteLoss(EpimatchError):
    """A training loss evaluated to NaN/inf."""


class EmptyDatasetAfterFilter(EpimatchError):
    """Bootstrap filtering removed every training pair."""


class ZeroTranslation(EpimatchError):
    """Angular translation error undefined for a zero vector."""


class EmptyInput(EpimatchError):
    """Aggregate statistic requested over an empty collection."""


class DegeneratePose(EpimatchError):
    """Pose sampling failed to produce a usable camera pair."""
