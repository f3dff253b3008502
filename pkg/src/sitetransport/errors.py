"""Exception and warning types shared across the package."""


class DataError(ValueError):
    """Problem with input data or its structural-missingness pattern."""


class MixedMissingness(DataError):
    """A record violates the all-present / all-absent pattern for its site."""


class NonBinaryField(DataError):
    """Exposure, mediator, or outcome value outside {0, 1}."""


class EmptySite(DataError):
    """A required site has no records."""


class SiteAbsent(DataError):
    """An estimand references a site label that the dataset does not contain."""


class EmptyInput(DataError):
    """A learner received zero rows."""


class InvalidFoldCount(ValueError):
    """Fold count outside 2..n."""


class NoTargetRecords(RuntimeError):
    """No records in the target site when standardizing."""


class NoExposedRecordsInSite(RuntimeError):
    """No records with the required exposure level in the required site."""


class NonPositiveRisk(RuntimeError):
    """A transported risk estimate is <= 0, so its log is undefined."""


class IncompleteGrid(RuntimeError):
    """A transport grid with absent cells was passed where a complete one is required."""


class NegativeVariance(ValueError):
    """A variance component that must be >= 0 is negative."""


class UnknownAnchorSite(KeyError):
    """An anchor site label is not part of the fitted grid."""


class ConfigError(ValueError):
    """Malformed run configuration (unknown keys, bad values)."""


class SeparationDetected(UserWarning):
    """IRLS diverged (perfect separation); the fit fell back to a ridge-stabilized solve."""


class ChainNotConverged(UserWarning):
    """Split-chain diagnostic exceeded its threshold; results reported anyway."""
