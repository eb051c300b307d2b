"""Exception hierarchy shared across the toolkit.

Every error raised on a documented contract derives from ChronoriskError so
the CLI can catch one type and exit with a single machine-parsable line.
"""


class ChronoriskError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(ChronoriskError):
    """Malformed criterion pattern, schema, or config file."""


class InvalidVitalsError(ChronoriskError):
    """Vital-sign values violate a physiological precondition."""


class ParseError(ChronoriskError):
    """Patient bundle fails structural validation.

    ``json_path`` points at the offending field, e.g. ``$.encounters[2].date``.
    """

    def __init__(self, json_path: str, message: str):
        super().__init__(f"{json_path}: {message}")
        self.json_path = json_path


class CohortError(ChronoriskError):
    """Cohort construction cannot proceed (empty class, too few examples)."""


class TrainingError(ChronoriskError):
    """Tree or forest induction received unusable data."""


class InferenceError(ChronoriskError):
    """Input vector does not match the model's feature schema."""


class ModelCorruptionError(ChronoriskError):
    """A model structure invariant (e.g. positive node cover) is broken."""


class OracleScopeError(ChronoriskError):
    """Brute-force Shapley enumeration asked for more features than it can do."""


class AttributionError(ChronoriskError):
    """Global importance cannot be computed (empty or degenerate reference)."""


class SurrogateError(ChronoriskError):
    """Surrogate tree cannot be fit under the current importance gate."""


class BundleError(ChronoriskError):
    """Model bundle failed to load: version or schema-hash mismatch."""


class MetricError(ChronoriskError):
    """Metric undefined for the given inputs (e.g. single-class AUROC)."""


class ServiceError(ChronoriskError):
    """Registry or request-level service failure."""
