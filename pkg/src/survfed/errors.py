"""Exception hierarchy shared across the package."""


class SurvfedError(Exception):
    """Base class for all package errors."""


class InvalidInput(SurvfedError):
    """Malformed or empty input data."""


class InvalidHazard(InvalidInput):
    """Cumulative hazard with a jump > 1 (survival would go negative)."""


class InvalidFoldCount(InvalidInput):
    """Requested number of cross-fitting folds is out of range."""


class DegenerateFit(SurvfedError):
    """Model cannot be fit (e.g. no events of the requested type)."""


class SingularDesign(SurvfedError):
    """Design matrix is rank deficient beyond constant columns."""


class NonConvergence(SurvfedError):
    """Iterative fit did not converge within the iteration budget."""

    def __init__(self, message, beta=None, grad_norm=None):
        super().__init__(message)
        self.beta = beta
        self.grad_norm = grad_norm


class DegeneratePropensity(SurvfedError):
    """Only one treatment arm present; propensity pinned at the clip boundary."""


class CoarseRatioFailure(SurvfedError):
    """Coarse-summary density ratio solve failed (singular covariance)."""


class PositivityViolation(SurvfedError):
    """A nuisance evaluation fell below the positivity floor after clipping."""


class EmptyTarget(SurvfedError):
    """No target-site observations available."""


class EmptySite(SurvfedError):
    """A requested source site has no observations."""


class EmptyTable(SurvfedError):
    """Influence table slice is missing or empty."""


class WrongBundleMode(SurvfedError):
    """Nuisance bundle was built in a different mode than required."""


class NumericalError(SurvfedError):
    """Quadratic pieces failed numerical sanity checks (e.g. non-PSD Gram)."""


class BootstrapDegenerate(SurvfedError):
    """Too many bootstrap replicates were skipped."""


class SiteUnavailable(SurvfedError):
    """A federated site did not respond within the timeout."""


class ProtocolError(SurvfedError):
    """Wire message violated the protocol (version or schema mismatch)."""
