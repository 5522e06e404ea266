"""Exception and warning types shared across the package."""


class FxcastError(Exception):
    """Base class for all package-specific errors."""


# --- market data ---

class MalformedRow(FxcastError):
    """A CSV row could not be parsed; carries the 1-based line number."""

    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class InvariantViolation(FxcastError):
    """A bar or series violates a structural invariant (e.g. low > high)."""


class DuplicateTimestamp(FxcastError):
    """Two bars share the same timestamp."""


class EmptyPartition(FxcastError):
    """A train/test split left one side empty."""


# --- indicators ---

class WindowTooLong(FxcastError):
    """Requested lookback exceeds the available series length."""


class UnknownIndicator(FxcastError):
    """An indicator spec referenced a name with no registered implementation."""


class DegenerateRange(FxcastError):
    """Price range collapses to zero where a formula needs to divide by it."""


# --- features / samples ---

class EmptyRange(FxcastError):
    """Scaler fit range contains no usable rows."""


class InsufficientData(FxcastError):
    """Not enough bars to form a single window plus horizon."""


class NotEnoughCandidates(FxcastError):
    """Feature ranking is shorter than the requested top-k."""


# --- clustering ---

class TooFewSamples(FxcastError):
    """Fewer samples than requested clusters."""


class DimensionMismatch(FxcastError):
    """Vector dimension does not match the fitted model."""


# --- forecaster ---

class ShapeMismatch(FxcastError):
    """Input window shape disagrees with the model configuration."""


class NonFiniteActivation(FxcastError):
    """A forward pass produced NaN or infinity."""


class NonFiniteGradient(FxcastError):
    """A backward pass produced NaN or infinity."""


class TrainingDiverged(FxcastError):
    """Training loss became non-finite."""


class LengthMismatch(FxcastError):
    """Paired sequences have different lengths."""


# --- backtest ---

class MisalignedForecast(FxcastError):
    """A forecast's decision time has no matching bar."""


class InsufficientHorizon(FxcastError):
    """Not enough bars after a decision bar to cover the holding horizon."""


# --- pipeline / CLI ---

class MissingArtifact(FxcastError):
    """A pipeline stage needs an artifact that an earlier stage has not written."""


class ConfigHashMismatch(FxcastError):
    """An upstream artifact was produced under a different config (stale)."""


class ConstantFeatureWarning(UserWarning):
    """A feature was constant over the scaler's fit range; it will scale to 0.5."""
