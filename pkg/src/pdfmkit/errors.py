"""Exception hierarchy shared by every stage of the pipeline."""


class PdfmError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PdfmError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ValidationError(PdfmError, ValueError):
    pass


class ShapeError(PdfmError, ValueError):
    pass


class SchemaError(PdfmError, ValueError):
    pass


class NormalizationError(PdfmError, ValueError):
    pass


class ReferentialIntegrityError(PdfmError, ValueError):
    pass


class AssemblyError(PdfmError, ValueError):
    pass


class LookupFailure(PdfmError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class JoinError(PdfmError, KeyError):
    def __init__(self, message, missing=()):
        self.missing = list(missing)
        super().__init__(message)

    def __str__(self):
        return str(self.args[0])


class TrainingError(PdfmError, RuntimeError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class SingularityError(PdfmError, ArithmeticError):
    pass


class FitError(PdfmError, RuntimeError):
    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(message)


class ForecastError(PdfmError, ValueError):
    pass


class MetricError(PdfmError, ValueError):
    pass


class MappingError(PdfmError, ValueError):
    pass


class DataError(PdfmError, ValueError):
    pass


class LeakageError(PdfmError, RuntimeError):
    """A training path asked for data it must never see."""


class StaleArtifactError(PdfmError, RuntimeError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"{message}; rerun stage '{stage}'")
