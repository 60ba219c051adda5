"""Exception hierarchy.

Every error carries a short ``category`` string so the CLI can print a
one-line, machine-parsable failure reason.
"""


class EtlError(Exception):
    category = "error"


class InvalidShapeError(EtlError, ValueError):
    category = "invalid-shape"


class ConfigError(EtlError, ValueError):
    category = "config"


class FormatError(EtlError, ValueError):
    category = "format"


class PairingError(EtlError):
    category = "pairing"


class SplitError(EtlError):
    category = "split"


class EvaluationError(EtlError):
    category = "evaluation"


class AnalysisError(EtlError):
    category = "analysis"


class TrainingDivergedError(EtlError, FloatingPointError):
    category = "training-diverged"

    def __init__(self, message, param=None):
        super().__init__(message)
        self.param = param
