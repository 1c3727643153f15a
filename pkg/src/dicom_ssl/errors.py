"""Exception hierarchy. Each class carries a module-qualified error code that
the CLI emits in its machine-readable error record."""


class DicomSSLError(Exception):
    code = "dicom_ssl.error"


class ConfigError(DicomSSLError, ValueError):
    code = "config.invalid"

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [message])


class DataError(DicomSSLError):
    code = "data.load"


class CheckpointError(DicomSSLError):
    code = "checkpoint.corrupt"


class ShapeMismatchError(CheckpointError):
    code = "checkpoint.shape_mismatch"

    def __init__(self, mismatches):
        self.mismatches = list(mismatches)
        lines = "\n".join(f"  {m}" for m in self.mismatches)
        super().__init__(f"checkpoint incompatible with config:\n{lines}")


class UndefinedMetricError(DicomSSLError, ValueError):
    code = "metrics.undefined"


class NonFiniteLossError(DicomSSLError, FloatingPointError):
    code = "pretrain.nonfinite_loss"

    def __init__(self, components):
        self.components = dict(components)
        bad = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"non-finite loss: {bad}")
