"""Exception types shared across the toolkit."""


class ValidationError(Exception):
    """An input failed structural validation (file, manifest, config, or plan)."""


class TensorFormatError(ValidationError):
    """A tensor file is malformed: bad magic, unparseable header, or truncated payload."""


class UnsupportedTensorError(ValidationError):
    """A tensor file is well-formed but uses an unsupported dtype, order, or version."""


class TensorDataError(ValidationError):
    """A tensor payload contains non-finite values."""


class ManifestError(ValidationError):
    """A calibration manifest failed validation."""


class PlanError(ValidationError):
    """A quantization plan is inconsistent with the data it is applied to."""
