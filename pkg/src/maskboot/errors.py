"""Exception hierarchy shared across the package."""


class MaskbootError(Exception):
    """Base class for all package errors."""


class ConfigError(MaskbootError):
    """Invalid or inconsistent configuration; names the offending key(s)."""


class ContractError(MaskbootError):
    """A caller violated a documented precondition (shapes, structure)."""


class EmptyMaskError(MaskbootError):
    """Mask pooling was asked to pool over a mask with no active cells."""


class DegenerateBatchError(MaskbootError):
    """No positive pair survived in a contrastive batch; the step is skipped."""


class InfeasibleClusteringError(MaskbootError):
    """Requested more clusters than there are data rows."""


class DataFormatError(MaskbootError):
    """On-disk dataset is malformed: bad version, checksum, or missing files."""


class CheckpointError(MaskbootError):
    """Checkpoint file is corrupt or has an unsupported format version."""
