"""Exception types shared across the package.

Hierarchy is shallow on purpose: `DataError` covers everything caused by bad
files or bad records (CLI exit code 2), `NumericError` covers non-finite math
(CLI exit code 3), and plain ValueError/TypeError remain for programmer errors.
"""


class DlipError(Exception):
    """Base class for package-specific errors."""


class DataError(DlipError):
    """Bad input data: malformed files, schema violations, key mismatches."""


class NumericError(DlipError):
    """Numeric failure: non-finite values where finite ones are required."""


# ---- captions ----

class MalformedRecord(DataError):
    """A dataset line failed validation.

    Args:
        line_no: 1-based line number in the source file.
        field: name of the offending field ("json" for parse failures).
        reason: human-readable explanation.
    """

    def __init__(self, line_no, field, reason):
        self.line_no = line_no
        self.field = field
        self.reason = reason
        super().__init__(f"line {line_no}, field {field!r}: {reason}")


class UnknownSource(DataError):
    """A source index does not exist in the record."""


class EmptySet(DataError):
    """Sampling was requested from an empty candidate set."""


# ---- encoders ----

class DimensionMismatch(DlipError):
    """Parameter or input arrays have shapes the encoder cannot consume."""


class ShapeError(DlipError):
    """Image dimensions are not divisible by the patch size."""


class DegenerateVector(NumericError):
    """A vector with norm <= 1e-12 reached l2_normalize."""


class VersionMismatch(DataError):
    """A checkpoint was written by an incompatible format version."""


class CorruptCheckpoint(DataError):
    """A checkpoint file is truncated or fails structural validation."""


# ---- losses ----

class NonFiniteInput(NumericError):
    """A loss input contains NaN or Inf."""


class ShapeMismatch(DlipError):
    """Loss inputs disagree on batch size or embedding width."""


# ---- trainer ----

class NonFiniteLoss(NumericError):
    """Training produced a non-finite loss; carries the offending batch.

    Args:
        step: global step at which the loss went non-finite.
        image_ids: ids of the images in the offending batch.
    """

    def __init__(self, step, image_ids):
        self.step = step
        self.image_ids = list(image_ids)
        super().__init__(
            f"non-finite loss at step {step}; batch ids: {', '.join(self.image_ids)}"
        )


class UnknownConfigKey(DataError):
    """A run config file contains a key that is not a TrainConfig field."""


# ---- eval ----

class EmptyGallery(DataError):
    """Retrieval was asked to rank an empty gallery."""


class NoClasses(DataError):
    """Zero-shot classification needs at least one class embedding."""
