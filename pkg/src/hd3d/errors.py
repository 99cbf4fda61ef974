"""Exception hierarchy.

Every error carries a ``category`` that the CLI maps onto its exit code.
"""

EXIT_CODES = {"usage": 2, "io": 3, "data-invalid": 4, "numeric-failure": 5}


class HD3DError(Exception):
    category = "data-invalid"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]


# tensor-core / diff-ops
class ShapeMismatch(HD3DError, ValueError):
    pass


class SpatialMismatch(ShapeMismatch):
    pass


class EmptyInput(HD3DError, ValueError):
    pass


class CropTooLarge(ShapeMismatch):
    pass


class KernelLargerThanInput(ShapeMismatch):
    pass


class MissingRunningStats(HD3DError):
    pass


class InvalidRate(HD3DError, ValueError):
    pass


class LabelOutOfRange(HD3DError, ValueError):
    pass


class UnboundInput(HD3DError, KeyError):
    category = "usage"


class BackwardBeforeForward(HD3DError, RuntimeError):
    category = "usage"


class NonFiniteError(HD3DError, FloatingPointError):
    category = "numeric-failure"


class NonFiniteGradient(NonFiniteError):
    pass


# net-builder
class InvalidSpec(HD3DError, ValueError):
    pass


# volume-io
class FormatError(HD3DError):
    category = "io"


class MalformedHeader(FormatError):
    pass


class SizeMismatch(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class BadMagic(FormatError):
    pass


class CompressedInput(FormatError):
    pass


class CorruptBlob(FormatError):
    pass


class SpecMismatch(HD3DError):
    pass


# phantom-gen / train / metrics
class DegenerateGeometry(HD3DError, ValueError):
    pass


class NoVoxelsOfClass(HD3DError, LookupError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class EmptySurface(HD3DError, ValueError):
    pass
