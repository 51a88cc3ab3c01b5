"""Exception hierarchy shared by all modules."""


class AnkleReduceError(Exception):
    """Base class for every error raised by this package."""


class InputError(AnkleReduceError):
    """Bad input file or argument (CLI exit code 2)."""


class ComputationError(AnkleReduceError):
    """Numerical procedure could not produce a result (CLI exit code 1)."""


# geometry
class DegenerateVertex(ComputationError):
    def __init__(self, index: int, reason: str = "no incident area"):
        self.index = int(index)
        super().__init__(f"vertex {self.index}: {reason}")


# a mesh that parses but has nothing in it cannot be computed on; the CLI
# contract treats this as a computation failure rather than a usage error
class EmptyMesh(ComputationError):
    pass


class NonTriangular(InputError):
    pass


class InvalidMesh(InputError):
    pass


class NotRigid(ComputationError):
    pass


# volume
class TooSmall(InputError):
    pass


class BadMagic(InputError):
    pass


class UnsupportedDatatype(InputError):
    pass


class DimensionError(InputError):
    pass


class OpenMesh(InputError):
    pass


# shape model
# shapes that cannot be put in correspondence fail the model build (exit 1)
class TopologyMismatch(ComputationError):
    pass


class InsufficientSamples(InputError):
    pass


class LengthMismatch(InputError):
    pass


class SchemaVersionMismatch(InputError):
    pass


class CorruptModel(InputError):
    pass


# fitting
class InsufficientEdges(ComputationError):
    pass


class TooFewTargets(ComputationError):
    pass


# registration
class DegenerateConfiguration(ComputationError):
    pass


class NumericalCollapse(ComputationError):
    """sigma^2 underflowed; ``report`` holds the last stable iterate."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


# phantom
class PlaneMisses(InputError):
    pass
