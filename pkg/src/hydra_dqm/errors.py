"""Exception hierarchy shared by every pipeline stage.

The CLI maps these to exit code 1 and prints the class name, so the
names themselves are part of the operator-facing contract.
"""


class HydraError(Exception):
    """Base class for all errors raised by this package."""


class ConfigInvalid(HydraError):
    """Configuration file or override is malformed (CLI exit code 2)."""


# --- catalog ---

class UnknownRoot(HydraError):
    pass


class UnknownImage(HydraError):
    pass


class UnknownClass(HydraError):
    pass


class UnknownPlotType(HydraError):
    pass


class MalformedRunNumber(HydraError):
    pass


class RootUnreachable(HydraError):
    pass


class IoFailure(HydraError):
    pass


# --- labeling ---

class PermissionDenied(HydraError):
    pass


class NotAdmin(HydraError):
    pass


class PlotTypeMismatch(HydraError):
    pass


# --- dataset ---

class EmptyClass(HydraError):
    pass


class ClassTooSmall(HydraError):
    pass


# --- classifier ---

class CorruptImage(HydraError):
    pass


class DimensionMismatch(HydraError):
    pass


class NonFiniteLoss(HydraError):
    pass


class BackendUnavailable(HydraError):
    pass


# --- evaluation ---

class UnknownModel(HydraError):
    pass


class NoLabeledData(HydraError):
    pass


class NoValidationData(HydraError):
    pass


# --- gatekeeper ---

class ClassMismatch(HydraError):
    pass
