class VarJointError(Exception):
    pass


class InvalidInputError(VarJointError, ValueError):
    """Non-finite or otherwise malformed numerical input."""


class ShapeError(VarJointError, ValueError):
    pass


class UnreachableRatioError(VarJointError, ValueError):
    pass


class StaleTapeError(VarJointError, RuntimeError):
    """The parameters recorded on a tape were modified after recording."""


class FormatError(VarJointError, ValueError):
    """Malformed array file or checkpoint."""


class ConfigError(VarJointError, ValueError):
    pass


class NumericalError(VarJointError, FloatingPointError):
    pass


class InvariantViolation(VarJointError, AssertionError):
    pass
