class VoxelHeightError(Exception):
    """Base error; carries the process exit code used by the CLI"""

    exit_code: int = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigurationError(VoxelHeightError, ValueError):
    pass


class CalibrationError(ConfigurationError):
    pass


class ShapeError(VoxelHeightError, ValueError):
    pass


class PartitionError(ShapeError):
    pass


class BehindCameraError(VoxelHeightError, ValueError):
    pass


class NumericalError(VoxelHeightError, ArithmeticError):
    pass


class OracleError(NumericalError):
    pass


class FormatError(VoxelHeightError):
    pass


class MissingInputError(VoxelHeightError):
    exit_code = 3


class VerificationFailure(VoxelHeightError):
    exit_code = 1


def describe_validation_error(exc) -> str:
    """First message of a pydantic ValidationError, unwrapped to the validator's own text"""
    err = exc.errors()[0]
    original = err.get("ctx", {}).get("error")
    if original is not None:
        return str(original)
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return f"{loc}: {err['msg']}" if loc else err["msg"]
