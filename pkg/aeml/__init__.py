from typing import Tuple, Union

import numpy as np


TPlumbumRunReturn = Tuple[int, Union[str, bytes], Union[str, bytes]]
TField = np.ndarray
TStageKey = Tuple[int, int]

RK_STAGES = 4


class AemlError(Exception):
    pass


class ConfigError(AemlError):
    pass


class ShapeError(AemlError):
    pass


class InvalidMediumError(AemlError):
    pass


class DataError(AemlError):
    pass


class FormatError(AemlError):
    pass


class NumericalError(AemlError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, step: int, message: str = "") -> None:
        self.step = step
        super().__init__(message or f"Non-finite state detected at timestep {step}.")


class SolverError(NumericalError):
    pass


class StagnationError(NumericalError):
    pass


class StorageContractError(AemlError):
    pass


class OrderingError(StorageContractError):
    pass


def plumbum_msg(command_exit: TPlumbumRunReturn) -> str:
    return (
        f"Exit code {command_exit[0]}.\n"
        f"Command output:\n{command_exit[1]!r}."
        f"\nError msg:\n{command_exit[2]!r}\n"
    )


def check_exit(ret: TPlumbumRunReturn) -> TPlumbumRunReturn:
    if ret[0] != 0:
        raise FormatError(f"Error returned by external codec.\n{plumbum_msg(ret)}")
    return ret
