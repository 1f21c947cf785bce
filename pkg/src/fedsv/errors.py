"""Exception types raised across the simulator."""


class FedSVError(Exception):
    pass


class ShapeError(FedSVError, ValueError):
    """Input dimensions or vector lengths do not line up."""


class EmptyDataError(FedSVError, ValueError):
    pass


class DivergenceError(FedSVError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, round_idx=None, client_id=None):
        self.epoch = epoch
        self.round_idx = round_idx
        self.client_id = client_id
        where = f"epoch {epoch}"
        if client_id is not None:
            where = f"client {client_id}, {where}"
        if round_idx is not None:
            where = f"round {round_idx}, {where}"
        super().__init__(f"non-finite loss at {where}")


class IdxFormatError(FedSVError, ValueError):
    """Bad magic number in an IDX file."""


class IdxLengthError(FedSVError, ValueError):
    """IDX payload shorter than its header promises."""


class IdxConsistencyError(FedSVError, ValueError):
    """Image and label files disagree on the sample count."""


class PartitionError(FedSVError, ValueError):
    pass


class CapacityError(FedSVError, ValueError):
    """Problem too large for exhaustive enumeration."""


class EmptySelectionError(FedSVError, ValueError):
    pass


class NotApplicableError(FedSVError, ValueError):
    pass


class ConfigError(FedSVError, ValueError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if key is not None:
            prefix.append(f"field '{key}'")
        super().__init__(f"{': '.join([', '.join(prefix), message]) if prefix else message}")
