"""Errors raised by phhmm"""

import typing


class PhHmmError(RuntimeError):
    pass


class DomainError(PhHmmError, ValueError):
    pass


class ConfigurationError(PhHmmError, ValueError):
    pass


class DegenerateEmissionError(PhHmmError):

    def __init__(
            self,
            record: typing.Optional[int] = None,
            chain_id: typing.Optional[str] = None
    ):
        self.record = record
        self.chain_id = chain_id
        where = 'an observation' if record is None else f'record {record}'
        if chain_id is not None:
            where = f'{where} of chain {chain_id!r}'
        super().__init__(
            f'All emission probabilities are zero at {where}')


class StarvationError(PhHmmError):

    def __init__(
            self,
            state: int,
            weight: float,
            iteration: typing.Optional[int] = None
    ):
        self.state = state
        self.weight = weight
        self.iteration = iteration
        message = (
            f'State {state + 1} has total posterior weight {weight:.3g}')
        if iteration is not None:
            message = f'{message} at EM iteration {iteration}'
        super().__init__(message)


class SingularDesignError(PhHmmError):
    pass


class NonConvergenceError(PhHmmError):

    def __init__(self, message: str, trace: typing.Sequence = ()):
        self.trace = list(trace)
        super().__init__(message)


class DegenerateMixtureError(PhHmmError):
    pass


class SingularInformationError(PhHmmError):

    def __init__(self, message: str, direction=None):
        self.direction = direction
        super().__init__(message)


class SchemaError(PhHmmError, ValueError):

    def __init__(self, message: str, row: typing.Optional[int] = None):
        self.row = row
        if row is not None:
            message = f'row {row}: {message}'
        super().__init__(message)
