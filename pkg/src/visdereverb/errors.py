"""Exception types shared across the pipeline.

Each carries the process exit code the command line maps it to.
"""


class PipelineError(Exception):
    exit_code = 1


class UsageError(PipelineError, ValueError):
    exit_code = 2


class DataError(PipelineError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class NumericError(PipelineError, ArithmeticError):
    exit_code = 4
