"""Exception hierarchy.

Every error carries a short ``category`` string that the CLI prints as a
single machine-parsable line.
"""


class PievitError(Exception):
    category = "error"


class DimensionError(PievitError, ValueError):
    category = "dimension"


class ParameterError(PievitError, ValueError):
    category = "parameter"


class ContractError(PievitError, RuntimeError):
    category = "contract"


class NonFiniteError(PievitError, FloatingPointError):
    category = "non-finite"


class DegenerateInputError(PievitError, ValueError):
    category = "degenerate"


class ParseError(PievitError, ValueError):
    category = "parse"


class UnsupportedFormatError(PievitError, ValueError):
    category = "unsupported-format"


class IncompatibleCheckpointError(PievitError, ValueError):
    category = "incompatible"


class CorruptCheckpointError(PievitError, ValueError):
    category = "corrupt"


class DataError(PievitError, ValueError):
    category = "data"
