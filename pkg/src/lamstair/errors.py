"""Exception taxonomy shared across the library.

The CLI maps these onto distinct exit codes, so keep the hierarchy flat:
ParseError (malformed input files), PreconditionError (valid file, invalid
mathematical input), VerdictFailure (a produced report did not pass),
InternalError (broken internal contract).
"""


class LamstairError(Exception):
    pass


class ParseError(LamstairError):
    pass


class PreconditionError(LamstairError):
    pass


class InvalidSplitError(PreconditionError):
    pass


class NotFoundError(PreconditionError):
    pass


class InvalidTransformError(PreconditionError):
    pass


class UnsupportedError(PreconditionError):
    """Requested a composition the theory explicitly rules out (e.g. p == q)."""


class VerdictFailure(LamstairError):
    pass


class InternalError(LamstairError):
    pass
