"""Exception hierarchy shared across the package."""


class ToolDSTError(Exception):
    """Base class for every error raised by this package."""


class ParseError(ToolDSTError):
    pass


class InvariantError(ToolDSTError):
    pass


class MissingAnnotation(ToolDSTError):
    pass


class UnknownIntent(ToolDSTError):
    pass


class UnknownDomain(ToolDSTError):
    pass


class InvalidArgument(ToolDSTError):
    pass


class InternalFault(ToolDSTError):
    """A programming error: a precondition the validator should have enforced was broken."""


class ParseFailure(ToolDSTError):
    """Backend output that could not be turned into a tool call. Recoverable."""


class BackendError(ToolDSTError):
    pass


class TransportError(BackendError):
    """Network failure or HTTP >= 500. Retryable."""


class ContractError(BackendError):
    """Response body did not have the expected chat-completions shape."""


class ScriptExhausted(BackendError):
    pass


class AlignmentError(ToolDSTError):
    pass


class SplitListMissing(ParseError):
    pass


class EmptyInput(ToolDSTError):
    pass
