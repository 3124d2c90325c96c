"""Exception types shared across the engine."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract.

    The message names the offending values (shapes, ranges, paths) so that
    callers and the CLI can report actionable diagnostics. The CLI maps this
    to exit status 1.
    """


class FormatError(ContractError):
    """A serialized artifact (weight container, dataset tree, image file)
    is malformed or does not match the expected schema."""
