"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError and its kin exit 2,
ParseError exits 3, NonFiniteLossError exits 4.
"""


class DSANetError(Exception):
    """Base class for all package errors."""


class ConfigError(DSANetError):
    """Invalid configuration value or flag combination."""


class DimensionError(DSANetError):
    """Array shapes incompatible with the requested operation."""


class ContractError(DSANetError):
    """An API precondition was violated (caller bug, not data)."""


class DegenerateError(DSANetError):
    """Numerically degenerate input: zero vector, all-zero cube, negative
    entry where nonnegativity is guaranteed upstream."""


class InitError(DSANetError):
    """Decoder initialization could not find enough independent pixels."""


class ParseError(DSANetError):
    """Malformed file. Carries the byte offset of the first bad byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class NonFiniteLossError(DSANetError):
    """Training loss became NaN or infinite."""

    def __init__(self, epoch, batch, value):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )
        self.epoch = epoch
        self.batch = batch
