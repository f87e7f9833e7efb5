"""Exception hierarchy for protocol and simulation failures.

Every protocol-level error carries a stable ``code`` string that the
simulator and CLI use when recording per-device outcomes.
"""


class GkeError(Exception):
    """Base class for all protocol and harness errors."""

    code = "error"


class ParameterSearchExhausted(GkeError):
    """No safe-prime group found within the bounded attempt count."""

    code = "parameter-search-exhausted"


class HashToExponentFailure(GkeError):
    """The rejection counter overflowed; the digest is effectively broken."""

    code = "internal-failure"


class MaskDecodeError(GkeError):
    """Decoded mask bytes fall outside [1, q-1]."""

    code = "mask-decode-failure"


class SubgroupViolation(GkeError):
    """A received value is not a member of the order-q subgroup."""

    code = "subgroup-violation"


class StaleSessionId(GkeError):
    """A device already used this session id and refuses to reply again."""

    code = "stale-sid"


class WrongSessionId(GkeError):
    """A message carries a session id that does not match the session."""

    code = "wrong-sid"


class BadSignature(GkeError):
    """A contribution signature failed verification."""

    code = "bad-signature"

    def __init__(self, message: str, public_key: bytes = b""):
        super().__init__(message)
        self.public_key = public_key


class BadBroadcastSignature(GkeError):
    """The broadcast signature failed verification."""

    code = "bad-broadcast-signature"


class EmptyContributions(GkeError):
    """No contributions arrived; the session cannot be finalized."""

    code = "empty-contributions"


class ManufacturerNotRepresented(GkeError):
    """No slot in the broadcast matches this device's manufacturer."""

    code = "manufacturer-not-represented"


class DuplicateManufacturer(GkeError):
    """A joining contribution collides with an existing slot."""

    code = "duplicate-manufacturer"


class UnknownLeaver(GkeError):
    """The leaving value does not match any slot of the old session."""

    code = "unknown-leaver"


class EmptyGroup(GkeError):
    """Removing the last manufacturer would leave nobody to re-key."""

    code = "empty-group"


class UnknownSessionId(GkeError):
    """No stored broadcast exists for the requested session id."""

    code = "unknown-sid"


class InvariantViolation(GkeError):
    """A runtime invariant check failed on otherwise well-formed data."""

    code = "invariant-violation"
