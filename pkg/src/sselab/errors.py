"""Exception hierarchy for the sselab workbench."""


class WorkbenchError(Exception):
    """Base class for all sselab errors."""


# crypto
class PlaintextTooLong(WorkbenchError):
    """Plaintext exceeds the padding target."""


class DecryptError(WorkbenchError):
    """Authentication failure or malformed ciphertext."""


class DomainError(WorkbenchError):
    """Permutation input outside its domain."""


# traced store
class NestedOp(WorkbenchError):
    """begin_op called while another op is open."""


class OutOfBounds(WorkbenchError):
    """Access outside the store's word range."""


# allocator
class WeightOutOfRange(WorkbenchError):
    """Ball weight outside [0, 1]."""


class DuplicateBall(WorkbenchError):
    """Live ball with this identity already present."""


class BallNotFound(WorkbenchError):
    """No live ball with this identity in either candidate bin."""


class WeightDecrease(WorkbenchError):
    """Updates may only grow a ball's weight."""


# schemes
class CapacityExceeded(WorkbenchError):
    """A bin or table ran out of room during setup."""


class UpdateRejected(WorkbenchError):
    """An update was reverted because a bin would overflow."""


class PendingLost(WorkbenchError):
    """A stashed second flow was dropped without being delivered."""


class UnknownKeyword(WorkbenchError):
    """Query for a keyword the table has no entry for."""


# oram
class IndexOutOfRange(WorkbenchError):
    """Block index outside [1, n]."""


class BlockTooSmall(WorkbenchError):
    """Block size below the level-structure bound."""


# workbench
class BadSpec(WorkbenchError):
    """Malformed workload specification."""
