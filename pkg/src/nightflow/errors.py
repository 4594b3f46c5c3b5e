class DegenerateInputError(ValueError):
    """Input is well-formed but leaves nothing to compute on (empty mask, missing class)."""


class CheckpointError(ValueError):
    """Checkpoint has the wrong version, stage tag or contents."""


class NumericError(FloatingPointError):
    """A loss term came out NaN or infinite."""
