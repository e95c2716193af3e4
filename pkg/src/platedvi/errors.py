"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericFault(ArithmeticError):
    """A NaN appeared where a finite value is required (gradients, ELBO)."""


class DetachedError(RuntimeError):
    """A tensor that is not recorded on any tape was asked for gradients."""


class ModelError(ValueError):
    """Malformed model definition or trace request."""


class UnmatchedVariableError(ModelError):
    """The q-model declares a variable the p-model does not have."""


class UncoveredLatentError(ModelError):
    """A p-model latent has neither a q factor nor an observation."""
