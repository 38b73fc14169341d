"""Exception types shared across slotlab."""


class SlotLabError(Exception):
    """Base class for all slotlab errors."""


class ShapeMismatch(SlotLabError):
    """Tensor shapes are incompatible for the requested operation."""


class NonScalarRoot(SlotLabError):
    """backward() was called on a non-scalar node."""


class DoubleBackward(SlotLabError):
    """backward() was called twice on the same root without a reset."""


class NonFiniteGradient(SlotLabError):
    """A gradient contained NaN or Inf; the run should abort."""


class NonFiniteActivation(SlotLabError):
    """A forward activation contained NaN or Inf; signals divergence."""


class RejectionBudgetExceeded(SlotLabError):
    """Constraint rejection sampling exhausted its budget (over-crowded config)."""


class DegenerateObject(SlotLabError):
    """An object rasterized to zero pixels (image_side too small for size range)."""


class DegenerateSegmentation(SlotLabError):
    """A ground-truth object has zero IoU with every slot segment."""


class RankDeficient(SlotLabError):
    """A design or covariance matrix has insufficient rank."""


class InsufficientSamples(SlotLabError):
    """Too few pooled samples for a statistically meaningful score."""
