"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Raised when an input is well-formed but geometrically degenerate."""


class BudgetExceededError(RuntimeError):
    """Raised when an exhaustive search would exceed its configured budget."""


class DivergedError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, iteration, stage=None, loss=float("nan")):
        self.iteration = iteration
        self.stage = stage
        self.loss = loss
        where = f"iteration {iteration}"
        if stage is not None:
            where = f"stage {stage}, {where}"
        super().__init__(f"non-finite loss ({loss}) at {where}")
