"""Exception hierarchy shared across the package."""


class DimensionError(ValueError):
    """Operand extents do not line up."""


class DomainError(ValueError):
    """An argument lies outside the domain of a density or operation."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity.

    ``row`` is the index of the first offending leading-axis entry when the
    output has one, else ``None``.
    """

    def __init__(self, op, row=None):
        self.op = op
        self.row = row
        where = "" if row is None else f" (row {row})"
        super().__init__(f"non-finite output from {op}{where}")


class SamplerDivergence(RuntimeError):
    def __init__(self, chain, step=None):
        self.chain = chain
        self.step = step
        at = "" if step is None else f" at step {step}"
        super().__init__(f"Langevin chain {chain} diverged{at}")


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration, detail="", checkpoint=None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        msg = f"training diverged at iteration {iteration}"
        if detail:
            msg += f": {detail}"
        if checkpoint is not None:
            msg += f" (last checkpoint: {checkpoint})"
        super().__init__(msg)


class DatasetParseError(ValueError):
    def __init__(self, offset, reason):
        self.offset = offset
        super().__init__(f"malformed dataset at byte {offset}: {reason}")


class ArtifactMismatch(ValueError):
    """A checkpoint or cached artifact does not match what was expected."""
