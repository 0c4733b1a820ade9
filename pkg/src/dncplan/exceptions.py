"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can map
failures to exit statuses and report lines without string matching.
"""


class DncError(Exception):
    code = "ERROR"

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details

    def __str__(self):
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class InfeasibleError(DncError):
    """No selection satisfies the latency budget.

    ``min_total_dt`` is the tightest total runtime change any selection can
    reach (sum of per-block minima), which tells the caller how far the budget
    has to move.
    """

    code = "INFEASIBLE"

    def __init__(self, message="", budget=None, min_total_dt=None):
        super().__init__(message, budget=budget, min_total_dt=min_total_dt)
        self.budget = budget
        self.min_total_dt = min_total_dt


class ResolutionTooCoarseError(DncError):
    code = "RESOLUTION_TOO_COARSE"


class SearchSpaceTooLargeError(DncError):
    code = "TOO_LARGE"


class EmptySpaceError(DncError):
    code = "EMPTY_SPACE"

    def __init__(self, message="", block_index=None):
        super().__init__(message, block_index=block_index)
        self.block_index = block_index


class GraphCycleError(DncError):
    code = "CYCLE"


class DimMismatchError(DncError, ValueError):
    code = "DIM_MISMATCH"


class MissingTagError(DncError, ValueError):
    code = "MISSING_TAG"


class ShapeMismatchError(DncError, ValueError):
    code = "SHAPE_MISMATCH"


class MissingTensorError(DncError, KeyError):
    code = "MISSING_TENSOR"

    def __str__(self):
        return DncError.__str__(self)


class AllFixedError(DncError):
    code = "ALL_FIXED"


class InvalidPlanError(DncError, ValueError):
    code = "INVALID_PLAN"


class DegenerateSampleError(DncError):
    code = "DEGENERATE"


class EmptyMaskError(DncError, ValueError):
    code = "EMPTY_MASK"


class ParseError(DncError, ValueError):
    code = "PARSE_ERROR"

    def __init__(self, message="", path=None, line=None):
        super().__init__(message, path=path, line=line)
        self.path = path
        self.line = line

    def __str__(self):
        where = ""
        if self.path is not None:
            where = f"{self.path}:"
        if self.line is not None:
            where += f"{self.line}:"
        msg = Exception.__str__(self)
        return f"{self.code}: {where} {msg}" if where else f"{self.code}: {msg}"
