"""Exception hierarchy shared by the library and the CLI.

Every error carries a short machine-readable ``code`` and a ``context`` dict so
the CLI can serialize it to stderr as ``{code, message, context}``.
"""


class WlraError(Exception):
    code = "error"
    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self):
        return {"code": self.code, "message": self.message, "context": self.context}


class InputError(WlraError):
    code = "input-error"


class ShapeError(WlraError):
    code = "shape-error"


class RankError(WlraError):
    code = "rank-error"


class FormatError(WlraError):
    code = "format-error"


class DivergenceError(WlraError):
    code = "divergence-error"

    def __init__(self, message, step, **context):
        super().__init__(message, step=step, **context)
        self.step = step


class BudgetError(WlraError):
    code = "budget-error"

    def __init__(self, message, minimum, **context):
        super().__init__(message, minimum=minimum, **context)
        self.minimum = minimum


class EmptyFilterError(WlraError):
    code = "empty-filter-error"


class UsageError(WlraError):
    code = "usage-error"
    exit_code = 2
