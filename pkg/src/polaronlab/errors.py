"""Exception types shared across polaronlab."""


class ValidationError(ValueError):
    """A physical parameter or input failed validation.

    ``field`` names the offending parameter (or config key) when known.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = ""
        if field is not None:
            where += f"[{field}] "
        if line is not None:
            where += f"(line {line}) "
        super().__init__(where + message)


class ConvergenceError(RuntimeError):
    """A numerical procedure failed to reach its tolerance.

    ``achieved`` holds the best tolerance reached, when meaningful.
    """

    def __init__(self, message, achieved=None):
        self.achieved = achieved
        if achieved is not None:
            message = f"{message} (achieved {achieved:.3g})"
        super().__init__(message)
