class UniSplatError(RuntimeError):
    pass


class DegenerateRotation(UniSplatError):
    pass


class FanOutMismatch(UniSplatError):
    pass


class NonFiniteInput(UniSplatError):
    pass


class NoForwardTape(UniSplatError):
    pass


class BadPatchGrid(UniSplatError):
    pass


class ShapeError(UniSplatError):
    pass


class TapeError(UniSplatError):
    pass


class InvalidCamera(UniSplatError):
    pass


class ConfigError(UniSplatError):
    pass


class SceneError(UniSplatError):
    pass


class CheckpointError(UniSplatError):
    pass


class NonFiniteLoss(UniSplatError):
    def __init__(self, term: str, step: int | None = None) -> None:
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term '{term}'{where}")


class NonFiniteGrad(UniSplatError):
    def __init__(self, param: str, step: int | None = None) -> None:
        self.param = param
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite gradient for parameter '{param}'{where}")
