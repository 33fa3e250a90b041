class GazePromptError(ValueError):
    exit_code = 1


class ConfigError(GazePromptError):
    exit_code = 2

    def __init__(self, message, key_path=None):
        if key_path:
            message = f'{key_path}: {message}'
        super().__init__(message)
        self.key_path = key_path


class RangeError(GazePromptError):
    exit_code = 2


class ShapeError(GazePromptError):
    pass


class InvariantError(GazePromptError):
    pass


class DegenerateError(GazePromptError):
    """
    Normalization of a (near) zero vector was requested.
    """
    exit_code = 3


class SingularConfigurationError(GazePromptError):
    exit_code = 3


class TrainingDivergedError(GazePromptError):
    exit_code = 3

    def __init__(self, step, breakdown):
        super().__init__(f'Non-finite loss at step {step}: {breakdown}')
        self.step = step
        self.breakdown = breakdown


class UndefinedRankError(GazePromptError):
    exit_code = 3


class GradientCheckFailure(GazePromptError):
    exit_code = 4
