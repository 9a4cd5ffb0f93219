"""Exception types shared across the simulator."""

from __future__ import annotations


class ParameterError(ValueError):
    """Invalid argument values (dimensions, fractions, counts)."""


class FormatError(ValueError):
    """Malformed on-disk input (IDX files, config files)."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(ValueError):
    """Bad experiment configuration; ``key`` names the offending dotted path."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CoverageGap(RuntimeError):
    """The public set lacks samples for some classes that need compensation."""

    def __init__(self, classes):
        self.classes = frozenset(int(c) for c in classes)
        super().__init__(f"public dataset has no samples of classes {sorted(self.classes)}")


class CoverageGapWarning(UserWarning):
    pass


class RoundError(RuntimeError):
    """A failure inside the round loop, tagged with the round and strategy."""

    def __init__(self, round_index: int, strategy: str, cause: Exception):
        super().__init__(f"round {round_index}, strategy {strategy}: {type(cause).__name__}: {cause}")
        self.round = round_index
        self.strategy = strategy
