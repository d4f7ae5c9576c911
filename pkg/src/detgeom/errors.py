from __future__ import annotations
from pathlib import Path


class DetGeomError(Exception):
    """Base class for every error raised by detgeom."""


class InvalidBoxError(DetGeomError, ValueError):
    pass


class RatioOutOfRangeError(DetGeomError, ValueError):
    def __init__(self, ratio: float):
        super().__init__(f"ratio out of [0.5, 1.5]: got {ratio}")
        self.ratio = ratio


class UnknownLossKindError(DetGeomError, ValueError):
    pass


# ---------- involution ----------
class ShapeMismatchError(DetGeomError, ValueError):
    pass


class GroupDivisibilityError(DetGeomError, ValueError):
    def __init__(self, channels: int, groups: int):
        super().__init__(f"channels not divisible by groups: C={channels}, G={groups}")


class EvenKernelError(DetGeomError, ValueError):
    def __init__(self, k: int):
        super().__init__(f"kernel size must be odd, got K={k}")


class IncompatibleKernelSpecError(DetGeomError, ValueError):
    pass


class TensorFormatError(DetGeomError, ValueError):
    pass


# ---------- simulator ----------
class ScenarioUnsatisfiableError(DetGeomError, RuntimeError):
    pass


class DescentDivergedError(DetGeomError, RuntimeError):
    def __init__(self, pair_index: int, step: int, loss_name: str):
        super().__init__(f"NaN gradient for {loss_name} at pair {pair_index}, step {step}")
        self.pair_index = pair_index
        self.step = step


# ---------- evaluation ----------
class NoTruthsError(DetGeomError, ValueError):
    pass


class CountIdentityError(DetGeomError, AssertionError):
    pass


class UnknownHeadError(DetGeomError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown head"


# ---------- io ----------
class ParseError(DetGeomError, ValueError):
    def __init__(self, path: Path | str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = Path(path)
        self.line = line


class ArtifactWriteError(DetGeomError, OSError):
    def __init__(self, path: Path | str, reason: str):
        super().__init__(f"cannot write {path}: {reason}")
        self.path = Path(path)


class UsageError(DetGeomError, ValueError):
    """Bad command-line usage."""
